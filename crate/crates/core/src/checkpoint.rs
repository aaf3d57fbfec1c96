//! Single-file checkpoint container.
//!
//! Layout: 8 magic bytes `DIFSSM01`, a little-endian u32 header length, a
//! UTF-8 key=value header (format version, model config, named tensor
//! directory with shape/offset/byte-length, optimizer presence, rng state,
//! step count), then concatenated little-endian f32 tensor data at
//! 64-byte-aligned offsets relative to the payload start. Writes go through
//! a temp file and rename, so a checkpoint path is always whole.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Denoiser, ModelConfig, PatternKind};
use crate::trainer::{OptimHyper, OptimState};

pub const MAGIC: &[u8; 8] = b"DIFSSM01";
pub const FORMAT_VERSION: u32 = 1;
const ALIGN: usize = 64;

/// Parsed header of a checkpoint file.
#[derive(Debug, Clone)]
pub struct CheckpointInfo {
    pub version: u32,
    pub step: u64,
    pub seed: u64,
    pub has_optim: bool,
    pub config: ModelConfig,
    pub hyper: Option<OptimHyper>,
    /// (name, shape, payload offset, byte length) in directory order.
    pub tensors: Vec<(String, Vec<usize>, usize, usize)>,
}

fn align_up(x: usize) -> usize {
    x.div_ceil(ALIGN) * ALIGN
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|d| {
            d.parse::<usize>()
                .map_err(|_| Error::Checkpoint(format!("bad shape token `{d}`")))
        })
        .collect()
}

struct DirEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
}

/// Serialize the model (and optionally the optimizer) to `path`.
pub fn save_checkpoint(
    model: &Denoiser<f32>,
    optim: Option<&OptimState<f32>>,
    seed: u64,
    path: &Path,
) -> Result<()> {
    // assemble the tensor list: parameters first, then optimizer moments
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    for (name, t) in model.params().iter() {
        tensors.push((name.to_string(), t.shape().to_vec(), t.data().to_vec()));
    }
    if let Some(o) = optim {
        for (i, id) in model.params().ids().enumerate() {
            let name = model.params().name(id);
            let shape = model.params().get(id).shape().to_vec();
            tensors.push((format!("optim.m.{name}"), shape.clone(), o.m[i].clone()));
            tensors.push((format!("optim.v.{name}"), shape, o.v[i].clone()));
        }
    }

    let mut offset = 0usize;
    let mut dir = Vec::with_capacity(tensors.len());
    for (name, shape, data) in &tensors {
        let bytes = data.len() * 4;
        dir.push(DirEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            bytes,
        });
        offset = align_up(offset + bytes);
    }

    let c = model.config();
    let mut header = String::new();
    header.push_str(&format!("version={FORMAT_VERSION}\n"));
    header.push_str(&format!("step={}\n", optim.map(|o| o.step).unwrap_or(0)));
    header.push_str(&format!("seed={seed}\n"));
    header.push_str(&format!("optim={}\n", u8::from(optim.is_some())));
    header.push_str(&format!("model.n_layers={}\n", c.n_layers));
    header.push_str(&format!("model.d_model={}\n", c.d_model));
    header.push_str(&format!("model.d_head={}\n", c.d_head));
    header.push_str(&format!("model.d_state={}\n", c.d_state));
    header.push_str(&format!("model.mlp_ratio={}\n", c.mlp_ratio));
    header.push_str(&format!("model.use_mlp={}\n", c.use_mlp));
    header.push_str(&format!("model.vocab={}\n", c.vocab));
    header.push_str(&format!("model.context_len={}\n", c.context_len));
    header.push_str(&format!("model.pattern_kind={}\n", c.pattern_kind.name()));
    header.push_str(&format!("model.k={}\n", c.k));
    header.push_str(&format!("model.d_cond={}\n", c.d_cond));
    if let Some(o) = optim {
        let h = &o.hyper;
        header.push_str(&format!("optim.lr={}\n", h.lr));
        header.push_str(&format!("optim.beta1={}\n", h.beta1));
        header.push_str(&format!("optim.beta2={}\n", h.beta2));
        header.push_str(&format!("optim.eps={}\n", h.eps));
        header.push_str(&format!("optim.weight_decay={}\n", h.weight_decay));
        header.push_str(&format!("optim.clip_norm={}\n", h.clip_norm));
        header.push_str(&format!("optim.warmup_steps={}\n", h.warmup_steps));
    }
    for e in &dir {
        header.push_str(&format!(
            "tensor={} {} {} {}\n",
            e.name,
            shape_str(&e.shape),
            e.offset,
            e.bytes
        ));
    }

    let header_bytes = header.as_bytes();
    let payload_start = align_up(MAGIC.len() + 4 + header_bytes.len());
    let payload_len = dir.last().map(|e| align_up(e.offset + e.bytes)).unwrap_or(0);

    let mut buf = Vec::with_capacity(payload_start + payload_len);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(header_bytes);
    buf.resize(payload_start, 0);
    for ((_, _, data), e) in tensors.iter().zip(&dir) {
        debug_assert_eq!(buf.len(), payload_start + e.offset);
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.resize(payload_start + align_up(e.offset + e.bytes), 0);
    }

    // atomic: write sibling temp file, then rename over the target
    let tmp = path.with_extension("tmp");
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path)?;
    Ok(())
}

fn header_fields(header: &str) -> (BTreeMap<String, String>, Vec<DirEntry>) {
    let mut fields = BTreeMap::new();
    let mut dir = Vec::new();
    for line in header.lines() {
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        if key == "tensor" {
            let parts: Vec<&str> = value.split_whitespace().collect();
            if parts.len() == 4 {
                if let (Ok(shape), Ok(offset), Ok(bytes)) = (
                    parse_shape(parts[1]),
                    parts[2].parse::<usize>(),
                    parts[3].parse::<usize>(),
                ) {
                    dir.push(DirEntry {
                        name: parts[0].to_string(),
                        shape,
                        offset,
                        bytes,
                    });
                }
            }
        } else {
            fields.insert(key.to_string(), value.to_string());
        }
    }
    (fields, dir)
}

fn req<'a>(fields: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    fields
        .get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| Error::Checkpoint(format!("header missing `{key}`")))
}

fn parse<T: std::str::FromStr>(fields: &BTreeMap<String, String>, key: &str) -> Result<T> {
    req(fields, key)?
        .parse::<T>()
        .map_err(|_| Error::Checkpoint(format!("bad value for `{key}`")))
}

/// Parse just the header (magic, version, config, directory).
pub fn read_info(path: &Path) -> Result<CheckpointInfo> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() + 4 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint", path.display())));
    }
    let hlen = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    if bytes.len() < 12 + hlen {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header = std::str::from_utf8(&bytes[12..12 + hlen])
        .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    let (fields, dir) = header_fields(header);

    let version: u32 = parse(&fields, "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }
    let config = ModelConfig {
        n_layers: parse(&fields, "model.n_layers")?,
        d_model: parse(&fields, "model.d_model")?,
        d_head: parse(&fields, "model.d_head")?,
        d_state: parse(&fields, "model.d_state")?,
        mlp_ratio: parse(&fields, "model.mlp_ratio")?,
        use_mlp: parse(&fields, "model.use_mlp")?,
        vocab: parse(&fields, "model.vocab")?,
        context_len: parse(&fields, "model.context_len")?,
        pattern_kind: PatternKind::parse(req(&fields, "model.pattern_kind")?)?,
        k: parse(&fields, "model.k")?,
        d_cond: parse(&fields, "model.d_cond")?,
    };
    let has_optim = req(&fields, "optim")? == "1";
    let hyper = if has_optim {
        Some(OptimHyper {
            lr: parse(&fields, "optim.lr")?,
            beta1: parse(&fields, "optim.beta1")?,
            beta2: parse(&fields, "optim.beta2")?,
            eps: parse(&fields, "optim.eps")?,
            weight_decay: parse(&fields, "optim.weight_decay")?,
            clip_norm: parse(&fields, "optim.clip_norm")?,
            warmup_steps: parse(&fields, "optim.warmup_steps")?,
        })
    } else {
        None
    };

    Ok(CheckpointInfo {
        version,
        step: parse(&fields, "step")?,
        seed: parse(&fields, "seed")?,
        has_optim,
        config,
        hyper,
        tensors: dir
            .into_iter()
            .map(|e| (e.name, e.shape, e.offset, e.bytes))
            .collect(),
    })
}

/// Load a checkpoint: model, optimizer state when present, and the run seed.
pub fn load_checkpoint(path: &Path) -> Result<(Denoiser<f32>, Option<OptimState<f32>>, u64)> {
    let info = read_info(path)?;
    let bytes = fs::read(path)?;
    let hlen = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let payload_start = align_up(12 + hlen);

    // validate directory: in-bounds and non-overlapping
    let payload_len = bytes.len().saturating_sub(payload_start);
    let mut sorted: Vec<&(String, Vec<usize>, usize, usize)> = info.tensors.iter().collect();
    sorted.sort_by_key(|e| e.2);
    let mut prev_end = 0usize;
    for (name, shape, offset, blen) in &sorted {
        let numel: usize = shape.iter().product();
        if numel * 4 != *blen {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}`: shape {shape:?} disagrees with byte length {blen}"
            )));
        }
        if *offset < prev_end {
            return Err(Error::Checkpoint(format!("tensor `{name}`: overlapping payload range")));
        }
        if offset + blen > payload_len {
            return Err(Error::Checkpoint(format!(
                "truncated payload: tensor `{name}` ends at {} but payload has {} bytes",
                offset + blen,
                payload_len
            )));
        }
        prev_end = offset + blen;
    }

    let read_tensor = |offset: usize, blen: usize| -> Vec<f32> {
        bytes[payload_start + offset..payload_start + offset + blen]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    };

    let mut model: Denoiser<f32> = Denoiser::new(info.config.clone(), 0)?;
    let by_name: BTreeMap<&str, &(String, Vec<usize>, usize, usize)> =
        info.tensors.iter().map(|e| (e.0.as_str(), e)).collect();

    for id in model.params().ids().collect::<Vec<_>>() {
        let name = model.params().name(id).to_string();
        let entry = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if entry.1 != model.params().get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}`: shape {:?} does not match model {:?}",
                entry.1,
                model.params().get(id).shape()
            )));
        }
        model.params_mut().set_data(id, read_tensor(entry.2, entry.3))?;
    }

    let optim = if info.has_optim {
        let hyper = info.hyper.clone().expect("optim flag implies hyper fields");
        let mut state = OptimState::for_model(&model, hyper);
        state.step = info.step;
        for (i, id) in model.params().ids().enumerate() {
            let name = model.params().name(id);
            for (slot, prefix) in [(0, "optim.m."), (1, "optim.v.")] {
                let key = format!("{prefix}{name}");
                let entry = by_name
                    .get(key.as_str())
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
                let data = read_tensor(entry.2, entry.3);
                if slot == 0 {
                    state.m[i] = data;
                } else {
                    state.v[i] = data;
                }
            }
        }
        Some(state)
    } else {
        None
    };

    Ok((model, optim, info.seed))
}
