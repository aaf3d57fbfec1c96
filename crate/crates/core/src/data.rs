//! Byte-level tokenization, corpus ingestion, deterministic train/validation
//! splitting, and fixed-length sequence packing.
//!
//! Vocabulary layout: ids 0..=255 are raw byte values, 256 is PAD, and the
//! model's output width is rounded to 258 classes (id 257 is a reserved slot
//! the encoder never produces). The MASK id sits one past the data
//! vocabulary at 258 and never appears in packed data. PAD positions are
//! flagged prompt-exempt so the masking process and the loss sum skip them.

use std::fs;
use std::path::{Path, PathBuf};

use crate::diffusion::TokenSequence;
use crate::error::{Error, Result};
use crate::rng::{mix, unit_at};

pub const BYTE_IDS: usize = 256;
pub const PAD_ID: usize = 256;
/// Reserved output class; never produced by `encode`.
pub const RESERVED_ID: usize = 257;
/// Data vocabulary size (model output classes).
pub const VOCAB: usize = 258;
/// One past the data vocabulary.
pub const MASK_ID: usize = VOCAB;

const SPLIT_TAG: u64 = u64::from_le_bytes(*b"cpsplit0");

/// Bytes to token ids. Never produces PAD, RESERVED, or MASK.
pub fn encode(text: &[u8]) -> Vec<usize> {
    text.iter().map(|&b| b as usize).collect()
}

/// Token ids back to bytes. With `strip` set, non-byte bookkeeping ids
/// (PAD, RESERVED, MASK) are dropped; without it any non-byte id is an
/// error so masks can never leak silently into text.
pub fn decode(ids: &[usize], strip: bool) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        if id < BYTE_IDS {
            out.push(id as u8);
        } else if !strip {
            let what = match id {
                PAD_ID => "PAD",
                RESERVED_ID => "RESERVED",
                MASK_ID => "MASK",
                _ => "out-of-vocabulary",
            };
            return Err(Error::domain(
                "decode",
                format!("{what} id {id} in input (use strip to drop bookkeeping ids)"),
            ));
        }
    }
    Ok(out)
}

/// Which half of the split a packed corpus holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
}

/// Fixed-length sequences plus provenance.
#[derive(Debug, Clone)]
pub struct PackedCorpus {
    pub sequences: Vec<TokenSequence>,
    pub split: Split,
    /// Content hash of the source ids.
    pub digest: u64,
}

impl PackedCorpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

fn content_digest(ids: &[usize]) -> u64 {
    // FNV-1a over little-endian id words
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &id in ids {
        for b in (id as u64).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Contiguous non-overlapping windows of `context_len` ids; the final partial
/// window is padded with PAD (flagged prompt-exempt). Window membership in
/// train/valid hashes (seed, digest, window index).
pub fn pack(
    ids: &[usize],
    context_len: usize,
    split_fraction: f64,
    seed: u64,
) -> Result<(PackedCorpus, PackedCorpus)> {
    if ids.is_empty() {
        return Err(Error::domain("pack", "empty corpus"));
    }
    if context_len < 2 {
        return Err(Error::domain("pack", format!("context_len {context_len} must be >= 2")));
    }
    if !(0.0..=1.0).contains(&split_fraction) {
        return Err(Error::domain(
            "pack",
            format!("split_fraction {split_fraction} outside [0, 1]"),
        ));
    }
    if ids.iter().any(|&id| id >= MASK_ID) {
        return Err(Error::domain("pack", "corpus contains MASK or out-of-range ids"));
    }
    let digest = content_digest(ids);
    let windows = ids.len().div_ceil(context_len);
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for w in 0..windows {
        let lo = w * context_len;
        let hi = (lo + context_len).min(ids.len());
        let mut window = ids[lo..hi].to_vec();
        let pad_from = window.len();
        window.resize(context_len, PAD_ID);
        let seq = if pad_from < context_len {
            let mut exempt = vec![false; context_len];
            exempt[pad_from..].fill(true);
            TokenSequence::with_prompt(window, exempt)?
        } else {
            TokenSequence::new(window)
        };
        let u = unit_at(mix(seed, &[digest]), &[SPLIT_TAG, w as u64]);
        if u < split_fraction {
            train.push(seq);
        } else {
            valid.push(seq);
        }
    }
    Ok((
        PackedCorpus {
            sequences: train,
            split: Split::Train,
            digest,
        },
        PackedCorpus {
            sequences: valid,
            split: Split::Valid,
            digest,
        },
    ))
}

fn walk(path: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .collect();
        entries.sort();
        for e in entries {
            walk(&e, files)?;
        }
    } else {
        files.push(path.to_path_buf());
    }
    Ok(())
}

/// Read one or more files or directories (walked in lexicographic order) and
/// concatenate their bytes.
pub fn read_corpus_bytes(paths: &[PathBuf]) -> Result<Vec<u8>> {
    let mut files = Vec::new();
    for p in paths {
        if !p.exists() {
            return Err(Error::domain("read_corpus", format!("no such path: {}", p.display())));
        }
        walk(p, &mut files)?;
    }
    let mut out = Vec::new();
    for f in files {
        out.extend(fs::read(&f)?);
    }
    Ok(out)
}
