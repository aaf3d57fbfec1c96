//! Double-precision reference implementations shared by the oracle and
//! acceptance suites. Everything here is written from first principles and
//! never calls back into the executor kernels.

#![allow(dead_code)]

use diffssm_core::params::ParamSet;
use diffssm_core::rng::DetRng;
use diffssm_core::tensor::Tensor;

pub fn randn(rng: &mut DetRng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.next_gaussian())
}

/// Overwrite every parameter with small gaussians so zero-initialized
/// projections participate.
pub fn randomize(ps: &mut ParamSet<f64>, rng: &mut DetRng, scale: f64) {
    for id in ps.ids().collect::<Vec<_>>() {
        for v in ps.get_mut(id).data_mut() {
            *v = rng.next_gaussian() * scale;
        }
    }
}

pub fn get<'a>(ps: &'a ParamSet<f64>, name: &str) -> &'a Tensor<f64> {
    ps.get(ps.find(name).unwrap_or_else(|| panic!("missing param {name}")))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn ref_affine(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>, rows: usize) -> Vec<f64> {
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![0.0; rows * n];
    for i in 0..rows {
        for j in 0..n {
            let mut acc = b.data()[j];
            for p in 0..m {
                acc += x[i * m + p] * w.data()[p * n + j];
            }
            y[i * n + j] = acc;
        }
    }
    y
}

pub fn ref_softplus(x: f64) -> f64 {
    x.max(0.0) + (1.0 + (-x.abs()).exp()).ln()
}

pub fn ref_silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn ref_layer_norm(x: &[f64], d: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (orow, row) in out.chunks_mut(d).zip(x.chunks(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - mean) / (var + eps).sqrt();
        }
    }
    out
}

pub fn ref_rotary(x: &[f64], l: usize, d: usize, base: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..l {
        for j in 0..d / 2 {
            let theta = i as f64 * base.powf(-2.0 * j as f64 / d as f64);
            let (s, c) = (theta.sin(), theta.cos());
            let x0 = x[i * d + 2 * j];
            let x1 = x[i * d + 2 * j + 1];
            out[i * d + 2 * j] = x0 * c - x1 * s;
            out[i * d + 2 * j + 1] = x0 * s + x1 * c;
        }
    }
    out
}

/// Naive per-step double-precision loop for one SSM direction.
pub fn ref_ssm_dir(
    ps: &ParamSet<f64>,
    prefix: &str,
    x: &[f64],
    l: usize,
    d: usize,
    n: usize,
    reverse: bool,
) -> Vec<f64> {
    let xs: Vec<f64> = if reverse {
        (0..l).rev().flat_map(|i| x[i * d..(i + 1) * d].to_vec()).collect()
    } else {
        x.to_vec()
    };
    let xt = ref_affine(&xs, get(ps, &format!("{prefix}.w_in")), get(ps, &format!("{prefix}.b_in")), l);
    let gate_pre = ref_affine(&xs, get(ps, &format!("{prefix}.w_gate")), get(ps, &format!("{prefix}.b_gate")), l);
    let delta_pre = ref_affine(&xs, get(ps, &format!("{prefix}.w_delta")), get(ps, &format!("{prefix}.b_delta")), l);
    let b_sel = ref_affine(&xs, get(ps, &format!("{prefix}.w_b")), get(ps, &format!("{prefix}.b_b")), l);
    let c_sel = ref_affine(&xs, get(ps, &format!("{prefix}.w_c")), get(ps, &format!("{prefix}.b_c")), l);
    let a_log = get(ps, &format!("{prefix}.a_log"));

    let mut h = vec![0.0; d * n];
    let mut y = vec![0.0; l * d];
    for i in 0..l {
        for c in 0..d {
            let delta = ref_softplus(delta_pre[i * d + c]);
            let decay = (-delta * a_log.data()[c].exp()).exp();
            let mut acc = 0.0;
            for s in 0..n {
                h[c * n + s] = decay * h[c * n + s] + delta * xt[i * d + c] * b_sel[i * n + s];
                acc += c_sel[i * n + s] * h[c * n + s];
            }
            y[i * d + c] = acc * ref_silu(gate_pre[i * d + c]);
        }
    }
    let out = ref_affine(&y, get(ps, &format!("{prefix}.w_out")), get(ps, &format!("{prefix}.b_out")), l);
    if reverse {
        (0..l).rev().flat_map(|i| out[i * d..(i + 1) * d].to_vec()).collect()
    } else {
        out
    }
}

/// Explicit L×L score-matrix attention reference.
pub fn ref_attention(
    ps: &ParamSet<f64>,
    prefix: &str,
    x: &[f64],
    l: usize,
    d: usize,
    d_head: usize,
    rope_base: f64,
) -> Vec<f64> {
    let q = ref_affine(x, get(ps, &format!("{prefix}.w_q")), get(ps, &format!("{prefix}.b_q")), l);
    let k = ref_affine(x, get(ps, &format!("{prefix}.w_k")), get(ps, &format!("{prefix}.b_k")), l);
    let v = ref_affine(x, get(ps, &format!("{prefix}.w_v")), get(ps, &format!("{prefix}.b_v")), l);
    let heads = d / d_head;
    let mut merged = vec![0.0; l * d];
    for h in 0..heads {
        let take = |src: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; l * d_head];
            for i in 0..l {
                out[i * d_head..(i + 1) * d_head]
                    .copy_from_slice(&src[i * d + h * d_head..i * d + (h + 1) * d_head]);
            }
            out
        };
        let qh = ref_rotary(&take(&q), l, d_head, rope_base);
        let kh = ref_rotary(&take(&k), l, d_head, rope_base);
        let vh = take(&v);
        let scale = 1.0 / (d_head as f64).sqrt();
        for i in 0..l {
            let mut scores = vec![0.0; l];
            for (j, s) in scores.iter_mut().enumerate() {
                let mut dot = 0.0;
                for p in 0..d_head {
                    dot += qh[i * d_head + p] * kh[j * d_head + p];
                }
                *s = dot * scale;
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            for p in 0..d_head {
                let mut acc = 0.0;
                for j in 0..l {
                    acc += (scores[j] - mx).exp() / z * vh[j * d_head + p];
                }
                merged[i * d + h * d_head + p] = acc;
            }
        }
    }
    ref_affine(&merged, get(ps, &format!("{prefix}.w_o")), get(ps, &format!("{prefix}.b_o")), l)
}
