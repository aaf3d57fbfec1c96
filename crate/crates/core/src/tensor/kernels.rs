//! Forward kernels shared by the recording and eager executors.
//!
//! Every kernel validates shapes, computes sequentially-deterministic results
//! (parallel kernels assign each output element to exactly one thread, so
//! accumulation order never depends on thread count), and rejects non-finite
//! outputs rather than letting them propagate. Outputs are built in a single
//! pass; the finiteness scan is a vectorizable integer OR-reduction.

use rayon::prelude::*;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Below this many multiply-adds a parallel dispatch costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 18;

fn all_finite<E: Element>(data: &[E]) -> bool {
    let mut bad = 0u32;
    for &v in data {
        bad |= v.non_finite_bit();
    }
    bad == 0
}

fn finish<E: Element>(shape: Vec<usize>, data: Vec<E>, op: &'static str) -> Result<Tensor<E>> {
    if all_finite(&data) {
        Ok(Tensor::from_raw(shape, data))
    } else {
        Err(Error::NonFinite { op })
    }
}

#[inline]
fn sigmoid<E: Element>(x: E) -> E {
    if x >= E::ZERO {
        E::ONE / (E::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::ONE + e)
    }
}

#[inline]
pub fn softplus_scalar<E: Element>(x: E) -> E {
    // max(x, 0) + ln(1 + e^{-|x|}): exact and overflow-safe on both tails
    let ax = if x >= E::ZERO { x } else { -x };
    x.maximum(E::ZERO) + (-ax).exp().ln_1p()
}

#[inline]
fn silu_scalar<E: Element>(x: E) -> E {
    x * sigmoid(x)
}

pub fn silu_deriv<E: Element>(x: E) -> E {
    let s = sigmoid(x);
    s * (E::ONE + x * (E::ONE - s))
}

pub fn sigmoid_scalar<E: Element>(x: E) -> E {
    sigmoid(x)
}

// ── matrix products ─────────────────────────────────────────────────

/// Accumulator block width: wide enough to keep stores off the hot path,
/// small enough to live in vector registers.
const MM_BLOCK: usize = 32;

/// Row-major [m,k] @ [k,n] accumulated into `out` (caller initializes rows).
/// Output columns are processed in register blocks so each element costs one
/// load-fma rather than a load-fma-store round trip per k step.
pub fn matmul_into<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(out.len(), m * n);
    let body = |i: usize, crow: &mut [E]| {
        let arow = &a[i * k..(i + 1) * k];
        let mut j = 0;
        while j + MM_BLOCK <= n {
            let mut acc = [E::ZERO; MM_BLOCK];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * n + j..p * n + j + MM_BLOCK];
                for (x, &bv) in acc.iter_mut().zip(brow) {
                    *x += av * bv;
                }
            }
            for (c, x) in crow[j..j + MM_BLOCK].iter_mut().zip(acc) {
                *c += x;
            }
            j += MM_BLOCK;
        }
        if j < n {
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * n + j..(p + 1) * n];
                for (c, &bv) in crow[j..].iter_mut().zip(brow) {
                    *c += av * bv;
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, crow)| body(i, crow));
    } else {
        for (i, crow) in out.chunks_mut(n).enumerate() {
            body(i, crow);
        }
    }
}

pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::dimension("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut data = vec![E::ZERO; m * n];
    matmul_into(a.data(), b.data(), m, k, n, &mut data);
    finish(vec![m, n], data, "matmul")
}

/// y = x W + b over the last axis; leading axes of x are carried through.
pub fn affine<E: Element>(x: &Tensor<E>, w: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if w.shape().len() != 2 || x.cols() != w.shape()[0] {
        return Err(Error::dimension("affine_map", x.shape(), w.shape()));
    }
    let (m, n) = (w.shape()[0], w.shape()[1]);
    if b.numel() != n {
        return Err(Error::dimension("affine_map", w.shape(), b.shape()));
    }
    let rows = x.rows();
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().unwrap() = n;
    // seed each output row with the bias, then accumulate the product
    let mut data = Vec::with_capacity(rows * n);
    for _ in 0..rows {
        data.extend_from_slice(b.data());
    }
    matmul_into(x.data(), w.data(), rows, m, n, &mut data);
    finish(out_shape, data, "affine_map")
}

pub fn transpose<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    if x.shape().len() != 2 {
        return Err(Error::dimension("transpose", x.shape(), &[]));
    }
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let mut data = vec![E::ZERO; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = xd[i * c + j];
        }
    }
    Ok(Tensor::from_raw(vec![c, r], data))
}

// ── row-wise normalizations ─────────────────────────────────────────

pub fn softmax<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let n = x.cols();
    if n == 0 {
        return Err(Error::dimension("softmax", x.shape(), &[]));
    }
    let mut data = vec![E::ZERO; x.numel()];
    let body = |row: &[E], orow: &mut [E]| {
        let mut mx = row[0];
        for &v in &row[1..] {
            mx = mx.maximum(v);
        }
        let mut sum = E::ZERO;
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - mx).exp();
            *o = e;
            sum += e;
        }
        let inv = E::ONE / sum;
        for o in orow.iter_mut() {
            *o *= inv;
        }
    };
    if x.numel() >= PAR_THRESHOLD && x.rows() > 1 {
        data.par_chunks_mut(n)
            .zip(x.data().par_chunks(n))
            .for_each(|(orow, row)| body(row, orow));
    } else {
        for (orow, row) in data.chunks_mut(n).zip(x.data().chunks(n)) {
            body(row, orow);
        }
    }
    finish(x.shape().to_vec(), data, "softmax")
}

pub fn layer_norm<E: Element>(x: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
    let d = x.cols();
    if d == 0 {
        return Err(Error::dimension("layer_normalize", x.shape(), &[]));
    }
    if eps <= 0.0 {
        return Err(Error::domain("layer_normalize", format!("eps {eps} must be > 0")));
    }
    let epsv = E::from_f64(eps);
    let inv_d = E::ONE / E::from_f64(d as f64);
    let mut data = Vec::with_capacity(x.numel());
    for row in x.data().chunks(d) {
        let mut mean = E::ZERO;
        for &v in row {
            mean += v;
        }
        mean *= inv_d;
        let mut var = E::ZERO;
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_d;
        let inv_std = E::ONE / (var + epsv).sqrt();
        data.extend(row.iter().map(|&v| (v - mean) * inv_std));
    }
    finish(x.shape().to_vec(), data, "layer_normalize")
}

// ── linear recurrence scan ──────────────────────────────────────────

/// h_i = a_i ⊙ h_{i-1} + b_i over the first axis, h_0 given. O(L·C).
pub fn scan<E: Element>(a: &Tensor<E>, b: &Tensor<E>, h0: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::dimension("linear_recurrence_scan", a.shape(), b.shape()));
    }
    let (l, c) = (a.shape()[0], a.shape()[1]);
    if h0.numel() != c {
        return Err(Error::dimension("linear_recurrence_scan", a.shape(), h0.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut h: Vec<E> = h0.data().to_vec();
    let mut data = Vec::with_capacity(l * c);
    for i in 0..l {
        let arow = &ad[i * c..(i + 1) * c];
        let brow = &bd[i * c..(i + 1) * c];
        for j in 0..c {
            h[j] = arow[j] * h[j] + brow[j];
        }
        data.extend_from_slice(&h);
    }
    finish(vec![l, c], data, "linear_recurrence_scan")
}

// ── fused selective scan ────────────────────────────────────────────

/// Diagonal selective state update fused with its readout, visiting
/// positions front-to-back (or back-to-front when `reverse` is set):
///   h_k[c,s] = decay_{p(k)}[c] · h_{k-1}[c,s] + dx_{p(k)}[c] · b_{p(k)}[s]
///   y_{p(k)}[c] = Σ_s c_{p(k)}[s] · h_k[c,s],   h before the first visit = 0
/// One pass over the sequence; the state lives in cache instead of L
/// materialized [L, d·n] tensors. The state trajectory (in visit order) is
/// returned only when the backward pass will need it.
pub fn selective_scan<E: Element>(
    decay: &Tensor<E>,
    dx: &Tensor<E>,
    b_sel: &Tensor<E>,
    c_sel: &Tensor<E>,
    reverse: bool,
    keep_state: bool,
) -> Result<(Tensor<E>, Option<Tensor<E>>)> {
    if decay.shape() != dx.shape() || decay.shape().len() != 2 {
        return Err(Error::dimension("selective_scan", decay.shape(), dx.shape()));
    }
    if b_sel.shape() != c_sel.shape() || b_sel.shape().len() != 2 || b_sel.shape()[0] != decay.shape()[0]
    {
        return Err(Error::dimension("selective_scan", decay.shape(), b_sel.shape()));
    }
    let (l, d) = (decay.shape()[0], decay.shape()[1]);
    let n = b_sel.shape()[1];
    let (decay_d, dx_d, b_d, c_d) = (decay.data(), dx.data(), b_sel.data(), c_sel.data());

    let mut h = vec![E::ZERO; d * n];
    let mut y = vec![E::ZERO; l * d];
    let mut trajectory = if keep_state {
        Vec::with_capacity(l * d * n)
    } else {
        Vec::new()
    };
    for k in 0..l {
        let i = if reverse { l - 1 - k } else { k };
        let brow = &b_d[i * n..(i + 1) * n];
        let crow = &c_d[i * n..(i + 1) * n];
        let yrow = &mut y[i * d..(i + 1) * d];
        for c in 0..d {
            let dec = decay_d[i * d + c];
            let drive = dx_d[i * d + c];
            let hc = &mut h[c * n..(c + 1) * n];
            let mut acc = E::ZERO;
            for ((hv, &bv), &cv) in hc.iter_mut().zip(brow).zip(crow) {
                *hv = dec * *hv + drive * bv;
                acc += cv * *hv;
            }
            yrow[c] = acc;
        }
        if keep_state {
            trajectory.extend_from_slice(&h);
        }
    }
    let y = finish(vec![l, d], y, "selective_scan")?;
    let state = keep_state.then(|| Tensor::from_raw(vec![l, d * n], trajectory));
    Ok((y, state))
}

/// Adjoint of [`selective_scan`]: one pass over the stored trajectory in
/// reverse visit order.
pub fn selective_scan_bwd<E: Element>(
    decay: &Tensor<E>,
    dx: &Tensor<E>,
    b_sel: &Tensor<E>,
    c_sel: &Tensor<E>,
    reverse: bool,
    state: &Tensor<E>,
    grad_y: &[E],
) -> (Vec<E>, Vec<E>, Vec<E>, Vec<E>) {
    let (l, d) = (decay.shape()[0], decay.shape()[1]);
    let n = b_sel.shape()[1];
    let (decay_d, dx_d, b_d, c_d, h_d) = (
        decay.data(),
        dx.data(),
        b_sel.data(),
        c_sel.data(),
        state.data(),
    );
    let mut d_decay = vec![E::ZERO; l * d];
    let mut d_dx = vec![E::ZERO; l * d];
    let mut d_b = vec![E::ZERO; l * n];
    let mut d_c = vec![E::ZERO; l * n];
    // λ[c,s] accumulates dL/dh at the current visit including later visits
    let mut lam = vec![E::ZERO; d * n];
    for k in (0..l).rev() {
        let i = if reverse { l - 1 - k } else { k };
        let brow = &b_d[i * n..(i + 1) * n];
        let crow = &c_d[i * n..(i + 1) * n];
        let h_now = &h_d[k * d * n..(k + 1) * d * n];
        let h_prev = if k > 0 {
            Some(&h_d[(k - 1) * d * n..k * d * n])
        } else {
            None
        };
        for c in 0..d {
            let g = grad_y[i * d + c];
            let dec = decay_d[i * d + c];
            let drive = dx_d[i * d + c];
            let lc = &mut lam[c * n..(c + 1) * n];
            let hc = &h_now[c * n..(c + 1) * n];
            let mut acc_decay = E::ZERO;
            let mut acc_dx = E::ZERO;
            for s in 0..n {
                // direct readout contribution plus the carried adjoint
                let l_tot = lc[s] + g * crow[s];
                d_c[i * n + s] += g * hc[s];
                let prev = match h_prev {
                    Some(hp) => hp[c * n + s],
                    None => E::ZERO,
                };
                acc_decay += l_tot * prev;
                acc_dx += l_tot * brow[s];
                d_b[i * n + s] += l_tot * drive;
                // carry to the previous visit
                lc[s] = l_tot * dec;
            }
            d_decay[i * d + c] = acc_decay;
            d_dx[i * d + c] = acc_dx;
        }
    }
    (d_decay, d_dx, d_b, d_c)
}

// ── elementwise ─────────────────────────────────────────────────────

fn unary<E: Element>(x: &Tensor<E>, op: &'static str, f: impl Fn(E) -> E + Sync) -> Result<Tensor<E>> {
    let data: Vec<E> = if x.numel() >= PAR_THRESHOLD {
        x.data().par_iter().map(|&v| f(v)).collect()
    } else {
        x.data().iter().map(|&v| f(v)).collect()
    };
    finish(x.shape().to_vec(), data, op)
}

fn binary<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    op: &'static str,
    f: impl Fn(E, E) -> E + Sync,
) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(Error::dimension(op, a.shape(), b.shape()));
    }
    let data: Vec<E> = if a.numel() >= PAR_THRESHOLD {
        a.data()
            .par_iter()
            .zip(b.data().par_iter())
            .map(|(&x, &y)| f(x, y))
            .collect()
    } else {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    };
    finish(a.shape().to_vec(), data, op)
}

pub fn silu<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    unary(x, "silu", silu_scalar)
}

pub fn softplus<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    unary(x, "softplus", softplus_scalar)
}

pub fn exp<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    unary(x, "exp", |v| v.exp())
}

pub fn mul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    binary(a, b, "mul", |x, y| x * y)
}

pub fn add<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    binary(a, b, "add", |x, y| x + y)
}

pub fn scale<E: Element>(x: &Tensor<E>, c: f64) -> Result<Tensor<E>> {
    let cv = E::from_f64(c);
    unary(x, "scale", |v| v * cv)
}

pub fn add_const<E: Element>(x: &Tensor<E>, c: f64) -> Result<Tensor<E>> {
    let cv = E::from_f64(c);
    unary(x, "add_const", |v| v + cv)
}

// ── losses and lookups ──────────────────────────────────────────────

/// Per-row −log softmax(logits)[target] via log-sum-exp; probabilities are
/// never materialized.
pub fn cross_entropy<E: Element>(logits: &Tensor<E>, targets: &[usize]) -> Result<Tensor<E>> {
    if logits.shape().len() != 2 || logits.shape()[0] != targets.len() {
        return Err(Error::dimension("cross_entropy", logits.shape(), &[targets.len()]));
    }
    let v = logits.cols();
    let mut data = Vec::with_capacity(targets.len());
    for (row, &t) in logits.data().chunks(v).zip(targets) {
        if t >= v {
            return Err(Error::Index {
                op: "cross_entropy",
                index: t,
                limit: v,
            });
        }
        let mut mx = row[0];
        for &x in &row[1..] {
            mx = mx.maximum(x);
        }
        let mut sum = E::ZERO;
        for &x in row {
            sum += (x - mx).exp();
        }
        data.push(mx + sum.ln() - row[t]);
    }
    finish(vec![targets.len()], data, "cross_entropy")
}

/// Gather rows of `table` at `ids`.
pub fn embed<E: Element>(table: &Tensor<E>, ids: &[usize]) -> Result<Tensor<E>> {
    if table.shape().len() != 2 {
        return Err(Error::dimension("embed", table.shape(), &[]));
    }
    let (rows, d) = (table.shape()[0], table.shape()[1]);
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= rows {
            return Err(Error::Index {
                op: "embed",
                index: id,
                limit: rows,
            });
        }
        data.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
    }
    Ok(Tensor::from_raw(vec![ids.len(), d], data))
}

// ── layout ops ──────────────────────────────────────────────────────

pub fn slice_cols<E: Element>(x: &Tensor<E>, start: usize, width: usize) -> Result<Tensor<E>> {
    let c = x.cols();
    if start + width > c || width == 0 {
        return Err(Error::Index {
            op: "slice_cols",
            index: start + width,
            limit: c,
        });
    }
    let rows = x.rows();
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = width;
    let mut data = Vec::with_capacity(rows * width);
    for i in 0..rows {
        data.extend_from_slice(&x.data()[i * c + start..i * c + start + width]);
    }
    Ok(Tensor::from_raw(shape, data))
}

pub fn concat_cols<E: Element>(parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
    let rows = parts[0].rows();
    if parts.iter().any(|p| p.rows() != rows) {
        return Err(Error::dimension("concat_cols", parts[0].shape(), parts[1].shape()));
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut shape = parts[0].shape().to_vec();
    *shape.last_mut().unwrap() = total;
    let mut data = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for p in parts {
            let c = p.cols();
            data.extend_from_slice(&p.data()[i * c..(i + 1) * c]);
        }
    }
    Ok(Tensor::from_raw(shape, data))
}

/// Repeat each element of the last axis `n` times: [.., C] -> [.., C*n].
pub fn repeat_each<E: Element>(x: &Tensor<E>, n: usize) -> Result<Tensor<E>> {
    let c = x.cols();
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = c * n;
    let mut data = Vec::with_capacity(x.numel() * n);
    for &v in x.data() {
        data.resize(data.len() + n, v);
    }
    Ok(Tensor::from_raw(shape, data))
}

/// Tile the whole last axis `times` times: [.., C] -> [.., C*times].
pub fn tile_last<E: Element>(x: &Tensor<E>, times: usize) -> Result<Tensor<E>> {
    let c = x.cols();
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = c * times;
    let mut data = Vec::with_capacity(x.numel() * times);
    for row in x.data().chunks(c) {
        for _ in 0..times {
            data.extend_from_slice(row);
        }
    }
    Ok(Tensor::from_raw(shape, data))
}

/// Sum consecutive groups of `n` along the last axis: [.., C*n] -> [.., C].
pub fn sum_groups<E: Element>(x: &Tensor<E>, n: usize) -> Result<Tensor<E>> {
    let cn = x.cols();
    if n == 0 || cn % n != 0 {
        return Err(Error::dimension("sum_groups", x.shape(), &[n]));
    }
    let c = cn / n;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = c;
    let mut data = Vec::with_capacity(x.rows() * c);
    for group in x.data().chunks(n) {
        let mut s = E::ZERO;
        for &v in group {
            s += v;
        }
        data.push(s);
    }
    finish(shape, data, "sum_groups")
}

/// Reverse along the first axis.
pub fn reverse_rows<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    if x.shape().len() != 2 {
        return Err(Error::dimension("reverse_rows", x.shape(), &[]));
    }
    let (l, c) = (x.shape()[0], x.shape()[1]);
    let mut data = Vec::with_capacity(l * c);
    for i in (0..l).rev() {
        data.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
    }
    Ok(Tensor::from_raw(vec![l, c], data))
}

/// Repeat a single row `rows` times: [C] or [1, C] -> [rows, C].
pub fn broadcast_rows<E: Element>(x: &Tensor<E>, rows: usize) -> Result<Tensor<E>> {
    if x.rows() != 1 {
        return Err(Error::dimension("broadcast_rows", x.shape(), &[rows]));
    }
    let c = x.cols();
    let mut data = Vec::with_capacity(rows * c);
    for _ in 0..rows {
        data.extend_from_slice(x.data());
    }
    Ok(Tensor::from_raw(vec![rows, c], data))
}

pub fn sum_all<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let mut s = E::ZERO;
    for &v in x.data() {
        s += v;
    }
    finish(vec![1], vec![s], "sum_all")
}

/// Rotate adjacent feature pairs of row i by position-dependent angles
/// θ_j = i · base^(−2j/d). Rows are positions.
pub fn rotary<E: Element>(x: &Tensor<E>, base: f64) -> Result<Tensor<E>> {
    if x.shape().len() != 2 || x.cols() % 2 != 0 {
        return Err(Error::dimension("rotary", x.shape(), &[2]));
    }
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let half = d / 2;
    // per-pair frequencies are position-independent; precompute once
    let freqs: Vec<f64> = (0..half)
        .map(|j| base.powf(-2.0 * j as f64 / d as f64))
        .collect();
    let xd = x.data();
    let mut data = Vec::with_capacity(l * d);
    for i in 0..l {
        for (j, &freq) in freqs.iter().enumerate() {
            let theta = i as f64 * freq;
            let (s, c) = (E::from_f64(theta.sin()), E::from_f64(theta.cos()));
            let x0 = xd[i * d + 2 * j];
            let x1 = xd[i * d + 2 * j + 1];
            data.push(x0 * c - x1 * s);
            data.push(x0 * s + x1 * c);
        }
    }
    finish(vec![l, d], data, "rotary")
}
