//! Full bidirectional (unmasked) multi-head attention with rotary positions.

use crate::error::Result;
use crate::params::{ParamId, ParamSet};
use crate::rng::DetRng;
use crate::tensor::{Element, Exec, Tensor};

use super::{ModelConfig, ROPE_BASE};

#[derive(Debug, Clone)]
pub struct AttnMixer {
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    n_heads: usize,
    d_head: usize,
    /// Test hook: positions off makes identical tokens indistinguishable.
    pub use_rotary: bool,
}

impl AttnMixer {
    pub fn build<E: Element>(
        config: &ModelConfig,
        prefix: &str,
        params: &mut ParamSet<E>,
        rng: &mut DetRng,
    ) -> Self {
        let d = config.d_model;
        let mut normal = |params: &mut ParamSet<E>, name: String, shape: Vec<usize>| {
            let t = Tensor::from_fn(shape, |_| rng.trunc_normal(0.02));
            params.register(name, t)
        };
        let w_q = normal(params, format!("{prefix}.w_q"), vec![d, d]);
        let b_q = params.register(format!("{prefix}.b_q"), Tensor::zeros(vec![d]));
        let w_k = normal(params, format!("{prefix}.w_k"), vec![d, d]);
        let b_k = params.register(format!("{prefix}.b_k"), Tensor::zeros(vec![d]));
        let w_v = normal(params, format!("{prefix}.w_v"), vec![d, d]);
        let b_v = params.register(format!("{prefix}.b_v"), Tensor::zeros(vec![d]));
        // residual branch output: zero so the block starts as identity
        let w_o = params.register(format!("{prefix}.w_o"), Tensor::zeros(vec![d, d]));
        let b_o = params.register(format!("{prefix}.b_o"), Tensor::zeros(vec![d]));
        AttnMixer {
            w_q,
            b_q,
            w_k,
            b_k,
            w_v,
            b_v,
            w_o,
            b_o,
            n_heads: d / config.d_head,
            d_head: config.d_head,
            use_rotary: true,
        }
    }

    /// Scaled dot-product attention over all positions, one head at a time.
    /// Cost O(L² · d).
    pub fn apply<E: Element, X: Exec<E>>(
        &self,
        ex: &mut X,
        ps: &ParamSet<E>,
        x: &X::H,
    ) -> Result<X::H> {
        let (w_q, b_q) = (ex.param(ps, self.w_q), ex.param(ps, self.b_q));
        let (w_k, b_k) = (ex.param(ps, self.w_k), ex.param(ps, self.b_k));
        let (w_v, b_v) = (ex.param(ps, self.w_v), ex.param(ps, self.b_v));
        let q = ex.affine(x, &w_q, &b_q)?;
        let k = ex.affine(x, &w_k, &b_k)?;
        let v = ex.affine(x, &w_v, &b_v)?;

        let dh = self.d_head;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = ex.slice_cols(&q, h * dh, dh)?;
            let kh = ex.slice_cols(&k, h * dh, dh)?;
            let vh = ex.slice_cols(&v, h * dh, dh)?;
            let (qh, kh) = if self.use_rotary {
                (ex.rotary(&qh, ROPE_BASE)?, ex.rotary(&kh, ROPE_BASE)?)
            } else {
                (qh, kh)
            };
            // scale queries first: avoids a second L×L temporary
            let qs = ex.scale(&qh, inv_sqrt)?;
            let kt = ex.transpose(&kh)?;
            let scores = ex.matmul(&qs, &kt)?;
            let probs = ex.softmax(&scores)?;
            heads.push(ex.matmul(&probs, &vh)?);
        }
        let merged = ex.concat_cols(&heads)?;
        let (w_o, b_o) = (ex.param(ps, self.w_o), ex.param(ps, self.b_o));
        ex.affine(&merged, &w_o, &b_o)
    }
}
