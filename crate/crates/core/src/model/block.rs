//! Diffusion block: AdaLN-conditioned mixer, residual, optional AdaLN + MLP.

use crate::error::Result;
use crate::params::{ParamId, ParamSet};
use crate::rng::DetRng;
use crate::tensor::{Element, Exec, Tensor};

use super::{AttnMixer, LayerKind, ModelConfig, SsmMixer, LN_EPS};

/// Timestep-conditioned layer norm parameters. Zero-initialized so every
/// block starts as an identity-modulated layer norm.
#[derive(Debug, Clone)]
pub struct AdaLnParams {
    pub w_cond: ParamId,
    pub b_cond: ParamId,
}

impl AdaLnParams {
    fn build<E: Element>(d: usize, d_cond: usize, prefix: &str, params: &mut ParamSet<E>) -> Self {
        AdaLnParams {
            w_cond: params.register(format!("{prefix}.w_cond"), Tensor::zeros(vec![d_cond, 2 * d])),
            b_cond: params.register(format!("{prefix}.b_cond"), Tensor::zeros(vec![2 * d])),
        }
    }
}

/// γ̂, β = W_cond τ; output = layernorm(x) · (1 + γ̂) + β, channel-wise.
pub fn adaln<E: Element, X: Exec<E>>(
    ex: &mut X,
    ps: &ParamSet<E>,
    x: &X::H,
    tau: &X::H,
    p: &AdaLnParams,
    d: usize,
) -> Result<X::H> {
    let rows = ex.value(x).rows();
    let normed = ex.layer_norm(x, LN_EPS)?;
    let (w, b) = (ex.param(ps, p.w_cond), ex.param(ps, p.b_cond));
    let gb = ex.affine(tau, &w, &b)?;
    let gamma = ex.slice_cols(&gb, 0, d)?;
    let beta = ex.slice_cols(&gb, d, d)?;
    let scale_row = ex.add_const(&gamma, 1.0)?;
    let scale = ex.broadcast_rows(&scale_row, rows)?;
    let shift = ex.broadcast_rows(&beta, rows)?;
    let scaled = ex.mul(&normed, &scale)?;
    ex.add(&scaled, &shift)
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    fn build<E: Element>(
        config: &ModelConfig,
        prefix: &str,
        params: &mut ParamSet<E>,
        rng: &mut DetRng,
    ) -> Self {
        let d = config.d_model;
        let hidden = config.mlp_ratio * d;
        let w1 = params.register(
            format!("{prefix}.w1"),
            Tensor::from_fn(vec![d, hidden], |_| rng.trunc_normal(0.02)),
        );
        let b1 = params.register(format!("{prefix}.b1"), Tensor::zeros(vec![hidden]));
        // residual branch output: zero so the block starts as identity
        let w2 = params.register(format!("{prefix}.w2"), Tensor::zeros(vec![hidden, d]));
        let b2 = params.register(format!("{prefix}.b2"), Tensor::zeros(vec![d]));
        Mlp { w1, b1, w2, b2 }
    }

    fn apply<E: Element, X: Exec<E>>(&self, ex: &mut X, ps: &ParamSet<E>, x: &X::H) -> Result<X::H> {
        let (w1, b1) = (ex.param(ps, self.w1), ex.param(ps, self.b1));
        let h = ex.affine(x, &w1, &b1)?;
        let h = ex.silu(&h)?;
        let (w2, b2) = (ex.param(ps, self.w2), ex.param(ps, self.b2));
        ex.affine(&h, &w2, &b2)
    }
}

#[derive(Debug, Clone)]
pub enum Mixer {
    Ssm(SsmMixer),
    Attn(AttnMixer),
}

/// One denoiser layer. Each sublayer has its own conditioning projection.
#[derive(Debug, Clone)]
pub struct Block {
    pub kind: LayerKind,
    norm1: AdaLnParams,
    mixer: Mixer,
    norm2: Option<AdaLnParams>,
    mlp: Option<Mlp>,
}

impl Block {
    pub fn build<E: Element>(
        config: &ModelConfig,
        kind: LayerKind,
        prefix: &str,
        params: &mut ParamSet<E>,
        rng: &mut DetRng,
    ) -> Self {
        let d = config.d_model;
        let norm1 = AdaLnParams::build(d, config.d_cond, &format!("{prefix}.norm1"), params);
        let mixer = match kind {
            LayerKind::Ssm => Mixer::Ssm(SsmMixer::build(config, &format!("{prefix}.ssm"), params, rng)),
            LayerKind::Attn => {
                Mixer::Attn(AttnMixer::build(config, &format!("{prefix}.attn"), params, rng))
            }
        };
        let (norm2, mlp) = if config.use_mlp {
            (
                Some(AdaLnParams::build(d, config.d_cond, &format!("{prefix}.norm2"), params)),
                Some(Mlp::build(config, &format!("{prefix}.mlp"), params, rng)),
            )
        } else {
            (None, None)
        };
        Block {
            kind,
            norm1,
            mixer,
            norm2,
            mlp,
        }
    }

    /// y = Mixer(AdaLN(x; τ)) + x, then optionally MLP(AdaLN(y; τ)) + y.
    pub fn apply<E: Element, X: Exec<E>>(
        &self,
        ex: &mut X,
        ps: &ParamSet<E>,
        x: &X::H,
        tau: &X::H,
        config: &ModelConfig,
    ) -> Result<X::H> {
        let d = config.d_model;
        let modded = adaln(ex, ps, x, tau, &self.norm1, d)?;
        let mixed = match &self.mixer {
            Mixer::Ssm(m) => m.apply(ex, ps, &modded)?,
            Mixer::Attn(m) => m.apply(ex, ps, &modded)?,
        };
        let y = ex.add(&mixed, x)?;
        match (&self.norm2, &self.mlp) {
            (Some(norm2), Some(mlp)) => {
                let modded2 = adaln(ex, ps, &y, tau, norm2, d)?;
                let refined = mlp.apply(ex, ps, &modded2)?;
                ex.add(&refined, &y)
            }
            _ => Ok(y),
        }
    }

    pub fn mixer(&self) -> &Mixer {
        &self.mixer
    }

    pub fn mixer_mut(&mut self) -> &mut Mixer {
        &mut self.mixer
    }
}
