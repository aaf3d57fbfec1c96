//! The denoiser stack: token + timestep embeddings through N AdaLN-conditioned
//! blocks with pluggable mixers, producing vocabulary logits.
//!
//! Token id convention: data ids live in [0, vocab); the MASK id is `vocab`
//! itself, one past the data vocabulary. The embedding table has vocab + 1
//! rows so MASK gets its own embedding, while the output projection covers
//! only the vocab data classes.

mod attention;
mod block;
mod ssm;

pub use attention::AttnMixer;
pub use block::{adaln, AdaLnParams, Block, Mixer, Mlp};
pub use ssm::{SsmDir, SsmMixer};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::rng::DetRng;
use crate::tensor::{Eager, Element, Exec, Graph, Tensor};

/// Epsilon used by every layer normalization in the stack.
pub const LN_EPS: f64 = 1e-5;
/// Rotary position base for attention layers.
pub const ROPE_BASE: f64 = 10000.0;
/// Width of the sinusoidal timestep feature vector.
pub const TIME_FEATURES: usize = 128;
/// Timestep scale applied before the sinusoidal lift (t spans [0,1]).
const TIME_SCALE: f64 = 1000.0;

/// Which mixer a layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Ssm,
    Attn,
}

/// Backbone family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternKind {
    AttentionOnly,
    SsmOnly,
    Hybrid,
}

impl PatternKind {
    pub fn name(&self) -> &'static str {
        match self {
            PatternKind::AttentionOnly => "attention_only",
            PatternKind::SsmOnly => "ssm_only",
            PatternKind::Hybrid => "hybrid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "attention_only" => Ok(PatternKind::AttentionOnly),
            "ssm_only" => Ok(PatternKind::SsmOnly),
            "hybrid" => Ok(PatternKind::Hybrid),
            other => Err(Error::Config(format!("unknown pattern_kind `{other}`"))),
        }
    }
}

/// Per-layer mixer kinds for a whole stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPattern {
    kinds: Vec<LayerKind>,
}

impl LayerPattern {
    pub fn from_kinds(kinds: Vec<LayerKind>) -> Self {
        LayerPattern { kinds }
    }

    pub fn kinds(&self) -> &[LayerKind] {
        &self.kinds
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn attention_indices(&self) -> Vec<usize> {
        self.kinds
            .iter()
            .enumerate()
            .filter_map(|(i, k)| (*k == LayerKind::Attn).then_some(i))
            .collect()
    }
}

/// Stack dimensions and layer pattern selection.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_state: usize,
    pub mlp_ratio: usize,
    pub use_mlp: bool,
    pub vocab: usize,
    pub context_len: usize,
    pub pattern_kind: PatternKind,
    /// Attention period for hybrid stacks: one attention layer after every
    /// `k` SSM layers.
    pub k: usize,
    pub d_cond: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: trains in minutes while exercising every path.
    pub fn desk_default(pattern_kind: PatternKind) -> Self {
        ModelConfig {
            n_layers: 6,
            d_model: 128,
            d_head: 32,
            d_state: 16,
            mlp_ratio: if pattern_kind == PatternKind::AttentionOnly { 4 } else { 2 },
            use_mlp: true,
            vocab: 258,
            context_len: 256,
            pattern_kind,
            k: 5,
            d_cond: 128,
        }
    }

    pub fn mask_id(&self) -> usize {
        self.vocab
    }

    pub fn validate(&self) -> Result<()> {
        let has_attention = matches!(self.pattern_kind, PatternKind::AttentionOnly | PatternKind::Hybrid);
        self.validate_dims(has_attention)?;
        if self.pattern_kind == PatternKind::Hybrid {
            if self.k < 2 {
                return Err(Error::Config(format!("hybrid requires k >= 2, got {}", self.k)));
            }
            if self.n_layers < self.k + 1 {
                return Err(Error::Config(format!(
                    "hybrid with n_layers {} < k+1 = {} has no attention layers",
                    self.n_layers,
                    self.k + 1
                )));
            }
        }
        Ok(())
    }

    /// Dimension checks alone; explicit layer patterns bypass the hybrid
    /// placement rule.
    fn validate_dims(&self, has_attention: bool) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.vocab == 0 || self.context_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.mlp_ratio != 2 && self.mlp_ratio != 4 {
            return Err(Error::Config(format!(
                "mlp_ratio must be 2 or 4, got {}",
                self.mlp_ratio
            )));
        }
        if has_attention {
            if self.d_head == 0 || self.d_model % self.d_head != 0 {
                return Err(Error::Config(format!(
                    "d_model {} must be divisible by d_head {}",
                    self.d_model, self.d_head
                )));
            }
            if self.d_head % 2 != 0 {
                return Err(Error::Config(format!(
                    "d_head {} must be even for rotary pairs",
                    self.d_head
                )));
            }
        }
        if self.d_state == 0 && self.pattern_kind != PatternKind::AttentionOnly {
            return Err(Error::Config("d_state must be positive for SSM layers".into()));
        }
        if self.d_cond == 0 {
            return Err(Error::Config("d_cond must be positive".into()));
        }
        Ok(())
    }
}

/// Expand a config into the per-layer mixer kinds. Hybrid places one
/// attention layer after every `k` SSM layers: ATTN exactly at 0-based
/// indices i with (i+1) mod (k+1) = 0.
pub fn build_layer_pattern(config: &ModelConfig) -> Result<LayerPattern> {
    config.validate()?;
    let kinds = match config.pattern_kind {
        PatternKind::AttentionOnly => vec![LayerKind::Attn; config.n_layers],
        PatternKind::SsmOnly => vec![LayerKind::Ssm; config.n_layers],
        PatternKind::Hybrid => (0..config.n_layers)
            .map(|i| {
                if (i + 1) % (config.k + 1) == 0 {
                    LayerKind::Attn
                } else {
                    LayerKind::Ssm
                }
            })
            .collect(),
    };
    Ok(LayerPattern::from_kinds(kinds))
}

/// Anything that maps a (possibly masked) token sequence and a noise level to
/// vocabulary logits. Implemented by [`Denoiser`] and by frozen test models.
pub trait Denoise<E: Element> {
    /// Number of data classes; MASK id equals this value.
    fn vocab(&self) -> usize;
    fn context_len(&self) -> usize;
    /// [L, vocab] logits for the given ids at noise level t.
    fn logits(&self, ids: &[usize], t: f64) -> Result<Tensor<E>>;

    fn mask_id(&self) -> usize {
        self.vocab()
    }
}

// ── timestep embedding ──────────────────────────────────────────────

#[derive(Debug, Clone)]
struct TimeEmbed {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Sinusoidal features of t: interleaved sin/cos over a geometric frequency
/// ladder. Deterministic and finite for all t in [0, 1].
pub fn timestep_features(t: f64) -> Vec<f64> {
    let half = TIME_FEATURES / 2;
    let mut out = Vec::with_capacity(TIME_FEATURES);
    for j in 0..half {
        let freq = (-(10000.0f64.ln()) * j as f64 / half as f64).exp();
        let angle = t * TIME_SCALE * freq;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    out
}

// ── the denoiser ────────────────────────────────────────────────────

/// Parameterized stack of diffusion blocks with a layer pattern.
#[derive(Debug, Clone)]
pub struct Denoiser<E: Element> {
    config: ModelConfig,
    pattern: LayerPattern,
    params: ParamSet<E>,
    embed: ParamId,
    time: TimeEmbed,
    blocks: Vec<Block>,
    head_w: ParamId,
    head_b: ParamId,
}

impl<E: Element> Denoiser<E> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let pattern = build_layer_pattern(&config)?;
        Self::with_pattern(config, pattern, seed)
    }

    /// Build with an explicit pattern (tests compose custom stacks).
    pub fn with_pattern(config: ModelConfig, pattern: LayerPattern, seed: u64) -> Result<Self> {
        config.validate_dims(pattern.kinds().contains(&LayerKind::Attn))?;
        if pattern.len() != config.n_layers {
            return Err(Error::Config(format!(
                "pattern length {} != n_layers {}",
                pattern.len(),
                config.n_layers
            )));
        }
        let mut params = ParamSet::new();
        let mut rng = DetRng::stream(seed, &[u64::from_le_bytes(*b"modelini")]);
        let d = config.d_model;
        let dc = config.d_cond;

        fn normal<E: Element>(
            params: &mut ParamSet<E>,
            rng: &mut DetRng,
            name: &str,
            shape: Vec<usize>,
        ) -> ParamId {
            let t = Tensor::from_fn(shape, |_| rng.trunc_normal(0.02));
            params.register(name, t)
        }

        // MASK gets its own embedding row, one past the data vocabulary.
        let embed = normal(&mut params, &mut rng, "embed.table", vec![config.vocab + 1, d]);
        let time = TimeEmbed {
            w1: normal(&mut params, &mut rng, "time.w1", vec![TIME_FEATURES, dc]),
            b1: params.register("time.b1", Tensor::zeros(vec![dc])),
            w2: normal(&mut params, &mut rng, "time.w2", vec![dc, dc]),
            b2: params.register("time.b2", Tensor::zeros(vec![dc])),
        };

        let mut blocks = Vec::with_capacity(config.n_layers);
        for (i, kind) in pattern.kinds().iter().enumerate() {
            blocks.push(Block::build(
                &config,
                *kind,
                &format!("layers.{i}"),
                &mut params,
                &mut rng,
            ));
        }

        let head_w = normal(&mut params, &mut rng, "head.w", vec![d, config.vocab]);
        let head_b = params.register("head.b", Tensor::zeros(vec![config.vocab]));

        Ok(Denoiser {
            config,
            pattern,
            params,
            embed,
            time,
            blocks,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn pattern(&self) -> &LayerPattern {
        &self.pattern
    }

    pub fn params(&self) -> &ParamSet<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<E> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.total_elements()
    }

    /// τ_t as a plain tensor (introspection and tests).
    pub fn timestep_embedding(&self, t: f64) -> Result<Tensor<E>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::domain("embed_timestep", format!("t = {t} outside [0, 1]")));
        }
        let mut ex = Eager::new();
        let h = self.embed_timestep(&mut ex, &self.params, t)?;
        Ok(std::rc::Rc::try_unwrap(h).unwrap_or_else(|rc| (*rc).clone()))
    }

    /// τ_t: sinusoidal features through the two-layer projection.
    fn embed_timestep<X: Exec<E>>(&self, ex: &mut X, ps: &ParamSet<E>, t: f64) -> Result<X::H> {
        let feats = timestep_features(t);
        let f = ex.lit(Tensor::from_f64s(vec![1, TIME_FEATURES], &feats)?);
        let w1 = ex.param(ps, self.time.w1);
        let b1 = ex.param(ps, self.time.b1);
        let h = ex.affine(&f, &w1, &b1)?;
        let h = ex.silu(&h)?;
        let w2 = ex.param(ps, self.time.w2);
        let b2 = ex.param(ps, self.time.b2);
        ex.affine(&h, &w2, &b2)
    }

    /// Full stack: embedding, N conditioned blocks, final norm, vocab head.
    /// Works for any sequence length; `context_len` is a training contract
    /// enforced by callers, not a kernel limit.
    pub fn forward<X: Exec<E>>(&self, ex: &mut X, ids: &[usize], t: f64) -> Result<X::H> {
        self.forward_with(ex, &self.params, ids, t)
    }

    /// Forward over an external parameter set with this model's layout
    /// (gradient checks perturb a clone of the parameters).
    pub fn forward_with<X: Exec<E>>(
        &self,
        ex: &mut X,
        ps: &ParamSet<E>,
        ids: &[usize],
        t: f64,
    ) -> Result<X::H> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::domain("forward_logits", format!("t = {t} outside [0, 1]")));
        }
        if ids.is_empty() {
            return Err(Error::domain("forward_logits", "empty token sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id > self.config.vocab) {
            return Err(Error::Index {
                op: "forward_logits",
                index: bad,
                limit: self.config.vocab + 1,
            });
        }
        let tau = self.embed_timestep(ex, ps, t)?;
        let table = ex.param(ps, self.embed);
        let mut x = ex.embed(&table, ids)?;
        for block in &self.blocks {
            x = block.apply(ex, ps, &x, &tau, &self.config)?;
        }
        let normed = ex.layer_norm(&x, LN_EPS)?;
        let w = ex.param(ps, self.head_w);
        let b = ex.param(ps, self.head_b);
        ex.affine(&normed, &w, &b)
    }

    /// Recording forward for training; returns the logits node.
    pub fn forward_graph(&self, graph: &mut Graph<E>, ids: &[usize], t: f64) -> Result<usize> {
        self.forward(graph, ids, t)
    }
}

impl<E: Element> Denoise<E> for Denoiser<E> {
    fn vocab(&self) -> usize {
        self.config.vocab
    }

    fn context_len(&self) -> usize {
        self.config.context_len
    }

    fn logits(&self, ids: &[usize], t: f64) -> Result<Tensor<E>> {
        let mut ex = Eager::new();
        let h = self.forward(&mut ex, ids, t)?;
        Ok(std::rc::Rc::try_unwrap(h).unwrap_or_else(|rc| (*rc).clone()))
    }
}
