//! Absorbing-state masking process, noise schedule, the Monte-Carlo diffusion
//! loss, and the NELBO perplexity bound.
//!
//! Each token independently transitions to MASK with probability t and never
//! back. The training loss is a single-sample Monte-Carlo estimate of the
//! reweighted masked cross-entropy: per sequence, draw t ~ U[t_min, 1], mask,
//! and score (1/t) · Σ_masked CE / L. Prompt-flagged positions (which also
//! cover padding) are exempt from masking and from the loss sum.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Denoise, Denoiser};

use crate::rng::DetRng;
use crate::tensor::{kernels, Element, Exec, GradStore, Graph, Tensor};

/// Fixed-length token id vector with optional conditioning positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    prompt_mask: Option<Vec<bool>>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        TokenSequence {
            ids,
            prompt_mask: None,
        }
    }

    pub fn with_prompt(ids: Vec<usize>, prompt_mask: Vec<bool>) -> Result<Self> {
        if prompt_mask.len() != ids.len() {
            return Err(Error::dimension(
                "token_sequence",
                &[ids.len()],
                &[prompt_mask.len()],
            ));
        }
        Ok(TokenSequence {
            ids,
            prompt_mask: Some(prompt_mask),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn ids_mut(&mut self) -> &mut [usize] {
        &mut self.ids
    }

    pub fn prompt_mask(&self) -> Option<&[bool]> {
        self.prompt_mask.as_deref()
    }

    pub fn is_prompt(&self, i: usize) -> bool {
        self.prompt_mask.as_ref().is_some_and(|m| m[i])
    }

    pub fn count(&self, id: usize) -> usize {
        self.ids.iter().filter(|&&x| x == id).count()
    }
}

/// Monotone map from discrete step index to noise level t ∈ [0, 1].
///
/// Log-linear schedule under the absorbing-state parameterization: the
/// masking probability at level t is exactly t, so sampling grids are
/// uniform in t (t_k = k/S).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    t_min: f64,
    steps: usize,
}

impl NoiseSchedule {
    pub fn log_linear(t_min: f64, steps: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&t_min) || t_min <= 0.0 {
            return Err(Error::domain(
                "noise_schedule",
                format!("t_min {t_min} must lie in (0, 1)"),
            ));
        }
        if steps == 0 {
            return Err(Error::domain("noise_schedule", "step count must be positive"));
        }
        Ok(NoiseSchedule { t_min, steps })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    /// t_k = k/S; t_0 = 0 (clean), t_S = 1 (fully masked).
    pub fn step_time(&self, k: usize) -> Result<f64> {
        if k > self.steps {
            return Err(Error::Index {
                op: "step_time",
                index: k,
                limit: self.steps + 1,
            });
        }
        Ok(k as f64 / self.steps as f64)
    }

    /// Training draw: t ~ Uniform[t_min, 1].
    pub fn draw_t(&self, rng: &mut DetRng) -> f64 {
        self.t_min + (1.0 - self.t_min) * rng.next_f64()
    }
}

/// Replace each non-prompt token by MASK independently with probability t.
pub fn forward_mask(
    x0: &TokenSequence,
    t: f64,
    mask_id: usize,
    rng: &mut DetRng,
) -> Result<TokenSequence> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain("forward_mask", format!("t = {t} outside [0, 1]")));
    }
    if x0.ids.contains(&mask_id) {
        return Err(Error::domain("forward_mask", "clean input already contains MASK"));
    }
    let mut out = x0.clone();
    for (i, id) in out.ids.iter_mut().enumerate() {
        if x0.is_prompt(i) {
            continue;
        }
        if rng.next_f64() < t {
            *id = mask_id;
        }
    }
    Ok(out)
}

/// One Monte-Carlo term of the diffusion loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossEstimate {
    /// Mean per-token contribution: (1/t) · Σ_masked CE / L.
    pub value: f64,
    pub masked_count: usize,
    pub t_used: f64,
}

/// Loss of one sequence at a fixed noise level, masking with `rng`.
/// Value-only path shared by evaluation and by the stratified-estimator
/// tests; the training path in [`mdm_loss`] builds the same quantity on the
/// recording graph.
pub fn masked_sequence_loss<E: Element, D: Denoise<E> + ?Sized>(
    model: &D,
    x0: &TokenSequence,
    t: f64,
    rng: &mut DetRng,
) -> Result<LossEstimate> {
    let xt = forward_mask(x0, t, model.mask_id(), rng)?;
    let masked: Vec<usize> = (0..x0.len()).filter(|&i| xt.ids[i] == model.mask_id()).collect();
    if masked.is_empty() {
        return Ok(LossEstimate {
            value: 0.0,
            masked_count: 0,
            t_used: t,
        });
    }
    let logits = model.logits(xt.ids(), t)?;
    let targets: Vec<usize> = masked.iter().map(|&i| x0.ids[i]).collect();
    let mut picked = Tensor::<E>::zeros(vec![masked.len(), logits.cols()]);
    for (r, &i) in masked.iter().enumerate() {
        let v = logits.cols();
        picked.data_mut()[r * v..(r + 1) * v].copy_from_slice(&logits.data()[i * v..(i + 1) * v]);
    }
    let ce = kernels::cross_entropy(&picked, &targets)?;
    let total: f64 = ce.data().iter().map(|v| v.to_f64()).sum();
    Ok(LossEstimate {
        value: total / t / x0.len() as f64,
        masked_count: masked.len(),
        t_used: t,
    })
}

/// Batch diffusion loss with gradients.
///
/// Per sequence: draw t ~ U[t_min, 1] from a stream keyed by
/// (seed, step, sequence index), mask, score (1/t) · Σ_masked CE / L on the
/// recording graph, and backpropagate. Sequences run in parallel; gradient
/// stores merge in sequence order so results are bit-reproducible.
pub fn mdm_loss<E: Element>(
    model: &Denoiser<E>,
    batch: &[TokenSequence],
    sched: &NoiseSchedule,
    seed: u64,
    step: u64,
) -> Result<(f64, GradStore<E>, Vec<LossEstimate>)> {
    if batch.is_empty() {
        return Err(Error::domain("mdm_loss", "empty batch"));
    }
    let results: Vec<Result<(f64, GradStore<E>, LossEstimate)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, x0)| sequence_loss_grad(model, x0, sched, seed, step, i as u64))
        .collect();

    let mut store = GradStore::new(model.params().len());
    let mut total = 0.0;
    let mut estimates = Vec::with_capacity(batch.len());
    for r in results {
        let (value, g, est) = r?;
        total += value;
        store.merge(&g);
        estimates.push(est);
    }
    let scale = 1.0 / batch.len() as f64;
    store.scale(scale);
    Ok((total * scale, store, estimates))
}

fn sequence_loss_grad<E: Element>(
    model: &Denoiser<E>,
    x0: &TokenSequence,
    sched: &NoiseSchedule,
    seed: u64,
    step: u64,
    index: u64,
) -> Result<(f64, GradStore<E>, LossEstimate)> {
    let mut rng = DetRng::stream(seed, &[u64::from_le_bytes(*b"mdm_loss"), step, index]);
    let t = sched.draw_t(&mut rng);
    let mask_id = model.config().mask_id();
    let xt = forward_mask(x0, t, mask_id, &mut rng)?;
    let l = x0.len();

    let masked_count = xt.ids().iter().filter(|&&id| id == mask_id).count();
    if masked_count == 0 {
        return Ok((
            0.0,
            GradStore::new(model.params().len()),
            LossEstimate {
                value: 0.0,
                masked_count: 0,
                t_used: t,
            },
        ));
    }

    let mut g: Graph<E> = Graph::new();
    let logits = model.forward(&mut g, xt.ids(), t)?;
    let targets: Vec<usize> = x0.ids().to_vec();
    let ce = g.cross_entropy(&logits, &targets)?;
    let weight = 1.0 / (t * l as f64);
    let weights = Tensor::from_fn(vec![l], |i| {
        if xt.ids()[i] == mask_id {
            weight
        } else {
            0.0
        }
    });
    let wh = g.lit(weights);
    let weighted = g.mul(&ce, &wh)?;
    let loss = g.sum_all(&weighted)?;
    let value = g.value(&loss).item().to_f64();

    let mut store = GradStore::new(model.params().len());
    g.backward(loss, &mut store)?;
    Ok((
        value,
        store,
        LossEstimate {
            value,
            masked_count,
            t_used: t,
        },
    ))
}

/// exp(mean per-token Eq.-2 estimate) over a corpus: an upper-bound estimate
/// of true perplexity.
pub fn nelbo_ppl_bound<E: Element, D: Denoise<E> + Sync + ?Sized>(
    model: &D,
    corpus: &[TokenSequence],
    n_mc: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::domain("nelbo_ppl_bound", "empty corpus"));
    }
    if n_mc == 0 {
        return Err(Error::domain("nelbo_ppl_bound", "n_mc must be >= 1"));
    }
    let terms: Vec<Result<f64>> = corpus
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let mut acc = 0.0;
            for j in 0..n_mc {
                let mut rng = DetRng::stream(
                    seed,
                    &[u64::from_le_bytes(*b"nelboppl"), i as u64, j as u64],
                );
                let t = sched.draw_t(&mut rng);
                acc += masked_sequence_loss(model, x0, t, &mut rng)?.value;
            }
            Ok(acc / n_mc as f64)
        })
        .collect();
    let mut total = 0.0;
    for t in terms {
        total += t?;
    }
    Ok((total / corpus.len() as f64).exp())
}
