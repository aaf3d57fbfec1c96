//! The multi-token reverse process: iterative unmasking from all-MASK with
//! optional prompt conditioning.
//!
//! One reverse step from noise level t to s < t treats every position
//! independently: non-MASK tokens are copied; a MASK stays MASK with
//! probability s/t, otherwise (probability (t−s)/t) it unmasks with a token
//! drawn from the tempered softmax of that position's logits. Per-position
//! randomness is keyed by (seed, step, position), so outcomes are independent
//! of iteration order.

use rayon::prelude::*;

use crate::diffusion::{NoiseSchedule, TokenSequence};
use crate::error::{Error, Result};
use crate::model::Denoise;
use crate::rng::unit_at;
use crate::tensor::{Element, Tensor};

const REVERSE_TAG: u64 = u64::from_le_bytes(*b"revkstep");

/// Decoding run description.
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    /// Decoding steps S.
    pub steps: usize,
    /// Generation length L.
    pub len: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Conditioning prefix occupying positions 0..prompt.len().
    pub prompt: Option<Vec<usize>>,
}

impl SamplerConfig {
    pub fn new(steps: usize, len: usize, seed: u64) -> Self {
        SamplerConfig {
            steps,
            len,
            temperature: 1.0,
            seed,
            prompt: None,
        }
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler: steps must be >= 1".into()));
        }
        if self.len == 0 {
            return Err(Error::Config("sampler: len must positive".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "sampler: temperature {} must be > 0",
                self.temperature
            )));
        }
        if let Some(p) = &self.prompt {
            if p.len() > self.len {
                return Err(Error::Config(format!(
                    "sampler: prompt length {} exceeds generation length {}",
                    p.len(),
                    self.len
                )));
            }
            if let Some(&bad) = p.iter().find(|&&id| id >= vocab) {
                return Err(Error::Config(format!(
                    "sampler: prompt id {bad} outside vocabulary {vocab}"
                )));
            }
        }
        Ok(())
    }
}

/// Draw from softmax(logits / temperature) by a sequential CDF walk.
fn sample_categorical<E: Element>(row: &[E], temperature: f64, u: f64) -> usize {
    let inv_t = 1.0 / temperature;
    let mut mx = f64::NEG_INFINITY;
    for &v in row {
        mx = mx.max(v.to_f64() * inv_t);
    }
    let mut z = 0.0;
    for &v in row {
        z += (v.to_f64() * inv_t - mx).exp();
    }
    let mut acc = 0.0;
    for (i, &v) in row.iter().enumerate() {
        acc += (v.to_f64() * inv_t - mx).exp() / z;
        if u < acc {
            return i;
        }
    }
    row.len() - 1
}

/// One application of the reverse kernel q_{s|t} across all positions.
///
/// `step` keys the per-position randomness; pass the reverse-step index so
/// repeated invocations with one seed stay independent.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step<E: Element>(
    x_t: &TokenSequence,
    t: f64,
    s: f64,
    logits: &Tensor<E>,
    temperature: f64,
    mask_id: usize,
    seed: u64,
    step: u64,
) -> Result<TokenSequence> {
    if t <= 0.0 || t > 1.0 {
        return Err(Error::domain("reverse_step", format!("t = {t} outside (0, 1]")));
    }
    if s < 0.0 || s >= t {
        return Err(Error::domain(
            "reverse_step",
            format!("require 0 <= s < t, got s={s}, t={t}"),
        ));
    }
    if logits.rows() != x_t.len() {
        return Err(Error::dimension("reverse_step", logits.shape(), &[x_t.len()]));
    }
    let v = logits.cols();
    let stay = s / t;
    let mut out = x_t.clone();
    for i in 0..x_t.len() {
        if x_t.is_prompt(i) || x_t.ids()[i] != mask_id {
            continue;
        }
        let u_stay = unit_at(seed, &[REVERSE_TAG, step, i as u64, 0]);
        if u_stay < stay {
            continue;
        }
        let u_tok = unit_at(seed, &[REVERSE_TAG, step, i as u64, 1]);
        let row = &logits.data()[i * v..(i + 1) * v];
        out.ids_mut()[i] = sample_categorical(row, temperature, u_tok);
    }
    Ok(out)
}

/// Full reverse decode: all-MASK (plus prompt) down the schedule grid to a
/// clean sequence.
pub fn generate<E: Element, D: Denoise<E> + ?Sized>(
    model: &D,
    config: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<TokenSequence> {
    config.validate(model.vocab())?;
    if sched.steps() != config.steps {
        return Err(Error::Config(format!(
            "sampler: schedule has {} steps but config wants {}",
            sched.steps(),
            config.steps
        )));
    }
    if model.context_len() < config.len {
        return Err(Error::Config(format!(
            "sampler: model context {} < generation length {}",
            model.context_len(),
            config.len
        )));
    }
    let mask_id = model.mask_id();
    let mut ids = vec![mask_id; config.len];
    let mut prompt_mask = vec![false; config.len];
    if let Some(p) = &config.prompt {
        ids[..p.len()].copy_from_slice(p);
        prompt_mask[..p.len()].fill(true);
    }
    let mut x = TokenSequence::with_prompt(ids, prompt_mask)?;

    for k in (1..=config.steps).rev() {
        let t = sched.step_time(k)?;
        let s = sched.step_time(k - 1)?;
        let logits = model.logits(x.ids(), t)?;
        x = reverse_step(
            &x,
            t,
            s,
            &logits,
            config.temperature,
            mask_id,
            config.seed,
            k as u64,
        )?;
    }
    debug_assert_eq!(x.count(mask_id), 0);
    Ok(x)
}

/// Independent decodes over one immutable model. Seed isolation makes the
/// result identical to running [`generate`] sequentially per config.
pub fn generate_batch<E: Element, D: Denoise<E> + Sync + ?Sized>(
    model: &D,
    configs: &[SamplerConfig],
    sched: &NoiseSchedule,
) -> Result<Vec<TokenSequence>> {
    configs
        .par_iter()
        .map(|c| generate(model, c, sched))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    struct Frozen {
        vocab: usize,
        rows: Vec<f64>,
    }

    impl Denoise<f64> for Frozen {
        fn vocab(&self) -> usize {
            self.vocab
        }
        fn context_len(&self) -> usize {
            1 << 20
        }
        fn logits(&self, ids: &[usize], _t: f64) -> Result<Tensor<f64>> {
            let mut out = Tensor::zeros(vec![ids.len(), self.vocab]);
            for row in out.data_mut().chunks_mut(self.vocab) {
                row.copy_from_slice(&self.rows);
            }
            Ok(out)
        }
    }

    fn logits_for(len: usize, vocab: usize) -> Tensor<f64> {
        Tensor::zeros(vec![len, vocab])
    }

    #[test]
    fn terminal_step_unmasks_everything() {
        let x = TokenSequence::new(vec![4, 4, 4, 4]);
        let logits = logits_for(4, 4);
        let out = reverse_step(&x, 0.25, 0.0, &logits, 1.0, 4, 7, 1).unwrap();
        assert_eq!(out.count(4), 0);
    }

    #[test]
    fn unmasked_positions_are_copied() {
        let x = TokenSequence::new(vec![1, 4, 2, 4]);
        let logits = logits_for(4, 4);
        let out = reverse_step(&x, 0.8, 0.4, &logits, 1.0, 4, 9, 3).unwrap();
        assert_eq!(out.ids()[0], 1);
        assert_eq!(out.ids()[2], 2);
    }

    #[test]
    fn unmask_fraction_matches_t_minus_s_over_t() {
        let n = 100_000;
        let x = TokenSequence::new(vec![2; n]);
        let logits = logits_for(n, 2);
        let out = reverse_step(&x, 0.8, 0.4, &logits, 1.0, 2, 13, 5).unwrap();
        let frac = 1.0 - out.count(2) as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 0.005, "unmasked fraction {frac}");
    }

    #[test]
    fn rejects_degenerate_levels() {
        let x = TokenSequence::new(vec![2]);
        let logits = logits_for(1, 2);
        assert!(reverse_step(&x, 0.0, 0.0, &logits, 1.0, 2, 0, 0).is_err());
        assert!(reverse_step(&x, 0.5, 0.5, &logits, 1.0, 2, 0, 0).is_err());
        assert!(reverse_step(&x, 0.5, 0.7, &logits, 1.0, 2, 0, 0).is_err());
    }

    #[test]
    fn generate_output_has_no_mask_and_full_length() {
        let model = Frozen {
            vocab: 5,
            rows: vec![0.1, 0.2, 0.3, 0.4, 0.5],
        };
        let sched = NoiseSchedule::log_linear(1e-3, 8).unwrap();
        let cfg = SamplerConfig::new(8, 33, 21);
        let out = generate(&model, &cfg, &sched).unwrap();
        assert_eq!(out.len(), 33);
        assert_eq!(out.count(5), 0);
    }

    #[test]
    fn prompt_positions_survive_unchanged() {
        let model = Frozen {
            vocab: 6,
            rows: vec![0.0; 6],
        };
        let sched = NoiseSchedule::log_linear(1e-3, 4).unwrap();
        let mut cfg = SamplerConfig::new(4, 16, 3);
        cfg.prompt = Some(vec![5, 4, 3, 2, 1, 0, 5, 4]);
        let out = generate(&model, &cfg, &sched).unwrap();
        assert_eq!(&out.ids()[..8], &[5, 4, 3, 2, 1, 0, 5, 4]);
    }

    #[test]
    fn mask_count_is_monotone_nonincreasing() {
        let model = Frozen {
            vocab: 3,
            rows: vec![0.0; 3],
        };
        let sched = NoiseSchedule::log_linear(1e-3, 16).unwrap();
        let mask_id = 3;
        let mut x = TokenSequence::new(vec![mask_id; 200]);
        // drive the chain manually to observe intermediate mask counts
        let mut prev = x.count(mask_id);
        for k in (1..=16usize).rev() {
            let t = sched.step_time(k).unwrap();
            let s = sched.step_time(k - 1).unwrap();
            let logits = model.logits(x.ids(), t).unwrap();
            x = reverse_step(&x, t, s, &logits, 1.0, mask_id, 77, k as u64).unwrap();
            let now = x.count(mask_id);
            assert!(now <= prev, "mask count rose from {prev} to {now}");
            prev = now;
        }
        assert_eq!(prev, 0);
    }

    #[test]
    fn remaining_mask_fraction_tracks_grid() {
        // after the step from t_k to t_{k-1}, each position is masked with
        // probability exactly t_{k-1}
        let model = Frozen {
            vocab: 2,
            rows: vec![0.0; 2],
        };
        let s_steps = 8;
        let l = 10_000;
        let sched = NoiseSchedule::log_linear(1e-3, s_steps).unwrap();
        let mask_id = 2;
        let mut x = TokenSequence::new(vec![mask_id; l]);
        for k in (1..=s_steps).rev() {
            let t = sched.step_time(k).unwrap();
            let s = sched.step_time(k - 1).unwrap();
            let logits = model.logits(x.ids(), t).unwrap();
            x = reverse_step(&x, t, s, &logits, 1.0, mask_id, 31, k as u64).unwrap();
            let p = s;
            let frac = x.count(mask_id) as f64 / l as f64;
            let sigma = (p * (1.0 - p) / l as f64).sqrt();
            assert!(
                (frac - p).abs() <= 3.0 * sigma + 1e-9,
                "k={k}: fraction {frac} vs expected {p} (3σ={:.4})",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn batch_matches_sequential_runs() {
        let model = Frozen {
            vocab: 7,
            rows: vec![0.3, -0.2, 0.9, 0.0, 0.1, -0.5, 0.4],
        };
        let sched = NoiseSchedule::log_linear(1e-3, 6).unwrap();
        let configs: Vec<SamplerConfig> =
            (1..=4).map(|s| SamplerConfig::new(6, 24, s)).collect();
        let batch = generate_batch(&model, &configs, &sched).unwrap();
        for (c, got) in configs.iter().zip(&batch) {
            let solo = generate(&model, c, &sched).unwrap();
            assert_eq!(got.ids(), solo.ids());
        }
        // same config twice is bit-identical
        let again = generate(&model, &configs[0], &sched).unwrap();
        assert_eq!(again.ids(), batch[0].ids());
    }

    #[test]
    fn categorical_sampling_is_exact_for_two_tokens() {
        // p(token 1) = 2/3 for logits [0, ln 2]
        let row = [0.0f64, 2.0f64.ln()];
        let mut hits = 0;
        let n = 50_000;
        let mut rng = DetRng::new(5);
        for _ in 0..n {
            if sample_categorical(&row, 1.0, rng.next_f64()) == 1 {
                hits += 1;
            }
        }
        let frac = hits as f64 / n as f64;
        assert!((frac - 2.0 / 3.0).abs() <= 0.01, "{frac}");
    }
}
