//! Flat key=value run configuration with documented defaults.
//!
//! The same keys drive the config file and the CLI flags: flags are just
//! overrides applied after the file, and the merged effective config is
//! printable for audit. Unknown keys are rejected by name.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::bench::BenchConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PatternKind};
use crate::sampler::SamplerConfig;
use crate::trainer::{OptimHyper, TrainConfig};

/// (key, default, help)
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("seed", "0", "seed threaded through every stochastic component"),
    ("out", "run_out", "output directory for training logs and checkpoints"),
    ("ckpt", "", "checkpoint path (sample/eval/inspect)"),
    ("data.paths", "", "comma-separated corpus files or directories"),
    ("data.split", "0.9", "train fraction of packed windows"),
    ("model.n_layers", "6", "number of diffusion blocks"),
    ("model.d_model", "128", "hidden width"),
    ("model.d_head", "32", "attention head width"),
    ("model.d_state", "16", "SSM state dimension"),
    ("model.mlp_ratio", "0", "MLP expansion (0 = 4 for attention_only, 2 otherwise)"),
    ("model.use_mlp", "true", "include the optional MLP sublayer"),
    ("model.vocab", "258", "output vocabulary size"),
    ("model.context_len", "256", "training context length"),
    ("model.pattern_kind", "ssm_only", "attention_only | ssm_only | hybrid"),
    ("model.k", "5", "hybrid: one attention layer after every k SSM layers"),
    ("model.d_cond", "0", "timestep embedding width (0 = d_model)"),
    ("train.steps", "2000", "total optimization steps"),
    ("train.batch", "16", "sequences per step"),
    ("train.lr", "1e-3", "base learning rate"),
    ("train.beta1", "0.9", "Adam beta1"),
    ("train.beta2", "0.95", "Adam beta2"),
    ("train.eps", "1e-8", "Adam epsilon"),
    ("train.weight_decay", "0.1", "decoupled weight decay"),
    ("train.clip_norm", "1.0", "global gradient-norm clip"),
    ("train.warmup", "100", "linear warmup steps before cosine decay"),
    ("train.t_min", "0.001", "lower bound of the training noise-level draw"),
    ("train.log_interval", "10", "steps between report rows"),
    ("train.eval_interval", "250", "steps between held-out NELBO evaluations (0 = off)"),
    ("train.ckpt_interval", "500", "steps between checkpoints (0 = off)"),
    ("train.eval_n_mc", "2", "Monte-Carlo draws per sequence during periodic eval"),
    ("sample.len", "256", "generation length"),
    ("sample.steps", "128", "decoding steps S"),
    ("sample.temperature", "1.0", "sampling temperature"),
    ("sample.prompt", "", "conditioning prefix text"),
    ("eval.n_mc", "16", "Monte-Carlo draws per sequence for eval"),
    ("bench.lengths", "512,1024,2048,4096,8192", "sequence lengths to sweep"),
    ("bench.steps", "128", "decoding steps per timed run"),
    ("bench.warmup", "5", "unrecorded warmup runs per cell"),
    ("bench.runs", "20", "timed runs per cell"),
    ("bench.batch", "1", "decodes per timed run"),
    ("bench.backbones", "attention_only,hybrid,ssm_only", "backbones to sweep"),
    ("bench.out_dir", "bench_out", "directory for CSV/SVG artifacts"),
    ("bench.n_layers", "6", "bench model depth (shared across backbones)"),
    ("bench.d_model", "32", "bench model width (shared across backbones)"),
    ("bench.d_head", "16", "bench attention head width"),
    ("bench.d_state", "16", "bench SSM state dimension"),
    ("bench.use_mlp", "false", "include MLP sublayers in bench models"),
    ("bench.mem_budget_gb", "6", "skip cells whose working set exceeds this"),
];

/// Merged run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: SCHEMA
                .iter()
                .map(|(k, d, _)| (k.to_string(), d.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    /// Set one key, rejecting anything outside the schema by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.values.contains_key(key) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Defaults overlaid with a key=value file ('#' starts a comment).
    pub fn load_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected key=value, got `{line}`",
                    path.display(),
                    lineno + 1
                )));
            };
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("key `{key}` missing from schema"))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("`{key}`: expected an integer, got `{}`", self.get(key))))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("`{key}`: expected an integer, got `{}`", self.get(key))))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("`{key}`: expected a number, got `{}`", self.get(key))))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            other => Err(Error::Config(format!("`{key}`: expected true/false, got `{other}`"))),
        }
    }

    pub fn get_list(&self, key: &str) -> Vec<String> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect()
    }

    /// Sorted key=value block for startup audit.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let pattern_kind = PatternKind::parse(self.get("model.pattern_kind"))?;
        let d_model = self.get_usize("model.d_model")?;
        let mut mlp_ratio = self.get_usize("model.mlp_ratio")?;
        if mlp_ratio == 0 {
            mlp_ratio = if pattern_kind == PatternKind::AttentionOnly { 4 } else { 2 };
        }
        let mut d_cond = self.get_usize("model.d_cond")?;
        if d_cond == 0 {
            d_cond = d_model;
        }
        let config = ModelConfig {
            n_layers: self.get_usize("model.n_layers")?,
            d_model,
            d_head: self.get_usize("model.d_head")?,
            d_state: self.get_usize("model.d_state")?,
            mlp_ratio,
            use_mlp: self.get_bool("model.use_mlp")?,
            vocab: self.get_usize("model.vocab")?,
            context_len: self.get_usize("model.context_len")?,
            pattern_kind,
            k: self.get_usize("model.k")?,
            d_cond,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            steps: self.get_u64("train.steps")?,
            batch: self.get_usize("train.batch")?,
            hyper: OptimHyper {
                lr: self.get_f64("train.lr")?,
                beta1: self.get_f64("train.beta1")?,
                beta2: self.get_f64("train.beta2")?,
                eps: self.get_f64("train.eps")?,
                weight_decay: self.get_f64("train.weight_decay")?,
                clip_norm: self.get_f64("train.clip_norm")?,
                warmup_steps: self.get_u64("train.warmup")?,
            },
            t_min: self.get_f64("train.t_min")?,
            log_interval: self.get_u64("train.log_interval")?,
            eval_interval: self.get_u64("train.eval_interval")?,
            ckpt_interval: self.get_u64("train.ckpt_interval")?,
            eval_n_mc: self.get_usize("train.eval_n_mc")?,
            seed: self.get_u64("seed")?,
            out_dir: Some(PathBuf::from(self.get("out"))),
        })
    }

    pub fn sampler_config(&self) -> Result<SamplerConfig> {
        let prompt_text = self.get("sample.prompt");
        let prompt = if prompt_text.is_empty() {
            None
        } else {
            Some(crate::data::encode(prompt_text.as_bytes()))
        };
        Ok(SamplerConfig {
            steps: self.get_usize("sample.steps")?,
            len: self.get_usize("sample.len")?,
            temperature: self.get_f64("sample.temperature")?,
            seed: self.get_u64("seed")?,
            prompt,
        })
    }

    pub fn bench_config(&self) -> Result<BenchConfig> {
        let lengths: Result<Vec<usize>> = self
            .get_list("bench.lengths")
            .iter()
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| Error::Config(format!("bench.lengths: bad length `{s}`")))
            })
            .collect();
        let backbones: Result<Vec<PatternKind>> = self
            .get_list("bench.backbones")
            .iter()
            .map(|s| PatternKind::parse(s))
            .collect();
        let config = BenchConfig {
            lengths: lengths?,
            steps: self.get_usize("bench.steps")?,
            warmup_runs: self.get_usize("bench.warmup")?,
            timed_runs: self.get_usize("bench.runs")?,
            batch: self.get_usize("bench.batch")?,
            backbones: backbones?,
            n_layers: self.get_usize("bench.n_layers")?,
            d_model: self.get_usize("bench.d_model")?,
            d_head: self.get_usize("bench.d_head")?,
            d_state: self.get_usize("bench.d_state")?,
            k: self.get_usize("model.k")?,
            use_mlp: self.get_bool("bench.use_mlp")?,
            vocab: self.get_usize("model.vocab")?,
            seed: self.get_u64("seed")?,
            mem_budget_bytes: self.get_usize("bench.mem_budget_gb")? << 30,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn data_paths(&self) -> Vec<PathBuf> {
        self.get_list("data.paths").iter().map(PathBuf::from).collect()
    }
}
