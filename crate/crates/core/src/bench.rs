//! Wall-clock latency/throughput measurement of full diffusion decoding
//! across sequence lengths and backbones, scaling-exponent fitting, and
//! curve emission.
//!
//! Timing boundary: the end-to-end generate call including embedding and
//! sampling; model construction and warmup runs are excluded. Models are
//! randomly initialized — dense-compute timing does not depend on weights.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::model::{Denoise, Denoiser, ModelConfig, PatternKind};
use crate::sampler::{generate_batch, SamplerConfig};

/// Injectable time source so the harness arithmetic is testable.
pub trait Clock {
    /// Seconds from an arbitrary fixed origin; non-decreasing.
    fn now(&mut self) -> f64;
}

/// Real monotonic clock.
pub struct WallClock {
    origin: Instant,
}

impl WallClock {
    pub fn new() -> Self {
        WallClock {
            origin: Instant::now(),
        }
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now(&mut self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }
}

/// Sweep description. Dimensions are shared across backbones so the only
/// differences are the mixers themselves (and the halved MLP ratio that
/// keeps parameter budgets comparable).
#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    /// Decoding steps per run.
    pub steps: usize,
    pub warmup_runs: usize,
    pub timed_runs: usize,
    pub batch: usize,
    pub backbones: Vec<PatternKind>,
    pub n_layers: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_state: usize,
    pub k: usize,
    pub use_mlp: bool,
    pub vocab: usize,
    pub seed: u64,
    /// Cells whose estimated working set exceeds this are skipped, not run.
    pub mem_budget_bytes: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lengths: vec![512, 1024, 2048, 4096, 8192],
            steps: 128,
            warmup_runs: 5,
            timed_runs: 20,
            batch: 1,
            backbones: vec![
                PatternKind::AttentionOnly,
                PatternKind::Hybrid,
                PatternKind::SsmOnly,
            ],
            n_layers: 6,
            d_model: 32,
            d_head: 16,
            d_state: 16,
            k: 5,
            use_mlp: false,
            vocab: 258,
            seed: 0,
            mem_budget_bytes: 6 << 30,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() || self.lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("bench: lengths must be strictly increasing".into()));
        }
        if self.warmup_runs < 1 {
            return Err(Error::Config("bench: warmup_runs must be >= 1".into()));
        }
        if self.timed_runs < 2 {
            return Err(Error::Config("bench: timed_runs must be >= 2".into()));
        }
        if self.batch == 0 || self.backbones.is_empty() {
            return Err(Error::Config("bench: batch and backbones must be non-empty".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, backbone: PatternKind) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            d_head: self.d_head,
            d_state: self.d_state,
            mlp_ratio: if backbone == PatternKind::AttentionOnly { 4 } else { 2 },
            use_mlp: self.use_mlp,
            vocab: self.vocab,
            context_len: *self.lengths.last().expect("validated non-empty"),
            pattern_kind: backbone,
            k: self.k,
            d_cond: self.d_model,
        }
    }
}

/// Latency statistics for one (backbone, L) cell.
#[derive(Debug, Clone)]
pub struct CellStats {
    pub backbone: PatternKind,
    pub len: usize,
    pub runs: usize,
    pub mean_s: f64,
    pub median_s: f64,
    pub std_s: f64,
    pub tokens_per_s: f64,
}

/// Fitted log-log exponent for one backbone.
#[derive(Debug, Clone)]
pub struct ExponentFit {
    pub backbone: PatternKind,
    pub exponent: f64,
    pub residual: f64,
    pub points: usize,
}

/// Sweep output: per-cell statistics, per-backbone exponents, skipped cells.
#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub cells: Vec<CellStats>,
    pub exponents: Vec<ExponentFit>,
    pub skipped: Vec<(PatternKind, usize, String)>,
    pub threads: usize,
}

impl ScalingReport {
    pub fn cell(&self, backbone: PatternKind, len: usize) -> Option<&CellStats> {
        self.cells.iter().find(|c| c.backbone == backbone && c.len == len)
    }

    pub fn exponent(&self, backbone: PatternKind) -> Option<&ExponentFit> {
        self.exponents.iter().find(|e| e.backbone == backbone)
    }
}

/// Time `runs` full decodes of length `len` after `warmup` unrecorded ones.
/// Returns one end-to-end duration per recorded run.
#[allow(clippy::too_many_arguments)]
pub fn measure_decode<E: crate::tensor::Element, D: Denoise<E> + Sync + ?Sized>(
    model: &D,
    len: usize,
    steps: usize,
    warmup: usize,
    runs: usize,
    batch: usize,
    seed: u64,
    clock: &mut dyn Clock,
) -> Result<Vec<f64>> {
    if model.context_len() < len {
        return Err(Error::Config(format!(
            "bench: model context {} < requested length {len}",
            model.context_len()
        )));
    }
    let sched = NoiseSchedule::log_linear(1e-3, steps)?;
    let configs_for = |run: u64| -> Vec<SamplerConfig> {
        (0..batch)
            .map(|b| {
                let mut c = SamplerConfig::new(steps, len, crate::rng::mix(seed, &[run, b as u64]));
                c.temperature = 1.0;
                c
            })
            .collect()
    };
    for w in 0..warmup {
        generate_batch(model, &configs_for(w as u64), &sched)?;
    }
    let mut durations = Vec::with_capacity(runs);
    for r in 0..runs {
        let t0 = clock.now();
        generate_batch(model, &configs_for(1000 + r as u64), &sched)?;
        let t1 = clock.now();
        durations.push(t1 - t0);
    }
    Ok(durations)
}

fn stats(backbone: PatternKind, len: usize, batch: usize, durations: &[f64]) -> CellStats {
    let n = durations.len();
    let mean = durations.iter().sum::<f64>() / n as f64;
    let mut sorted = durations.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let var = durations.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    CellStats {
        backbone,
        len,
        runs: n,
        mean_s: mean,
        median_s: median,
        std_s: var.sqrt(),
        tokens_per_s: (batch * len) as f64 / mean,
    }
}

/// Least-squares slope of log(latency) against log(L). The residual is the
/// largest absolute log-space deviation from the fitted line.
pub fn fit_scaling_exponent(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 4 {
        return Err(Error::domain(
            "fit_scaling_exponent",
            format!("need >= 4 points, got {}", points.len()),
        ));
    }
    if points.iter().any(|&(l, t)| l <= 0.0 || t <= 0.0) {
        return Err(Error::domain("fit_scaling_exponent", "points must be positive"));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(l, t)| (l.ln(), t.ln())).collect();
    let n = logs.len() as f64;
    let sx: f64 = logs.iter().map(|p| p.0).sum();
    let sy: f64 = logs.iter().map(|p| p.1).sum();
    let sxx: f64 = logs.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = logs.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    let residual = logs
        .iter()
        .map(|&(x, y)| (y - (slope * x + intercept)).abs())
        .fold(0.0f64, f64::max);
    Ok((slope, residual))
}

/// The exponent fit window: the upper half of the length grid, widened to at
/// least four points.
pub fn fit_window(n_points: usize) -> usize {
    n_points.div_ceil(2).max(4).min(n_points)
}

/// Rough peak working set of one forward pass, used to skip cells that
/// cannot fit rather than aborting the sweep.
fn estimated_bytes(config: &ModelConfig, len: usize) -> usize {
    let d = config.d_model;
    let attn = 2 * len * len * 4 + 16 * len * d * 4;
    let ssm = 8 * len * d * config.d_state * 4;
    match config.pattern_kind {
        PatternKind::AttentionOnly => attn,
        PatternKind::SsmOnly => ssm,
        PatternKind::Hybrid => attn.max(ssm),
    }
}

/// Measure every (backbone, L) cell and fit per-backbone exponents.
pub fn run_sweep(config: &BenchConfig, clock: &mut dyn Clock) -> Result<ScalingReport> {
    config.validate()?;
    let mut cells = Vec::new();
    let mut skipped = Vec::new();

    let mut ordered = config.backbones.clone();
    ordered.sort_by_key(|b| b.name());
    ordered.dedup();

    for &backbone in &ordered {
        let mc = config.model_config(backbone);
        let model: Denoiser<f32> = Denoiser::new(mc.clone(), config.seed)?;
        for &len in &config.lengths {
            let estimate = estimated_bytes(&mc, len);
            if estimate > config.mem_budget_bytes {
                skipped.push((
                    backbone,
                    len,
                    format!("estimated {estimate} bytes over budget {}", config.mem_budget_bytes),
                ));
                continue;
            }
            let durations = measure_decode(
                &model,
                len,
                config.steps,
                config.warmup_runs,
                config.timed_runs,
                config.batch,
                config.seed,
                clock,
            )?;
            cells.push(stats(backbone, len, config.batch, &durations));
        }
    }
    cells.sort_by(|a, b| (a.backbone.name(), a.len).cmp(&(b.backbone.name(), b.len)));

    let mut exponents = Vec::new();
    for &backbone in &ordered {
        let pts: Vec<(f64, f64)> = cells
            .iter()
            .filter(|c| c.backbone == backbone)
            .map(|c| (c.len as f64, c.mean_s))
            .collect();
        if pts.len() >= 4 {
            let window = fit_window(pts.len());
            let tail = &pts[pts.len() - window..];
            let (exponent, residual) = fit_scaling_exponent(tail)?;
            exponents.push(ExponentFit {
                backbone,
                exponent,
                residual,
                points: tail.len(),
            });
        }
    }

    Ok(ScalingReport {
        cells,
        exponents,
        skipped,
        threads: rayon::current_num_threads(),
    })
}

// ── artifact emission ───────────────────────────────────────────────

/// CSV with `#` comment lines for the compute envelope, then a fixed header
/// and rows sorted by (backbone, L).
pub fn render_csv(report: &ScalingReport, config: &BenchConfig) -> String {
    let mut out = String::new();
    out.push_str(&format!("# diffssm bench v{}\n", env!("CARGO_PKG_VERSION")));
    out.push_str(&format!("# threads={}\n", report.threads));
    out.push_str(&format!(
        "# n_layers={} d_model={} d_head={} d_state={} k={} use_mlp={}\n",
        config.n_layers, config.d_model, config.d_head, config.d_state, config.k, config.use_mlp
    ));
    for (backbone, len, reason) in &report.skipped {
        out.push_str(&format!("# skipped backbone={} L={len}: {reason}\n", backbone.name()));
    }
    for e in &report.exponents {
        out.push_str(&format!(
            "# exponent backbone={} slope={:.4} residual={:.4} points={}\n",
            e.backbone.name(),
            e.exponent,
            e.residual,
            e.points
        ));
    }
    out.push_str("backbone,L,S,batch,runs,mean_s,median_s,std_s,tokens_per_s\n");
    for c in &report.cells {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.3}\n",
            c.backbone.name(),
            c.len,
            config.steps,
            config.batch,
            c.runs,
            c.mean_s,
            c.median_s,
            c.std_s,
            c.tokens_per_s
        ));
    }
    out
}

/// Fresh timestamped paths so re-running never appends to old artifacts.
pub fn write_artifacts(
    report: &ScalingReport,
    config: &BenchConfig,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(out_dir)?;
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut csv_path = out_dir.join(format!("sweep_{stamp}.csv"));
    let mut svg_path = out_dir.join(format!("sweep_{stamp}.svg"));
    let mut bump = 0;
    while csv_path.exists() || svg_path.exists() {
        bump += 1;
        csv_path = out_dir.join(format!("sweep_{stamp}_{bump}.csv"));
        svg_path = out_dir.join(format!("sweep_{stamp}_{bump}.svg"));
    }
    fs::write(&csv_path, render_csv(report, config))?;
    fs::write(&svg_path, render_svg(report))?;
    Ok((csv_path, svg_path))
}

struct Panel {
    title: &'static str,
    x0: f64,
    y0: f64,
}

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Two log-log panels (throughput vs L, latency vs L), one polyline per
/// backbone, legend labelled with backbone names.
pub fn render_svg(report: &ScalingReport) -> String {
    let width = 2.0 * (PANEL_W + MARGIN) + MARGIN;
    let height = PANEL_H + 2.0 * MARGIN + 40.0;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    let mut backbones: Vec<PatternKind> = Vec::new();
    for c in &report.cells {
        if !backbones.contains(&c.backbone) {
            backbones.push(c.backbone);
        }
    }

    let panels = [
        Panel {
            title: "throughput (tokens/s)",
            x0: MARGIN,
            y0: MARGIN,
        },
        Panel {
            title: "latency (s)",
            x0: 2.0 * MARGIN + PANEL_W,
            y0: MARGIN,
        },
    ];

    for (pi, panel) in panels.iter().enumerate() {
        let values: Vec<(usize, f64)> = report
            .cells
            .iter()
            .map(|c| (c.len, if pi == 0 { c.tokens_per_s } else { c.mean_s }))
            .collect();
        if values.is_empty() {
            continue;
        }
        let (mut lx0, mut lx1) = (f64::MAX, f64::MIN);
        let (mut ly0, mut ly1) = (f64::MAX, f64::MIN);
        for &(l, v) in &values {
            lx0 = lx0.min((l as f64).ln());
            lx1 = lx1.max((l as f64).ln());
            ly0 = ly0.min(v.ln());
            ly1 = ly1.max(v.ln());
        }
        if (lx1 - lx0).abs() < 1e-9 {
            lx1 = lx0 + 1.0;
        }
        if (ly1 - ly0).abs() < 1e-9 {
            ly1 = ly0 + 1.0;
        }
        let sx = |l: f64| panel.x0 + (l.ln() - lx0) / (lx1 - lx0) * PANEL_W;
        let sy = |v: f64| panel.y0 + PANEL_H - (v.ln() - ly0) / (ly1 - ly0) * PANEL_H;

        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{PANEL_W}\" height=\"{PANEL_H}\" fill=\"none\" stroke=\"#333\"/>\n",
            panel.x0, panel.y0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"14\" text-anchor=\"middle\">{} vs L (log-log)</text>\n",
            panel.x0 + PANEL_W / 2.0,
            panel.y0 - 10.0,
            panel.title
        ));

        // x ticks at each measured length
        let mut lens: Vec<usize> = values.iter().map(|v| v.0).collect();
        lens.sort_unstable();
        lens.dedup();
        for l in &lens {
            let x = sx(*l as f64);
            svg.push_str(&format!(
                "<line x1=\"{x:.1}\" y1=\"{}\" x2=\"{x:.1}\" y2=\"{}\" stroke=\"#ccc\"/>\n",
                panel.y0,
                panel.y0 + PANEL_H
            ));
            svg.push_str(&format!(
                "<text x=\"{x:.1}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{l}</text>\n",
                panel.y0 + PANEL_H + 14.0
            ));
        }

        for (bi, backbone) in backbones.iter().enumerate() {
            let pts: Vec<String> = report
                .cells
                .iter()
                .filter(|c| c.backbone == *backbone)
                .map(|c| {
                    let v = if pi == 0 { c.tokens_per_s } else { c.mean_s };
                    format!("{:.1},{:.1}", sx(c.len as f64), sy(v))
                })
                .collect();
            if pts.is_empty() {
                continue;
            }
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>\n",
                pts.join(" "),
                COLORS[bi % COLORS.len()]
            ));
        }
    }

    // legend
    for (bi, backbone) in backbones.iter().enumerate() {
        let y = MARGIN + PANEL_H + 40.0 + 16.0 * 0.0;
        let x = MARGIN + bi as f64 * 180.0;
        svg.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"{}\" stroke-width=\"3\"/>\n",
            x + 24.0,
            COLORS[bi % COLORS.len()]
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\">{}</text>\n",
            x + 30.0,
            y + 4.0,
            backbone.name()
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    struct ScriptedClock {
        t: f64,
        tick: f64,
    }

    impl Clock for ScriptedClock {
        fn now(&mut self) -> f64 {
            let v = self.t;
            self.t += self.tick;
            v
        }
    }

    struct InstantModel {
        vocab: usize,
    }

    impl Denoise<f32> for InstantModel {
        fn vocab(&self) -> usize {
            self.vocab
        }
        fn context_len(&self) -> usize {
            1 << 20
        }
        fn logits(&self, ids: &[usize], _t: f64) -> crate::error::Result<Tensor<f32>> {
            Ok(Tensor::zeros(vec![ids.len(), self.vocab]))
        }
    }

    #[test]
    fn fake_timer_throughput_arithmetic() {
        // now() advances 2.0s per call, so each timed run measures exactly 2.0s
        let model = InstantModel { vocab: 4 };
        let mut clock = ScriptedClock { t: 0.0, tick: 2.0 };
        let durations = measure_decode(&model, 1024, 2, 1, 20, 1, 0, &mut clock).unwrap();
        assert_eq!(durations.len(), 20);
        assert!(durations.iter().all(|&d| (d - 2.0).abs() < 1e-12));
        let cell = stats(PatternKind::SsmOnly, 1024, 1, &durations);
        assert!((cell.tokens_per_s - 512.0).abs() < 1e-9);
        assert_eq!(cell.runs, 20);
    }

    #[test]
    fn context_shorter_than_length_is_config_error() {
        struct Short;
        impl Denoise<f32> for Short {
            fn vocab(&self) -> usize {
                4
            }
            fn context_len(&self) -> usize {
                8
            }
            fn logits(&self, ids: &[usize], _t: f64) -> crate::error::Result<Tensor<f32>> {
                Ok(Tensor::zeros(vec![ids.len(), 4]))
            }
        }
        let mut clock = ScriptedClock { t: 0.0, tick: 1.0 };
        assert!(measure_decode(&Short, 16, 2, 1, 2, 1, 0, &mut clock).is_err());
    }

    #[test]
    fn exact_power_laws_recover_their_slopes() {
        let lengths = [256.0, 512.0, 1024.0, 2048.0, 4096.0];
        let linear: Vec<(f64, f64)> = lengths.iter().map(|&l| (l, 3e-4 * l)).collect();
        let (slope, resid) = fit_scaling_exponent(&linear).unwrap();
        assert!((slope - 1.0).abs() <= 1e-6, "{slope}");
        assert!(resid <= 1e-9);

        let quad: Vec<(f64, f64)> = lengths.iter().map(|&l| (l, 2e-7 * l * l)).collect();
        let (slope, _) = fit_scaling_exponent(&quad).unwrap();
        assert!((slope - 2.0).abs() <= 1e-6, "{slope}");
    }

    #[test]
    fn noisy_power_law_recovers_within_band() {
        let mut rng = crate::rng::DetRng::new(3);
        let points: Vec<(f64, f64)> = (0..6)
            .map(|i| {
                let l = 128.0 * 2f64.powi(i);
                let noise = 1.0 + 0.03 * (2.0 * rng.next_f64() - 1.0);
                (l, 1e-5 * l.powf(1.5) * noise)
            })
            .collect();
        let (slope, _) = fit_scaling_exponent(&points).unwrap();
        assert!((slope - 1.5).abs() <= 0.1, "{slope}");
    }

    #[test]
    fn fit_rejects_bad_inputs() {
        assert!(fit_scaling_exponent(&[(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)]).is_err());
        assert!(fit_scaling_exponent(&[(1.0, 1.0), (2.0, 2.0), (3.0, 3.0), (0.0, 4.0)]).is_err());
        assert!(fit_scaling_exponent(&[(1.0, 1.0), (2.0, -2.0), (3.0, 3.0), (4.0, 4.0)]).is_err());
    }

    #[test]
    fn fit_window_is_upper_half_with_a_four_point_floor() {
        assert_eq!(fit_window(5), 4);
        assert_eq!(fit_window(8), 4);
        assert_eq!(fit_window(10), 5);
        assert_eq!(fit_window(4), 4);
        assert_eq!(fit_window(3), 3);
    }

    #[test]
    fn rerunning_a_sweep_writes_fresh_files() {
        let report = ScalingReport {
            cells: vec![stats(PatternKind::SsmOnly, 64, 1, &[0.1, 0.2])],
            exponents: vec![],
            skipped: vec![],
            threads: 1,
        };
        let config = BenchConfig {
            lengths: vec![64],
            backbones: vec![PatternKind::SsmOnly],
            ..BenchConfig::default()
        };
        let dir = std::env::temp_dir().join(format!("diffssm_sweep_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let (csv1, _) = write_artifacts(&report, &config, &dir).unwrap();
        let first = std::fs::read(&csv1).unwrap();
        let (csv2, _) = write_artifacts(&report, &config, &dir).unwrap();
        assert_ne!(csv1, csv2, "second sweep must not reuse the first file");
        assert_eq!(std::fs::read(&csv1).unwrap(), first, "first artifact untouched");
    }

    #[test]
    fn csv_has_expected_cardinality_and_order() {
        let report = ScalingReport {
            cells: vec![
                stats(PatternKind::AttentionOnly, 256, 1, &[1.0, 1.2]),
                stats(PatternKind::AttentionOnly, 512, 1, &[2.0, 2.4]),
                stats(PatternKind::SsmOnly, 256, 1, &[0.5, 0.6]),
                stats(PatternKind::SsmOnly, 512, 1, &[0.9, 1.0]),
            ],
            exponents: vec![],
            skipped: vec![],
            threads: 2,
        };
        let config = BenchConfig {
            lengths: vec![256, 512],
            backbones: vec![PatternKind::AttentionOnly, PatternKind::SsmOnly],
            ..BenchConfig::default()
        };
        let csv = render_csv(&report, &config);
        let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows.len(), 5, "header + 4 data rows:\n{csv}");
        assert_eq!(rows[0], "backbone,L,S,batch,runs,mean_s,median_s,std_s,tokens_per_s");
        assert!(rows[1].starts_with("attention_only,256,"));
        assert!(rows[4].starts_with("ssm_only,512,"));
    }

    #[test]
    fn svg_contains_panels_and_legend() {
        let report = ScalingReport {
            cells: vec![
                stats(PatternKind::SsmOnly, 256, 1, &[0.5, 0.6]),
                stats(PatternKind::SsmOnly, 512, 1, &[0.9, 1.0]),
            ],
            exponents: vec![],
            skipped: vec![],
            threads: 2,
        };
        let svg = render_svg(&report);
        assert!(svg.contains("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains("ssm_only"));
        assert!(svg.contains("throughput"));
        assert!(svg.contains("latency"));
    }
}
