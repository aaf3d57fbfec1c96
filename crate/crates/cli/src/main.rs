//! Command-line surface: train, sample, eval, bench, inspect.
//!
//! Every option is a config key; `--config file` merges a key=value file and
//! explicit flags win. The merged effective config is printed at startup so
//! runs are auditable. Exit codes: 0 success, 1 usage error, 2 data/config
//! error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use diffssm_core::bench::{run_sweep, write_artifacts, WallClock};
use diffssm_core::checkpoint::{load_checkpoint, read_info, save_checkpoint};
use diffssm_core::config::{RunConfig, SCHEMA};
use diffssm_core::data::{decode, encode, pack, read_corpus_bytes};
use diffssm_core::diffusion::{nelbo_ppl_bound, NoiseSchedule, TokenSequence};
use diffssm_core::model::Denoiser;
use diffssm_core::sampler::generate;
use diffssm_core::trainer::{checkpoint_path, fit, OptimState, TrainConfig};
use diffssm_core::Error;

const USAGE: &str = "\
diffssm — masked diffusion language models with SSM/attention/hybrid denoisers

usage: diffssm <command> [--config FILE] [--KEY VALUE ...]

commands:
  train     fit a model on a byte corpus (--data PATHS --out DIR)
  sample    decode text from a checkpoint (--ckpt FILE --len N --steps S)
  eval      NELBO perplexity bound of a corpus under a checkpoint
  bench     latency/throughput sweep across backbones and lengths
  inspect   print a checkpoint header

Any config key doubles as a flag (e.g. --model.d_model 64). Common aliases:
  --seed N            seed for every stochastic component
  --data PATHS        comma-separated corpus files or directories
  --out DIR           training output directory
  --ckpt FILE         checkpoint to load (train: resume from it)
  train: --steps --batch --lr --pattern --context
  sample: --len --steps --temperature --prompt
  eval: --n-mc
  bench: --lengths --steps --warmup --runs --backbones --out-dir

`diffssm help keys` lists every key with its default.
";

fn alias_map(cmd: &str) -> Vec<(&'static str, &'static str)> {
    let mut pairs = vec![
        ("--seed", "seed"),
        ("--out", "out"),
        ("--ckpt", "ckpt"),
        ("--data", "data.paths"),
    ];
    match cmd {
        "train" => pairs.extend([
            ("--steps", "train.steps"),
            ("--batch", "train.batch"),
            ("--lr", "train.lr"),
            ("--pattern", "model.pattern_kind"),
            ("--context", "model.context_len"),
        ]),
        "sample" => pairs.extend([
            ("--len", "sample.len"),
            ("--steps", "sample.steps"),
            ("--temperature", "sample.temperature"),
            ("--prompt", "sample.prompt"),
        ]),
        "eval" => pairs.extend([("--n-mc", "eval.n_mc")]),
        "bench" => pairs.extend([
            ("--lengths", "bench.lengths"),
            ("--steps", "bench.steps"),
            ("--warmup", "bench.warmup"),
            ("--runs", "bench.runs"),
            ("--backbones", "bench.backbones"),
            ("--out-dir", "bench.out_dir"),
        ]),
        _ => {}
    }
    pairs
}

enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(Error::Io(e))
    }
}

/// Parse flags into a merged RunConfig: defaults, then `--config` file, then
/// flag overrides.
fn build_config(cmd: &str, args: &[String]) -> Result<RunConfig, CliError> {
    let aliases = alias_map(cmd);
    let mut file: Option<PathBuf> = None;
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let flag = &args[i];
        if !flag.starts_with("--") {
            return Err(CliError::Usage(format!("unexpected argument `{flag}`")));
        }
        let value = args
            .get(i + 1)
            .ok_or_else(|| CliError::Usage(format!("flag `{flag}` needs a value")))?;
        if flag == "--config" {
            file = Some(PathBuf::from(value));
        } else if let Some((_, key)) = aliases.iter().find(|(a, _)| a == flag) {
            overrides.push((key.to_string(), value.clone()));
        } else {
            // dotted form addresses any schema key directly
            let key = flag.trim_start_matches("--");
            if SCHEMA.iter().any(|(k, _, _)| *k == key) {
                overrides.push((key.to_string(), value.clone()));
            } else {
                return Err(CliError::Usage(format!("unknown flag `{flag}`")));
            }
        }
        i += 2;
    }
    let mut config = match file {
        Some(path) => RunConfig::load_file(&path)?,
        None => RunConfig::default(),
    };
    for (key, value) in overrides {
        config.set(&key, &value)?;
    }
    Ok(config)
}

fn print_effective(config: &RunConfig) {
    println!("# effective config");
    print!("{}", config.render());
    println!("# end config");
}

fn load_packed(config: &RunConfig, context_len: usize, split: f64) -> Result<(Vec<TokenSequence>, Vec<TokenSequence>), CliError> {
    let paths = config.data_paths();
    if paths.is_empty() {
        return Err(CliError::Run(Error::Config(
            "no corpus given: set data.paths or pass --data".into(),
        )));
    }
    let bytes = read_corpus_bytes(&paths)?;
    let ids = encode(&bytes);
    let seed = config.get_u64("seed")?;
    let (train, valid) = pack(&ids, context_len, split, seed)?;
    Ok((train.sequences, valid.sequences))
}

fn cmd_train(config: &RunConfig) -> Result<(), CliError> {
    let seed = config.get_u64("seed")?;
    let train_config: TrainConfig = config.train_config()?;
    let ckpt = config.get("ckpt");

    let (mut model, mut optim) = if ckpt.is_empty() {
        let model_config = config.model_config()?;
        let model: Denoiser<f32> = Denoiser::new(model_config, seed)?;
        let optim = OptimState::for_model(&model, train_config.hyper.clone());
        (model, optim)
    } else {
        let (model, optim, _) = load_checkpoint(Path::new(ckpt))?;
        let optim = optim.ok_or_else(|| {
            Error::Checkpoint("checkpoint has no optimizer state; cannot resume".into())
        })?;
        println!("# resuming from {ckpt} at step {}", optim.step);
        (model, optim)
    };

    let context_len = model.config().context_len;
    let split = config.get_f64("data.split")?;
    let (train_set, valid_set) = load_packed(config, context_len, split)?;
    println!(
        "# model {} parameters, {} train / {} valid sequences of length {}",
        model.param_count(),
        train_set.len(),
        valid_set.len(),
        context_len
    );

    if let Some(dir) = &train_config.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    fit(&mut model, &train_set, &valid_set, &mut optim, &train_config, |r| {
        match r.ppl_bound {
            Some(p) => println!(
                "step {} loss {:.6} grad_norm {:.4} lr {:.3e} ppl_bound {:.4}",
                r.step, r.loss, r.grad_norm, r.lr, p
            ),
            None => println!(
                "step {} loss {:.6} grad_norm {:.4} lr {:.3e}",
                r.step, r.loss, r.grad_norm, r.lr
            ),
        }
    })?;

    if let Some(dir) = &train_config.out_dir {
        let final_path = checkpoint_path(dir, optim.step);
        save_checkpoint(&model, Some(&optim), seed, &final_path)?;
        println!("# saved {}", final_path.display());
    }
    Ok(())
}

fn cmd_sample(config: &RunConfig) -> Result<(), CliError> {
    let ckpt = config.get("ckpt");
    if ckpt.is_empty() {
        return Err(CliError::Run(Error::Config("sample needs --ckpt".into())));
    }
    let (model, _, _) = load_checkpoint(Path::new(ckpt))?;
    let sampler_config = config.sampler_config()?;
    let sched = NoiseSchedule::log_linear(config.get_f64("train.t_min")?, sampler_config.steps)?;
    let out = generate(&model, &sampler_config, &sched)?;
    let text = decode(out.ids(), true)?;
    println!("{}", String::from_utf8_lossy(&text));
    Ok(())
}

fn cmd_eval(config: &RunConfig) -> Result<(), CliError> {
    let ckpt = config.get("ckpt");
    if ckpt.is_empty() {
        return Err(CliError::Run(Error::Config("eval needs --ckpt".into())));
    }
    let (model, _, _) = load_checkpoint(Path::new(ckpt))?;
    // evaluate over every window of the given corpus
    let (mut seqs, rest) = load_packed(config, model.config().context_len, 1.0)?;
    seqs.extend(rest);
    let n_mc = config.get_usize("eval.n_mc")?;
    let sched = NoiseSchedule::log_linear(config.get_f64("train.t_min")?, 128)?;
    let bound = nelbo_ppl_bound(&model, &seqs, n_mc, &sched, config.get_u64("seed")?)?;
    println!("ppl_bound {bound:.4}");
    Ok(())
}

fn cmd_bench(config: &RunConfig) -> Result<(), CliError> {
    let bench_config = config.bench_config()?;
    let mut clock = WallClock::new();
    let report = run_sweep(&bench_config, &mut clock)?;
    for cell in &report.cells {
        println!(
            "{} L={} mean {:.4}s median {:.4}s std {:.4}s {:.1} tok/s",
            cell.backbone.name(),
            cell.len,
            cell.mean_s,
            cell.median_s,
            cell.std_s,
            cell.tokens_per_s
        );
    }
    for (backbone, len, reason) in &report.skipped {
        println!("skipped {} L={len}: {reason}", backbone.name());
    }
    for e in &report.exponents {
        println!(
            "exponent {} = {:.3} (residual {:.3}, {} points)",
            e.backbone.name(),
            e.exponent,
            e.residual,
            e.points
        );
    }
    let out_dir = PathBuf::from(config.get("bench.out_dir"));
    let (csv, svg) = write_artifacts(&report, &bench_config, &out_dir)?;
    println!("# wrote {}", csv.display());
    println!("# wrote {}", svg.display());
    Ok(())
}

fn cmd_inspect(config: &RunConfig) -> Result<(), CliError> {
    let ckpt = config.get("ckpt");
    if ckpt.is_empty() {
        return Err(CliError::Run(Error::Config("inspect needs --ckpt".into())));
    }
    let info = read_info(Path::new(ckpt))?;
    println!("version={}", info.version);
    println!("step={}", info.step);
    println!("seed={}", info.seed);
    println!("optim={}", u8::from(info.has_optim));
    let c = &info.config;
    println!("pattern_kind={}", c.pattern_kind.name());
    println!(
        "n_layers={} d_model={} d_head={} d_state={} mlp_ratio={} use_mlp={} vocab={} context_len={} k={} d_cond={}",
        c.n_layers, c.d_model, c.d_head, c.d_state, c.mlp_ratio, c.use_mlp, c.vocab, c.context_len, c.k, c.d_cond
    );
    println!("tensors={}", info.tensors.len());
    for (name, shape, offset, bytes) in &info.tensors {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        println!("tensor {name} [{}] offset={offset} bytes={bytes}", dims.join("x"));
    }
    Ok(())
}

fn print_keys() {
    println!("{:<22} {:<28} description", "key", "default");
    for (key, default, help) in SCHEMA {
        println!("{key:<22} {default:<28} {help}");
    }
}

/// Dispatch a full argv (without the program name).
fn dispatch(args: &[String]) -> Result<(), CliError> {
    let Some(cmd) = args.first() else {
        return Err(CliError::Usage("no command given".into()));
    };
    match cmd.as_str() {
        "help" | "--help" | "-h" => {
            if args.get(1).map(String::as_str) == Some("keys") {
                print_keys();
            } else {
                print!("{USAGE}");
            }
            Ok(())
        }
        "train" | "sample" | "eval" | "bench" | "inspect" => {
            let config = build_config(cmd, &args[1..])?;
            print_effective(&config);
            match cmd.as_str() {
                "train" => cmd_train(&config),
                "sample" => cmd_sample(&config),
                "eval" => cmd_eval(&config),
                "bench" => cmd_bench(&config),
                "inspect" => cmd_inspect(&config),
                _ => unreachable!(),
            }
        }
        other => Err(CliError::Usage(format!("unknown command `{other}`"))),
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match dispatch(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n");
            eprint!("{USAGE}");
            ExitCode::from(1)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
