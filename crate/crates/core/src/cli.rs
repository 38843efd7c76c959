//! Command-line front end: `train`, `eval`, `bench-mem`, `bench-latency`,
//! `selftest`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::backbone::{build_model, ModelSpec};
use crate::bench::{
    bench_latency, bench_peak_memory, parse_sides, parse_variants, DEFAULT_BUDGET_BYTES, ITERS, MEMORY_BATCH,
    WARMUP,
};
use crate::config::{load_config, DataSource, RunConfig};
use crate::data::{cifar10_present, load_cifar10, synthetic_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::report::{emit_csv, sig6};
use crate::train::{evaluate, train, write_metrics, StopReason};
use crate::{selftest, weights};

/// Overrides `data.dir` when `--data-dir` is not given.
pub const DATA_DIR_ENV: &str = "EAANET_DATA_DIR";
pub const SYNTHETIC_DEFAULT: usize = 2000;

#[derive(Parser, Debug)]
#[command(name = "eaanet", version, about = "Efficient attention augmented ResNet18")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write per-epoch metrics plus final weights.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Output directory (default: `output.dir` from the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate saved weights on the configured test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// CSV path (default: `<output.dir>/eval.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Peak memory of one forward + backward pass per variant and side.
    BenchMem {
        /// Comma-separated variant names.
        #[arg(long)]
        variants: String,
        #[arg(long, default_value = "32,64,96,128")]
        sides: String,
        #[arg(long, default_value_t = (DEFAULT_BUDGET_BYTES >> 20) as u64)]
        budget_mb: u64,
        #[arg(long, default_value_t = MEMORY_BATCH)]
        batch: usize,
        /// Config whose model section supplies widths and attention settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forward-only milliseconds per image per variant.
    BenchLatency {
        #[arg(long)]
        variants: String,
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = WARMUP)]
        warmup: usize,
        #[arg(long, default_value_t = ITERS)]
        iters: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient checks, attention equivalence ladder and mask exactness.
    Selftest,
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    error: Error,
}

fn usage(error: Error) -> Failure {
    Failure { code: 1, error }
}

fn runtime(error: Error) -> Failure {
    Failure { code: 2, error }
}

fn base_spec(config: Option<&Path>) -> std::result::Result<ModelSpec, Failure> {
    match config {
        Some(p) => load_config(p).map(|c| c.model).map_err(usage),
        None => Ok(ModelSpec::flagship()),
    }
}

fn run_config(path: &Path, data_dir: Option<PathBuf>) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = load_config(path).map_err(usage)?;
    if let Some(d) = data_dir.or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from)) {
        cfg.data.dir = d;
    }
    if cfg.data.source == DataSource::Cifar10 && !cifar10_present(&cfg.data.dir) {
        return Err(usage(Error::InvalidValue {
            key: "data.dir".into(),
            msg: format!("{} does not hold the CIFAR-10 binary batches", cfg.data.dir.display()),
        }));
    }
    Ok(cfg)
}

/// Train and test splits as the config describes.
pub fn datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    let use_cifar = match d.source {
        DataSource::Cifar10 => true,
        DataSource::Synthetic => false,
        DataSource::Auto => {
            let found = cifar10_present(&d.dir);
            if !found {
                log::warn!("no CIFAR-10 batches under {}; using the synthetic fixture", d.dir.display());
            }
            found
        }
    };
    let seed = cfg.train.seed;
    let split = |pool: Dataset, holdout: usize| {
        let cut = pool.len().saturating_sub(holdout);
        (pool.slice(0..cut, Split::Train), pool.slice(cut..pool.len(), Split::Test))
    };
    if use_cifar {
        let (train, test) = load_cifar10(&d.dir)?;
        if d.subset == 0 {
            return Ok((train, test));
        }
        Ok(split(train.subset(d.subset, seed), d.holdout))
    } else {
        let n = if d.subset == 0 { SYNTHETIC_DEFAULT } else { d.subset };
        Ok(split(synthetic_dataset(n, cfg.model.classes, seed), d.holdout))
    }
}

fn create_dir(dir: &Path) -> std::result::Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| runtime(e.into()))
}

fn cmd_train(config: &Path, data_dir: Option<PathBuf>, out: Option<PathBuf>) -> std::result::Result<(), Failure> {
    let mut cfg = run_config(config, data_dir)?;
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    create_dir(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.txt"), cfg.to_text()).map_err(|e| runtime(e.into()))?;
    let (train_ds, test_ds) = datasets(&cfg).map_err(runtime)?;
    log::info!(
        "training {} epochs on {} {} images, testing on {}",
        cfg.train.epochs,
        train_ds.len(),
        train_ds.split,
        test_ds.len()
    );
    let mut model = build_model::<f32>(&cfg.model, cfg.train.seed).map_err(usage)?;
    let run = train(&mut model, &train_ds, &test_ds, &cfg.train).map_err(runtime)?;
    let metrics = cfg.output_dir.join("metrics.csv");
    write_metrics(&metrics, &run.records).map_err(runtime)?;
    weights::save(&model, &cfg.output_dir.join("weights.bin")).map_err(runtime)?;
    log::info!("wrote {}", metrics.display());
    match run.stop {
        StopReason::Diverged(msg) => Err(runtime(Error::Diverged(msg))),
        _ => Ok(()),
    }
}

fn cmd_eval(
    config: &Path,
    weights_path: &Path,
    data_dir: Option<PathBuf>,
    out: Option<PathBuf>,
) -> std::result::Result<(), Failure> {
    let cfg = run_config(config, data_dir)?;
    let model = weights::load::<f32>(weights_path).map_err(runtime)?;
    let (_, test_ds) = datasets(&cfg).map_err(runtime)?;
    let (top1, top5) = evaluate(&model, &test_ds, cfg.train.batch_size).map_err(runtime)?;
    log::info!("top1 {top1:.2} top5 {top5:.2} on {} images", test_ds.len());
    let path = out.unwrap_or_else(|| cfg.output_dir.join("eval.csv"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let write = || -> Result<()> {
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["images", "top1", "top5"])?;
        w.write_record([test_ds.len().to_string(), sig6(top1), sig6(top5)])?;
        w.flush()?;
        Ok(())
    };
    write().map_err(runtime)
}

fn cmd_selftest() -> std::result::Result<(), Failure> {
    let start = std::time::Instant::now();
    let checks = selftest::run_all().map_err(runtime)?;
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    log::info!("{} checks in {:.1}s", checks.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(runtime(Error::Contract(format!("{failed} self-test checks failed"))));
    }
    Ok(())
}

fn dispatch(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::Train { config, data_dir, out } => cmd_train(&config, data_dir, out),
        Command::Eval {
            config,
            weights,
            data_dir,
            out,
        } => cmd_eval(&config, &weights, data_dir, out),
        Command::BenchMem {
            variants,
            sides,
            budget_mb,
            batch,
            config,
            seed,
            out,
        } => {
            let variants = parse_variants(&variants).map_err(usage)?;
            let sides = parse_sides(&sides).map_err(usage)?;
            let base = base_spec(config.as_deref())?;
            let budget = usize::try_from(budget_mb.saturating_mul(1 << 20)).unwrap_or(usize::MAX);
            let report = bench_peak_memory(&base, &variants, &sides, batch, budget, seed).map_err(|e| match e {
                Error::Config(_) => usage(e),
                e => runtime(e),
            })?;
            emit_csv(&report, &out).map_err(runtime)
        }
        Command::BenchLatency {
            variants,
            side,
            batch,
            warmup,
            iters,
            config,
            seed,
            out,
        } => {
            let variants = parse_variants(&variants).map_err(usage)?;
            let base = base_spec(config.as_deref())?;
            let report = bench_latency(&base, &variants, side, batch, warmup, iters, seed).map_err(|e| match e {
                Error::Config(_) => usage(e),
                e => runtime(e),
            })?;
            emit_csv(&report, &out).map_err(runtime)
        }
        Command::Selftest => cmd_selftest(),
    }
}

/// Parse `args` (program name first), run, and return the process exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            log::error!("{}", f.error);
            ExitCode::from(f.code)
        }
    }
}
