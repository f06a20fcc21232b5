use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use vepe::config::{RunConfig, Split};
use vepe::harness::{self, HarnessError, TrainRequest};
use vepe::train::{EvalMode, Mode};

/// Video pose estimation on synthetic clips.
#[derive(Parser)]
#[command(name = "vepe", version)]
struct Cli {
    /// TOML run configuration; built-in defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from the reduced desk-scale preset instead of the defaults.
    #[arg(long, global = true)]
    bench: bool,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides any config field, e.g. `--set optim.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Clean,
    Blur,
    Occlusion,
    Fast,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Clean => Split::Clean,
            SplitArg::Blur => Split::Blur,
            SplitArg::Occlusion => Split::Occlusion,
            SplitArg::Fast => Split::Fast,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainMode {
    Spatial,
    Temporal,
    Joint,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalArg {
    Spatial,
    Temporal,
}

#[derive(Subcommand)]
enum Command {
    /// Writes synthetic clips and a manifest.
    Generate {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Splits cycled over the clips.
        #[arg(long = "split", value_enum, default_values_t = [SplitArg::Clean])]
        splits: Vec<SplitArg>,
    },
    /// Trains and writes a checkpoint plus a log next to it.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: TrainMode,
        /// Starting checkpoint; required in temporal mode.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Clips evaluated after every epoch; defaults to the training clips.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluates a checkpoint and prints the report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: EvalArg,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Temporal evaluation across pose-query selection thresholds.
    SweepThreshold {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5")]
        thresholds: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes overlays, a pose file and diagnostics for one clip.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every op and composed block.
    Gradcheck {
        /// Appends a deliberately broken op, which must fail.
        #[arg(long)]
        with_fixture: bool,
    },
    /// Median forward time per person count, as CSV.
    Probe {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "2,12")]
        counts: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prints the effective configuration.
    Config,
}

enum Failure {
    /// Checks ran and failed.
    Test(String),
    Usage(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Usage(_) | HarnessError::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Test(other.to_string()),
        }
    }
}

fn config(cli: &Cli) -> Result<RunConfig, Failure> {
    let usage = |e: vepe::config::ConfigError| Failure::Usage(e.to_string());
    let mut cfg = match (&cli.config, cli.bench) {
        (Some(p), _) => RunConfig::load(p).map_err(usage)?,
        (None, true) => RunConfig::bench(),
        (None, false) => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    for o in &cli.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Failure::Usage(format!("override `{o}` is not KEY=VALUE")))?;
        cfg = cfg.with_override(k.trim(), v.trim()).map_err(usage)?;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn write_out(path: Option<&PathBuf>, text: &str) -> Result<(), Failure> {
    if let Some(p) = path {
        std::fs::write(p, text).map_err(|e| Failure::Test(format!("writing {}: {e}", p.display())))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    RunConfig::self_check().map_err(|e| Failure::Test(format!("startup self-check: {e}")))?;
    let deterministic = harness::deterministic_mode();
    let mut cfg = config(&cli)?;
    match cli.command {
        Command::Generate { count, out, splits } => {
            let splits: Vec<Split> = splits.into_iter().map(Split::from).collect();
            let m = harness::cmd_generate(&cfg, count, &out, &splits)?;
            let text = std::fs::read(out.join(harness::MANIFEST_FILE)).map_err(|e| Failure::Test(e.to_string()))?;
            println!("wrote {} clips to {} manifest={}", m.entries.len(), out.display(), harness::sha256_hex(&text));
        }
        Command::Train { data, out, mode, init, val, epochs } => {
            if let Some(e) = epochs {
                cfg.optim.epochs = e;
            }
            let mode = match mode {
                TrainMode::Spatial => Mode::Spatial,
                TrainMode::Temporal => Mode::Temporal,
                TrainMode::Joint => Mode::Joint,
            };
            let req = TrainRequest { data_dir: &data, out_ckpt: &out, mode, init: init.as_deref(), val_dir: val.as_deref() };
            let start = Instant::now();
            let summary = harness::cmd_train(&cfg, &req, |r| {
                if deterministic {
                    println!("{}", r.log_line());
                } else {
                    println!("{} secs={:.1}", r.log_line(), start.elapsed().as_secs_f64());
                }
            })?;
            println!("checkpoint {} log {}", out.display(), summary.log_path.display());
        }
        Command::Eval { ckpt, data, mode, out } => {
            let mode = match mode {
                EvalArg::Spatial => EvalMode::Spatial,
                EvalArg::Temporal => EvalMode::Temporal,
            };
            let text = harness::cmd_eval(&cfg, &ckpt, &data, mode)?.to_text();
            print!("{text}");
            write_out(out.as_ref(), &text)?;
        }
        Command::SweepThreshold { ckpt, data, thresholds, out } => {
            let text = harness::cmd_sweep_threshold(&cfg, &ckpt, &data, &thresholds)?.to_text();
            print!("{text}");
            write_out(out.as_ref(), &text)?;
        }
        Command::Infer { ckpt, clip, out } => {
            let o = harness::cmd_infer(&cfg, &ckpt, &clip, &out)?;
            println!("{} overlays, poses {}, diagnostics {}", o.overlays.len(), o.poses.display(), o.diagnostics.display());
        }
        Command::Gradcheck { with_fixture } => {
            let summary = harness::cmd_gradcheck(with_fixture);
            for line in &summary.lines {
                println!("{line}");
            }
            if !summary.passed() {
                return Err(Failure::Test(format!("{} gradient checks failed", summary.failures)));
            }
        }
        Command::Probe { ckpt, counts, repeats, out } => {
            if deterministic {
                return Err(Failure::Usage(format!("probe reports wall-clock time and is unavailable with {}", harness::DETERMINISTIC_ENV)));
            }
            let model = match ckpt {
                Some(p) => harness::load_model(&cfg, &p)?,
                None => vepe::model::Vepe::new(&cfg).map_err(|e| Failure::Usage(e.to_string()))?,
            };
            let csv = harness::probe_runtime(&model, &counts, repeats)?.to_csv();
            print!("{csv}");
            write_out(out.as_ref(), &csv)?;
        }
        Command::Config => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Test(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
    }
}
