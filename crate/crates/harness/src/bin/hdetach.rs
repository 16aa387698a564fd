use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hdetach_core::checkpoint::Checkpoint;
use hdetach_core::numerics::Rng;
use hdetach_core::paths::WeightIndex;
use hdetach_harness::config::{ConfigError, RunConfig, Task};
use hdetach_harness::data::streams;
use hdetach_harness::engine::MaskGranularity;
use hdetach_harness::grid::{grid_csv, run_grid, DEFAULT_DETACH_PROBS};
use hdetach_harness::model::Model;
use hdetach_harness::path_report::{path_report, path_report_csv, probe_inputs, summarize};
use hdetach_harness::train::{train, TrainError};
use hdetach_harness::transfer::{evaluate_transfer, transfer_csv};
use hdetach_harness::verify::{verify, Suite};

/// h-detach LSTM experiments: training, transfer evaluation, gradient
/// verification and path reports.
#[derive(Parser)]
#[command(name = "hdetach", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its log and checkpoints.
    Train(RunArgs),
    /// Evaluate a copying checkpoint at other delays.
    Transfer {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated delays (defaults to the configured list).
        #[arg(long, value_delimiter = ',')]
        delays: Option<Vec<usize>>,
        /// Sequences per delay.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Run gradient and theory verification suites.
    Verify {
        /// Suites to run (fd, thm1, thm2, corollary, flops); all by default.
        #[arg(long, value_delimiter = ',')]
        suite: Vec<Suite>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Cell-path versus hidden-path decomposition under scaled recurrent weights.
    PathReport {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated recurrent-weight scales.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,4")]
        scales: Vec<f64>,
        /// Weight to differentiate, as `matrix:row:col` (e.g. fh:0:1).
        #[arg(long, default_value = "fh:0:1")]
        weight: WeightIndex,
    },
    /// Train every combination of detach probability and seed.
    Grid {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_DETACH_PROBS)]
        detach_probs: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
    },
}

/// Configuration file, preset and per-field overrides.
#[derive(Args)]
struct RunArgs {
    /// TOML file with `RunConfig` fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the full-size experiment settings instead of the desk-scale defaults.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    delay: Option<usize>,
    #[arg(long)]
    hidden_size: Option<usize>,
    #[arg(long)]
    detach_prob: Option<f64>,
    #[arg(long)]
    c_detach: bool,
    #[arg(long)]
    detach_prob_c: Option<f64>,
    #[arg(long)]
    mask_granularity: Option<MaskGranularity>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Disable gradient-norm clipping.
    #[arg(long)]
    no_clip: bool,
    #[arg(long)]
    max_norm: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    val_size: Option<usize>,
    #[arg(long)]
    stop_at: Option<f64>,
    #[arg(long)]
    audit_every: Option<usize>,
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    #[arg(long)]
    downsample: bool,
    #[arg(long)]
    permutation_seed: Option<u64>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(t) = self.task {
            cfg.task = t;
        }
        if self.paper_scale {
            cfg = cfg.paper_scale();
        }
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() { cfg.$field = v; })*
            };
        }
        set!(delay, hidden_size, detach_prob, detach_prob_c, mask_granularity, lr, batch, epochs, seed);
        set!(train_size, val_size, audit_every, permutation_seed);
        if let Some(s) = self.stop_at {
            cfg.stop_at = Some(s);
        }
        if let Some(d) = &self.mnist_dir {
            cfg.mnist_dir = Some(d.clone());
        }
        if let Some(c) = &self.checkpoint {
            cfg.checkpoint = Some(c.clone());
        }
        if let Some(o) = &self.out_dir {
            cfg.out_dir = Some(o.clone());
        }
        if let Some(m) = self.max_norm {
            cfg.clip.max_norm = m;
        }
        cfg.c_detach |= self.c_detach;
        cfg.downsample |= self.downsample;
        if self.no_clip {
            cfg.clip.enabled = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Failures mapped onto the process exit code.
enum Failure {
    Verification(String),
    Config(String),
    Data(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Verification(_) => 1,
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Verification(m) | Failure::Config(m) | Failure::Data(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(e) => Failure::Config(e.to_string()),
            TrainError::Diverged { .. } | TrainError::Audit { .. } => Failure::Verification(e.to_string()),
            TrainError::Data(_) | TrainError::Checkpoint(_) | TrainError::Io { .. } => Failure::Data(e.to_string()),
        }
    }
}

fn write_output(dir: Option<&Path>, name: &str, text: &str) -> Result<(), Failure> {
    match dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn snapshot(cfg: &RunConfig) -> Result<(), Failure> {
    if let Some(dir) = cfg.out_dir.as_deref() {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, cfg.to_toml()).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<Model, Failure> {
    let path = cfg
        .checkpoint
        .as_deref()
        .ok_or_else(|| Failure::Config("--checkpoint is required".into()))?;
    let ck = Checkpoint::load(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    Model::from_checkpoint(&ck).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let out = train(&cfg)?;
            if cfg.out_dir.is_none() {
                print!("{}", out.log.to_csv());
            }
            match (out.best_epoch, out.log.best_metric()) {
                (Some(e), Some(m)) => eprintln!("best validation metric {m:.4} at epoch {e}"),
                _ => eprintln!("no epochs run"),
            }
            Ok(())
        }
        Command::Transfer { run, delays, count } => {
            let mut cfg = run.resolve()?;
            if let Some(d) = delays {
                cfg.transfer_delays = d;
            }
            if let Some(c) = count {
                cfg.transfer_count = c;
            }
            cfg.task = Task::Transfer;
            cfg.validate()?;
            let model = load_model(&cfg)?;
            snapshot(&cfg)?;
            let seed = Rng::new(cfg.seed).derive(streams::TRANSFER).seed();
            let rows = evaluate_transfer(&model, &cfg.transfer_delays, cfg.transfer_count, seed);
            write_output(cfg.out_dir.as_deref(), "transfer.csv", &transfer_csv(&rows))
        }
        Command::Verify { suite, seed } => {
            let suites = if suite.is_empty() { Suite::ALL.to_vec() } else { suite };
            let mut failed = Vec::new();
            for s in suites {
                let report = verify(s, seed)?;
                println!("{report}");
                if !report.passed() {
                    failed.push(s.to_string());
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Failure::Verification(format!("failed suites: {}", failed.join(", "))))
            }
        }
        Command::PathReport { run, scales, weight } => {
            let cfg = run.resolve()?;
            let model = match cfg.checkpoint {
                Some(_) => load_model(&cfg)?,
                None => Model::init(
                    cfg.hidden_size,
                    hdetach_core::tasks::COPY_VOCAB,
                    hdetach_core::tasks::COPY_VOCAB,
                    &mut Rng::new(cfg.seed).derive(streams::INIT),
                )
                .map_err(|e| Failure::Config(e.to_string()))?,
            };
            if model.input() != hdetach_core::tasks::COPY_VOCAB {
                return Err(Failure::Data(format!(
                    "path reports probe copying inputs of width {}, the model expects {}",
                    hdetach_core::tasks::COPY_VOCAB,
                    model.input()
                )));
            }
            snapshot(&cfg)?;
            let xs = probe_inputs(cfg.delay, cfg.seed);
            let rows = path_report(&model.lstm, &xs, &weight, &scales).map_err(|e| Failure::Config(e.to_string()))?;
            for s in summarize(&rows) {
                eprintln!(
                    "scale {}: max|B_t| {:.4e}, max|A_t| {:.4e}, A within bound: {}",
                    s.weight_scale, s.max_abs_b, s.max_abs_a, s.a_within_bound
                );
            }
            write_output(cfg.out_dir.as_deref(), "path_report.csv", &path_report_csv(&rows))
        }
        Command::Grid {
            run,
            detach_probs,
            seeds,
        } => {
            let cfg = run.resolve()?;
            snapshot(&cfg)?;
            let rows = run_grid(&cfg, &detach_probs, &seeds)?;
            write_output(cfg.out_dir.as_deref(), "grid.csv", &grid_csv(&rows))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
