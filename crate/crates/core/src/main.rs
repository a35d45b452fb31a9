use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xce_core::cli::{
    cmd_eval, cmd_gen, cmd_sweep_paths, cmd_sweep_snr, cmd_train, default_estimators, emit_results, Estimator, ExperimentConfig,
};
use xce_core::{Result, XceError};

/// Hybrid-field XL-MIMO channel estimation experiments.
#[derive(Parser)]
#[command(name = "xce", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Replaces every seed in the configuration.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test datasets into a directory.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train the model; writes weights plus `<out>.log.csv`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding train.xced and val.xced.
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
        /// Weights output file.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Score estimators on a stored test set.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Test file, or a directory holding test.xced.
        #[arg(long, value_name = "PATH")]
        dataset: PathBuf,
        #[arg(long, value_name = "PATH")]
        weights: Option<PathBuf>,
        /// Comma-separated subset of ls,lmmse,hyomp,llm4xce.
        #[arg(long, value_name = "LIST")]
        estimators: String,
        /// Result CSV; stdout when omitted.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// NMSE versus SNR on fixed channels.
    SweepSnr(Sweep),
    /// NMSE versus the number of far-field paths.
    SweepPaths(Sweep),
}

#[derive(Args)]
struct Sweep {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "PATH")]
    weights: Option<PathBuf>,
    /// Defaults to every estimator the inputs allow.
    #[arg(long, value_name = "LIST")]
    estimators: Option<String>,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let cfg = match c.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("XCE_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| XceError::Config(format!("XCE_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| XceError::Config(format!("cannot size the worker pool: {e}")))
}

fn sweep_estimators(s: &Sweep) -> Result<Vec<Estimator>> {
    match &s.estimators {
        Some(list) => Estimator::parse_list(list),
        None => Ok(default_estimators(s.weights.is_some())),
    }
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Gen { common, out } => {
            let cfg = load_config(&common)?;
            let mut stdout = io::stdout().lock();
            for s in cmd_gen(&cfg, &out)? {
                writeln!(stdout, "{}: {} samples, base seed {}", s.path.display(), s.n_samples, s.base_seed)?;
            }
        }
        Command::Train { common, dataset, out } => {
            let cfg = load_config(&common)?;
            let log = cmd_train(&cfg, &dataset, &out, &mut io::stderr().lock())?;
            println!("best epoch {} with validation NMSE {} dB; weights in {}", log.best_epoch, log.best_val_nmse_db, out.display());
        }
        Command::Eval { common, dataset, weights, estimators, out } => {
            let cfg = load_config(&common)?;
            let est = Estimator::parse_list(&estimators)?;
            let rows = cmd_eval(&cfg, weights.as_deref(), &dataset, &est)?;
            emit_results(&rows, &cfg, out.as_deref())?;
        }
        Command::SweepSnr(s) => {
            let cfg = load_config(&s.common)?;
            let rows = cmd_sweep_snr(&cfg, s.weights.as_deref(), &sweep_estimators(&s)?)?;
            emit_results(&rows, &cfg, s.out.as_deref())?;
        }
        Command::SweepPaths(s) => {
            let cfg = load_config(&s.common)?;
            let rows = cmd_sweep_paths(&cfg, s.weights.as_deref(), &sweep_estimators(&s)?)?;
            emit_results(&rows, &cfg, s.out.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("E_USAGE: {line}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " | ");
            eprintln!("{}: {}", e.code(), msg);
            ExitCode::FAILURE
        }
    }
}
