use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use listenhead::error::ErrorClass;
use listenhead::pipeline::{self, RunConfig};
use listenhead::{Error, Result};

/// Listener head-motion generation: synthetic data, training, sampling and metrics.
#[derive(Parser)]
#[command(name = "listenhead", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default run config as JSON.
    InitConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset to `paths.dataset`.
    Synth {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train on `paths.dataset`, writing `paths.checkpoint` and a loss CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate listener motion for every pair of the evaluation dataset.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `paths.checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare predictions with a dataset; writes metrics.json and metrics.csv.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = "metrics")]
        out: PathBuf,
        /// Optional run config supplying metric settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render a text prior for each annotation in a JSON-lines file.
    Annotate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("CL_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidConfig(format!("CL_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

fn write_out(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => Ok(std::fs::write(p, text)?),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::InitConfig { out } => write_out(&RunConfig::default().to_json(), out.as_deref()),
        Command::Synth { config } => {
            let cfg = RunConfig::load(&config)?;
            let m = pipeline::cmd_synth(&cfg)?;
            println!("wrote {} pairs to {}", m.details["pairs"], cfg.paths.dataset.display());
            Ok(())
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            pipeline::cmd_train(&cfg)?;
            println!("wrote {}", cfg.paths.checkpoint.display());
            Ok(())
        }
        Command::Generate { config, checkpoint } => {
            let cfg = RunConfig::load(&config)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone());
            pipeline::cmd_generate(&cfg, &ckpt)?;
            println!("wrote predictions to {}", cfg.paths.predictions.display());
            Ok(())
        }
        Command::Evaluate { pred, gt, out, config } => {
            let metrics = match config {
                Some(c) => RunConfig::load(&c)?.metrics,
                None => Default::default(),
            };
            let report = pipeline::cmd_evaluate(&pred, &gt, &out, &metrics)?;
            print!("{}", report.table_csv());
            Ok(())
        }
        Command::Annotate { input, output, seed } => {
            let n = pipeline::cmd_annotate(&input, &output, seed)?;
            println!("rendered {n} text priors to {}", output.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            })
        }
    }
}
