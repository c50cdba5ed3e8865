use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

#[derive(Parser)]
#[command(
    name = "asmfs",
    version = asmfs::VERSION,
    about = "Adaptive-similarity multi-modality feature selection and multi-kernel SVM classification"
)]
struct Cli {
    /// JSON run configuration; flags override its fields
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Top-level seed (all randomness derives from it)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Thread budget for concurrent folds and grid points
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-modality dataset with planted features
    Synth,
    /// Train one method on the full dataset and save the model
    Fit {
        /// SVM | lassoSVM | MKSVM | lassoMKSVM | MTFS | fixed-similarity | ASMFS
        #[arg(long)]
        method: Option<String>,
        /// Graph penalty weight
        #[arg(long)]
        lambda: Option<f64>,
        /// Row-sparsity penalty weight
        #[arg(long)]
        mu: Option<f64>,
        /// Neighbors per similarity row
        #[arg(long)]
        k: Option<usize>,
    },
    /// Repeated nested cross-validation benchmark over methods
    Evaluate {
        /// Restrict the benchmark to a single method
        #[arg(long)]
        method: Option<String>,
        /// Outer folds
        #[arg(long)]
        folds: Option<usize>,
        /// Outer repeats
        #[arg(long)]
        repeats: Option<usize>,
        /// Collapse the lambda grid to this single value
        #[arg(long)]
        lambda: Option<f64>,
        /// Collapse the mu grid to this single value
        #[arg(long)]
        mu: Option<f64>,
        /// Collapse the K grid to this single value
        #[arg(long)]
        k: Option<usize>,
    },
    /// Apply a saved model to feature CSVs
    Predict {
        /// Model artifact written by `fit`
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
    },
}

fn run(cli: &Cli) -> asmfs::Result<()> {
    let mut config = config::load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    match &cli.command {
        Command::Fit { method, lambda, mu, k } => {
            if let Some(m) = method {
                config.method = m.clone();
            }
            config.hyperparams.lambda = lambda.or(config.hyperparams.lambda);
            config.hyperparams.mu = mu.or(config.hyperparams.mu);
            config.hyperparams.k = k.or(config.hyperparams.k);
        }
        Command::Evaluate { method, folds, repeats, lambda, mu, k } => {
            if let Some(m) = method {
                config.methods = vec![m.clone()];
            }
            if let Some(f) = folds {
                config.cv.folds = *f;
            }
            if let Some(r) = repeats {
                config.cv.repeats = *r;
            }
            if let Some(l) = lambda {
                config.grids.lambda = vec![*l];
            }
            if let Some(m) = mu {
                config.grids.mu = vec![*m];
            }
            if let Some(k) = k {
                config.grids.k = vec![*k];
            }
        }
        Command::Synth | Command::Predict { .. } => {}
    }

    asmfs::parallel::with_jobs(cli.jobs, || match &cli.command {
        Command::Synth => commands::synth(&config),
        Command::Fit { .. } => commands::fit(&config),
        Command::Evaluate { .. } => commands::evaluate(&config),
        Command::Predict { model } => commands::predict(&config, model),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("ASMFS_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}
