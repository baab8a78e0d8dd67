use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use rimeforge::retrieval::Pathway;
use rimeforge_cli::config::RunConfig;
use rimeforge_cli::{commands, exit_code, report};

#[derive(Parser)]
#[command(name = "rimeforge", version, about = "Rewrite-driven generative embeddings at desk scale")]
struct Cli {
    /// TOML run configuration; omitted sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the top-level `seed` of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Joint contrastive + rewrite training.
    TrainSft {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// GRPO refinement starting from an SFT checkpoint.
    TrainRl {
        #[arg(long)]
        data: PathBuf,
        /// SFT model file (policy initialisation and frozen reference).
        #[arg(long)]
        sft: PathBuf,
        /// RL checkpoint directory to resume from.
        #[arg(long)]
        resume_from: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate query/target embedding pathways on the held-out set.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated pathways, e.g. `disc-disc,gen-gen`.
        #[arg(long, value_delimiter = ',', default_value = "disc-disc,disc-gen,gen-disc,gen-gen")]
        modes: Vec<Pathway>,
        #[arg(long)]
        out: PathBuf,
    },
    /// One SFT run and evaluation per λ, with a consolidated table.
    SweepLambda {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,1.0,1.5")]
        lambda_values: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render metric tables and curves from run directories.
    Report {
        /// Run directories (train-sft, train-rl, eval or sweep outputs).
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("RIMEFORGE_THREADS") {
        let n: usize = v.parse().with_context(|| format!("RIMEFORGE_THREADS={v:?} is not a number"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let cfg = resolve(&cli)?;
    match &cli.command {
        Command::GenData { out } => {
            commands::gen_data(&cfg, out)?;
        }
        Command::TrainSft { data, out } => {
            commands::train_sft(&cfg, data, out)?;
        }
        Command::TrainRl { data, sft, resume_from, out } => {
            commands::train_rl(&cfg, data, sft, resume_from.as_deref(), out)?;
        }
        Command::Eval { data, checkpoint, modes, out } => {
            commands::eval(&cfg, data, checkpoint, modes, out)?;
        }
        Command::SweepLambda { data, lambda_values, out } => {
            let rows = commands::sweep_lambda(&cfg, data, lambda_values, out)?;
            print!("{}", report::sweep_table(&rows));
        }
        Command::Report { inputs, out } => {
            report::render(&cfg, inputs, out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
