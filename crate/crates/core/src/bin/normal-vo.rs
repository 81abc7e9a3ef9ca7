use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use normal_vo::cli::{cmd_evaluate, cmd_experiment, cmd_run, cmd_simulate, CliError, RunConfig, RunOptions};
use normal_vo::evaluation::{AlignmentMode, DEFAULT_RDE_STEP};

/// Stereo visual odometry with surface-normal constraints on simulated
/// near-planar scenes.
#[derive(Debug, Parser)]
#[command(name = "normal-vo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Alignment {
    Full,
    Planar,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a dataset directory.
    Simulate {
        /// Configuration file; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the scene seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
        output: PathBuf,
    },
    /// Estimate the trajectory of a dataset.
    Run {
        dataset: PathBuf,
        /// Trajectory file to write.
        output: PathBuf,
        /// Configuration file; defaults to the dataset's config_used.txt.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Disable the normal factors (λ = 0).
        #[arg(long)]
        no_normal: bool,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare an estimated trajectory with ground truth.
    Evaluate {
        estimate: PathBuf,
        ground_truth: PathBuf,
        /// Directory for report.txt, summary.csv, ate.csv and rde.csv.
        output: PathBuf,
        /// Frame step of the relative displacement error.
        #[arg(long, default_value_t = DEFAULT_RDE_STEP)]
        delta: usize,
        #[arg(long, value_enum, default_value = "full")]
        alignment: Alignment,
    },
    /// Simulate, run with and without normal factors, and evaluate, per seed.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seeds overriding the configuration.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        force: bool,
        output: PathBuf,
    },
}

fn load(path: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    path.as_deref().map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config, seed, force, output } => {
            let mut cfg = load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            cmd_simulate(&cfg, &output, force)?;
        }
        Command::Run { dataset, output, config, no_normal, lambda, seed } => {
            let cfg = config.as_deref().map(RunConfig::load).transpose()?;
            cmd_run(&dataset, &output, cfg.as_ref(), &RunOptions { no_normal, lambda, seed })?;
        }
        Command::Evaluate { estimate, ground_truth, output, delta, alignment } => {
            let mode = match alignment {
                Alignment::Full => AlignmentMode::Full,
                Alignment::Planar => AlignmentMode::Planar,
            };
            let eval = cmd_evaluate(&estimate, &ground_truth, delta, mode, &output)?;
            println!("ATE rmse {:.6} mean {:.6} median {:.6}", eval.ate.rmse, eval.ate.mean, eval.ate.median);
            println!("RDE rmse {:.6} mean {:.6} median {:.6}", eval.rde.rmse, eval.rde.mean, eval.rde.median);
        }
        Command::Experiment { config, seeds, force, output } => {
            let mut cfg = load(&config)?;
            if !seeds.is_empty() {
                cfg.seeds = seeds;
            }
            let summary = cmd_experiment(&cfg, &output, force)?;
            print!("{}", summary.report());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
