//! `brainage` command-line driver.

mod commands;
mod config;
mod data;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use error::CliError;
use output::Run;

#[derive(Debug, Parser)]
#[command(name = "brainage", version, about = "Brain-age regression pipeline on volumetric scans")]
struct Cli {
    /// JSON run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; each command writes into its own subdirectory
    #[arg(long, global = true, env = "BRAINAGE_OUT")]
    out: Option<PathBuf>,
    /// Worker threads (the engine currently runs on one)
    #[arg(long, global = true, env = "BRAINAGE_THREADS", default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthetic phantom volumes
    #[command(subcommand)]
    Phantom(PhantomCmd),
    /// Age binning, balancing and splitting
    #[command(subcommand)]
    Cohort(CohortCmd),
    /// Train a regressor on the train/val rows of a split manifest
    Train,
    /// Evaluate a checkpoint on the test rows
    Eval,
    /// Predict ages for every manifest row
    Predict,
    /// Activation maps
    #[command(subcommand)]
    Saliency(SaliencyCmd),
    /// Input ablation experiments
    #[command(subcommand)]
    Ablate(AblateCmd),
    /// Statistical analyses of predictions
    #[command(subcommand)]
    Stats(StatsCmd),
}

#[derive(Debug, Subcommand)]
enum PhantomCmd {
    /// Generate phantoms and their manifest
    Gen,
}

#[derive(Debug, Subcommand)]
enum CohortCmd {
    /// Balance sessions across age bins
    Balance,
    /// Balance, then split subjects into train/val/test
    Split,
    /// Inverse-frequency sample weights
    Weights,
}

#[derive(Debug, Subcommand)]
enum SaliencyCmd {
    /// One activation map per manifest row
    Map,
    /// Average maps within age bins and threshold them
    Group,
}

#[derive(Debug, Subcommand)]
enum AblateCmd {
    /// Train slab models along one axis
    Slices,
    /// Train one model per region mask
    Lobes,
}

#[derive(Debug, Subcommand)]
enum StatsCmd {
    /// Score ~ age * age_diff + gender regression
    Assoc,
    /// Per-subject spread of repeated predictions
    Retest,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Phantom(PhantomCmd::Gen) => "phantom gen",
            Command::Cohort(CohortCmd::Balance) => "cohort balance",
            Command::Cohort(CohortCmd::Split) => "cohort split",
            Command::Cohort(CohortCmd::Weights) => "cohort weights",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Predict => "predict",
            Command::Saliency(SaliencyCmd::Map) => "saliency map",
            Command::Saliency(SaliencyCmd::Group) => "saliency group",
            Command::Ablate(AblateCmd::Slices) => "ablate slices",
            Command::Ablate(AblateCmd::Lobes) => "ablate lobes",
            Command::Stats(StatsCmd::Assoc) => "stats assoc",
            Command::Stats(StatsCmd::Retest) => "stats retest",
        }
    }
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    if cli.threads == 0 {
        return Err(CliError::Validation("--threads: must be at least 1".into()));
    }
    let out = cli.out.clone().unwrap_or_else(|| cfg.resolve(cfg.out.as_deref().unwrap_or("brainage-out".as_ref())));
    log::info!("{} -> {} (config {})", cli.command.name(), out.display(), cfg.hash());
    let run = Run::new(cfg, cli.command.name(), &out)?;
    let run = match cli.command {
        Command::Phantom(PhantomCmd::Gen) => commands::phantom_gen(run),
        Command::Cohort(CohortCmd::Balance) => commands::cohort_balance(run),
        Command::Cohort(CohortCmd::Split) => commands::cohort_split(run),
        Command::Cohort(CohortCmd::Weights) => commands::cohort_weights(run),
        Command::Train => commands::train(run),
        Command::Eval => commands::eval(run),
        Command::Predict => commands::predict(run),
        Command::Saliency(SaliencyCmd::Map) => commands::saliency_map(run),
        Command::Saliency(SaliencyCmd::Group) => commands::saliency_group(run),
        Command::Ablate(AblateCmd::Slices) => commands::ablate_slices(run),
        Command::Ablate(AblateCmd::Lobes) => commands::ablate_lobes(run),
        Command::Stats(StatsCmd::Assoc) => commands::stats_assoc(run),
        Command::Stats(StatsCmd::Retest) => commands::stats_retest(run),
    }?;
    run.finish()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(dir) => {
            println!("artifacts in {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
