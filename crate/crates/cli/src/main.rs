//! Batch task controller for the KPI root-cause-analysis pipeline.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{cmd_detect, cmd_evaluate, cmd_localize, cmd_simulate, cmd_train};
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "rca",
    about = "Root cause analysis for multi-dimensional KPI metrics",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic benchmark dataset with labeled anomalies
    Simulate(CommonArgs),
    /// Train the relationship model on a dataset
    Train(CommonArgs),
    /// List timestamps where the monitored root metric breaks 3 sigma
    Detect(CommonArgs),
    /// Localize the root cause of an anomaly and write a report
    Localize(CommonArgs),
    /// Score localization methods against ground truth
    Evaluate(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run-configuration file (`key = value` lines)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set ga.population=100 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for every stage (simulate, train, search)
    #[arg(long)]
    seed: Option<u64>,
    /// Training epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Derived-function index for simulate (0..=4)
    #[arg(long = "f-index")]
    f_index: Option<usize>,
    /// Timestamp to analyze (`auto` picks the latest flagged one)
    #[arg(long)]
    t: Option<String>,
    /// Candidate filtering threshold
    #[arg(long = "t-delta")]
    t_delta: Option<f64>,
    /// Output directory
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
    /// Dataset manifest path
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Trained model path
    #[arg(long)]
    model: Option<PathBuf>,
    /// Monitored root metric name
    #[arg(long)]
    monitored: Option<String>,
    /// Relationship model: gat or oracle
    #[arg(long)]
    relationship: Option<String>,
}

impl CommonArgs {
    fn into_config(self) -> anyhow::Result<RunConfig> {
        let mut overrides = self.set;
        let mut push = |key: &str, value: Option<String>| {
            if let Some(value) = value {
                overrides.push(format!("{key}={value}"));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("gat.epochs", self.epochs.map(|v| v.to_string()));
        push("sim.f_index", self.f_index.map(|v| v.to_string()));
        push("t", self.t);
        push("t_delta", self.t_delta.map(|v| v.to_string()));
        push(
            "out_dir",
            self.out_dir.map(|v| v.display().to_string()),
        );
        push(
            "manifest",
            self.manifest.map(|v| v.display().to_string()),
        );
        push("model", self.model.map(|v| v.display().to_string()));
        push("monitored", self.monitored);
        push("relationship", self.relationship);
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, run): (
        CommonArgs,
        fn(&RunConfig) -> Result<(), commands::Failure>,
    ) = match cli.command {
        Command::Simulate(args) => (args, cmd_simulate),
        Command::Train(args) => (args, cmd_train),
        Command::Detect(args) => (args, cmd_detect),
        Command::Localize(args) => (args, cmd_localize),
        Command::Evaluate(args) => (args, cmd_evaluate),
    };
    let config = match args.into_config() {
        Ok(config) => config,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(commands::exit::INPUT as u8);
        }
    };
    match run(&config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.code as u8)
        }
    }
}
