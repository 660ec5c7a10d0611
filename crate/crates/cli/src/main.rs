mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "mbda", version, about = "Model-based domain adaptation for DWI lesion classifiers")]
pub struct Cli {
    /// Worker threads (default: all logical cores). 1 runs sequentially.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON config file or a previous run.json; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed for phantom, training and splits.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// More progress output on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthetic phantom datasets.
    Phantom {
        #[command(subcommand)]
        action: PhantomCommand,
    },
    /// Voxelwise kurtosis fit of one stack; writes parameter maps.
    Fit(FitArgs),
    /// Restore the channels of a target protocol from a measured stack.
    Restore(RestoreArgs),
    /// Train a classifier on one cross-validation fold of a dataset.
    Train(TrainArgs),
    /// Score cases with a trained network.
    Predict(PredictArgs),
    /// AUC of a predictions file, optionally DeLong-compared to another.
    Evaluate(EvaluateArgs),
    /// Experiment matrix.
    Scenario {
        #[command(subcommand)]
        action: ScenarioCommand,
    },
    /// Re-emit report tables from a report.json.
    Report(ReportArgs),
}

#[derive(Subcommand, Debug)]
pub enum PhantomCommand {
    Generate(GenerateArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub benign: Option<usize>,
    #[arg(long)]
    pub malignant: Option<usize>,
    /// Rician noise SD as a fraction of mean s0.
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Fit only these b-values (comma separated).
    #[arg(long)]
    pub protocol: Option<String>,
}

#[derive(Args, Debug)]
pub struct RestoreArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Comma-separated b-values of the output stack, e.g. 0,100,750,1500.
    #[arg(long)]
    pub target_protocol: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Arch {
    E2e,
    F2e,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "e2e")]
    pub arch: Arch,
    /// Training b-values (default: the dataset protocol).
    #[arg(long)]
    pub protocol: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub network: PathBuf,
    #[arg(long, conflicts_with = "input", required_unless_present = "input")]
    pub dataset: Option<PathBuf>,
    /// A single stack directory.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Restore missing training channels with model-based adaptation.
    #[arg(long)]
    pub adapt: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// Second predictions file on the same cases for a DeLong comparison.
    #[arg(long)]
    pub against: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum ScenarioCommand {
    /// Print the scenario rows as JSON.
    Enumerate(EnumerateArgs),
    /// Run the matrix on a dataset and write report tables.
    Run(ScenarioRunArgs),
}

#[derive(Args, Debug)]
pub struct EnumerateArgs {
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub protocol: Option<String>,
}

#[derive(Args, Debug)]
pub struct ScenarioRunArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated row indices to run (default: all).
    #[arg(long)]
    pub rows: Option<String>,
    /// Comma-separated modes (default: all).
    #[arg(long)]
    pub modes: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// report.json or the directory holding it.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output directory; without it the CSV table goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().target(env_logger::Target::Stderr).init();

    match commands::run(&cli, &argv[1..]) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
