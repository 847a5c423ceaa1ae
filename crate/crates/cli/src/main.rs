//! Command-line front end: simulate datasets, extract signals from video,
//! train the apnea detector, and evaluate sessions against their reference.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use s2fusion::fusion::S2Strategy;

/// Completed, but some session ran without one or more camera channels.
pub const EXIT_DEGRADED: u8 = 3;
/// Input, configuration or dataset failed validation.
pub const EXIT_INVALID: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "s2fusion", version, about = "Camera-based respiratory rate and apnea monitoring")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Pipeline configuration (JSON); omitted keys keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed for simulation.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Override the S²Fusion strategy.
    #[arg(long, global = true, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// Override the apnea decision threshold on the posterior.
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum StrategyArg {
    SuppressToZero,
    HoldLast,
    MarkOnly,
}

impl From<StrategyArg> for S2Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::SuppressToZero => S2Strategy::SuppressToZero,
            StrategyArg::HoldLast => S2Strategy::HoldLast,
            StrategyArg::MarkOnly => S2Strategy::MarkOnly,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic sessions in the dataset layout.
    Simulate(commands::SimulateArgs),
    /// Extract TA and RM signals from session video into `signals/`.
    Extract(commands::DataArgs),
    /// Train the apnea detector, optionally with a leave-one-subject-out report.
    Train(commands::TrainArgs),
    /// Run the full pipeline and write per-window tables and a report.
    Evaluate(commands::EvaluateArgs),
    /// Rebuild the report from the output of `evaluate`.
    Report(commands::ReportArgs),
}

/// Exit status for a failed run: validation problems map to
/// [`EXIT_INVALID`], anything else to 1.
fn failure_code(err: &anyhow::Error) -> u8 {
    use s2fusion::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Format { .. }
                | E::InvalidParameter(_)
                | E::NonMonotonicTime(_)
                | E::NonFinite(_)
                | E::ModelVersion(_)
                | E::EmptyTrack
                | E::Json(_)
                | E::Csv(_)
                | E::Image(_) => EXIT_INVALID,
                _ => 1,
            };
        }
        if cause.is::<serde_json::Error>() || cause.is::<commands::Invalid>() {
            return EXIT_INVALID;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&cli.global, &a),
        Command::Extract(a) => commands::extract(&cli.global, &a),
        Command::Train(a) => commands::train(&cli.global, &a),
        Command::Evaluate(a) => commands::evaluate(&cli.global, &a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(commands::Outcome::Complete) => ExitCode::SUCCESS,
        Ok(commands::Outcome::Degraded) => ExitCode::from(EXIT_DEGRADED),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(failure_code(&e))
        }
    }
}
