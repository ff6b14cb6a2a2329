//! `alkatomo`: file-based driver for synthesis, calibration, fitting,
//! reconstruction and experiment design.

mod commands;
mod traceset;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use alkatomo_core::Error as CoreError;

#[derive(Debug, Parser)]
#[command(name = "alkatomo", version, about = "Optical qutrit tomography pipeline")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `master_seed` of the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, created when missing.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    pub force: bool,
    /// Accept observable sets that fail the CYCLOPS sign checks.
    #[arg(long = "allow-nonstandard-conventions", global = true)]
    pub allow_nonstandard: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Random,
    StretchedX,
    StretchedY,
    StretchedZ,
    Mixed,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a full trace set with calibration data.
    Synth {
        /// State to synthesize from; `random` draws a Ginibre state from the seed.
        #[arg(long, value_enum, default_value = "random", conflicts_with = "state")]
        preset: Preset,
        /// State JSON file.
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Calibrate eta and zeta from the calibration data of a trace set.
    Calibrate {
        #[arg(long)]
        traces: PathBuf,
    },
    /// Fit the combined traces of a trace set.
    Fit {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
    },
    /// Reconstruct the density matrix from a trace set.
    Reconstruct {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
        /// State JSON to compute the fidelity against.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Condition number of the normal matrix across detunings (CSV).
    ConditionScan {
        /// Number of detuning points; the configured value when omitted.
        #[arg(long)]
        points: Option<usize>,
    },
    /// Distribute repetitions over the plan rows to minimise kappa.
    OptimizeReps {
        /// Total repetitions; the configured value when omitted.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Synthesize and reconstruct random states in memory.
    RoundtripBench {
        #[arg(long, default_value_t = 20)]
        states: usize,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{} exists; pass --force to overwrite", .0.display())]
    Exists(PathBuf),
    #[error("{0} did not converge (output written)")]
    NotConverged(&'static str),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::NotConverged(_) => 2,
            CliError::Core(CoreError::SingularSystem { .. } | CoreError::RankDeficient { .. }) => 3,
            CliError::Core(CoreError::MetadataMismatch(_)) => 4,
            _ => 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let g = &cli.global;
    let result = match &cli.command {
        Command::Synth { preset, state } => commands::synth(g, *preset, state.as_deref()),
        Command::Calibrate { traces } => commands::calibrate(g, traces),
        Command::Fit { traces, calibration } => commands::fit(g, traces, calibration),
        Command::Reconstruct {
            traces,
            calibration,
            truth,
        } => commands::reconstruct(g, traces, calibration, truth.as_deref()),
        Command::ConditionScan { points } => commands::condition_scan(g, *points),
        Command::OptimizeReps { budget } => commands::optimize_reps(g, *budget),
        Command::RoundtripBench { states } => commands::roundtrip_bench(g, *states),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("alkatomo: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
