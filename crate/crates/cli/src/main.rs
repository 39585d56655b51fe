mod commands;
mod config;
mod ledger;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use indistill_core::curriculum::SchedulerMode;
use indistill_core::train::Method;
use indistill_core::Error;

#[derive(Parser)]
#[command(name = "indistill", version, about = "Intermediate-layer distillation for small CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher with cross-entropy and save its checkpoint.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Distill the saved teacher into the auxiliary model.
    DistillAux {
        #[arg(long)]
        config: PathBuf,
        /// Teacher checkpoint (default: <output>/teacher.ckpt).
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Distill a student and append the result to the ledger.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        scheduler: Option<SchedulerMode>,
        /// Seeds to run (default: the config's seed list).
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        /// Frozen reference checkpoint (default: the auxiliary model).
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the configured test split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Model whose penultimate features the divergence is measured against.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Print the curriculum epoch table as CSV.
    Schedule {
        #[arg(long, default_value_t = 2)]
        a: usize,
        #[arg(long, default_value_t = 1)]
        b: usize,
        #[arg(long, default_value_t = 70)]
        epochs: usize,
        #[arg(long, default_value_t = 4)]
        layers: usize,
    },
    /// Print per-channel L1 scores and the kept set of every feature layer.
    PruneReport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        rate: f64,
    },
    /// Run the distillation once per grid point.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Grid axes such as `a=1,2,3` `b=0,1`.
        #[arg(long, num_args = 1.., required = true)]
        grid: Vec<String>,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Io(_) | Error::Format(_) | Error::Integrity(_) | Error::Version { .. }) => 3,
        Some(Error::NonFinite(_)) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainTeacher { config, seed } => commands::train_teacher(&config, seed),
        Command::DistillAux { config, teacher, seed } => commands::distill_aux(&config, teacher.as_deref(), seed),
        Command::Distill {
            config,
            method,
            scheduler,
            seed,
            reference,
        } => commands::distill(&config, method, scheduler, &seed, reference.as_deref()),
        Command::Evaluate {
            config,
            checkpoint,
            reference,
            k,
        } => commands::evaluate(&config, &checkpoint, reference.as_deref(), k),
        Command::Schedule { a, b, epochs, layers } => commands::schedule(a, b, epochs, layers),
        Command::PruneReport { checkpoint, rate } => commands::prune_report(&checkpoint, rate),
        Command::Sweep {
            config,
            grid,
            reference,
        } => commands::sweep(&config, &grid, reference.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
