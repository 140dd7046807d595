//! `slimdiff`: profile, train, incubate, sample and inspect desk-scale
//! diffusion UNets.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "slimdiff", version, about)]
pub struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for artifacts and logs.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the configuration's master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parameter and FLOP accounting, optionally against a second spec.
    Profile {
        /// Second configuration whose architecture is the comparison target.
        #[arg(long, conflicts_with = "pruned")]
        compare: Option<PathBuf>,
        /// Compare against the configured prune plan applied to the spec.
        #[arg(long)]
        pruned: bool,
        /// Fraction of pipeline cost outside the UNet.
        #[arg(long, default_value_t = slimdiff::profiler::DEFAULT_OVERHEAD)]
        overhead: f64,
    },
    /// Train the teacher on the denoising objective.
    TrainTeacher,
    /// Two-stage incubation of a compressed student against a teacher.
    Incubate {
        /// Teacher checkpoint; overrides `teacher_checkpoint` in the config.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// DDIM sampling over the configured model schedule.
    Sample {
        /// `NAME=PATH` model entries, added to `sampler.models`.
        #[arg(long = "checkpoint", value_name = "NAME=PATH")]
        checkpoints: Vec<String>,
    },
    /// List the tensors, provenance and freeze flags of a checkpoint.
    Inspect {
        path: PathBuf,
        /// Print the inventory as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Write the synthetic dataset as JSON lines.
    GenData {
        /// Number of samples; defaults to `data.size`.
        #[arg(long)]
        n: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
