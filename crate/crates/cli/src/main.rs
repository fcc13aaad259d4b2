//! `facetnet` command-line tool: dataset generation, staged training,
//! inference, evaluation and the scaling benchmark.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure,
//! 4 finished with a warning (e.g. an inferred mesh without faces).

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use facetnet::trainer::alloc::TrackingAllocator;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[derive(Debug, Parser)]
#[command(name = "facetnet", version, about = "Triangle meshes from partial range scans")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Scan shapes into TSDF volumes and write a dataset index.
    GenData(commands::GenDataArgs),
    /// Run one training stage.
    Train(commands::TrainArgs),
    /// Predict a mesh from one TSDF volume.
    Infer(commands::InferArgs),
    /// Compare predicted meshes with ground truth.
    Eval(commands::EvalArgs),
    /// Time and memory of the vertex/edge stage for several vertex counts.
    Bench(commands::BenchArgs),
}

/// Failure of a command, carrying its exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

/// How a successful command ended.
pub enum Outcome {
    Done,
    Warning(String),
}

pub const WARNING_EXIT: u8 = 4;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Warning(w)) => {
            eprintln!("warning: {}", w);
            ExitCode::from(WARNING_EXIT)
        }
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.code())
        }
    }
}
