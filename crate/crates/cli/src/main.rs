mod config;
mod manifest;
mod stages;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunArgs;

/// Beam-sweep channel estimation and snapshot SLAM on simulated mmWave scenes.
#[derive(Debug, Parser)]
#[command(name = "mmw-slam", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize power maps, ground-truth paths and noisy measurements.
    Simulate(RunArgs),
    /// Extract angles and ToAs from the simulated maps.
    Estimate(RunArgs),
    /// Sequential snapshot SLAM over the trajectory.
    Slam(RunArgs),
    /// GOSPA/SLFD per position and trajectory error statistics.
    Eval(RunArgs),
    /// simulate, estimate, slam and eval in one go.
    RunAll(RunArgs),
}

/// Exit status classes: 1 for configuration problems, 2 for failures while a
/// stage runs.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

pub type Outcome<T> = std::result::Result<T, Failure>;

pub trait Classify<T> {
    fn config(self) -> Outcome<T>;
    fn runtime(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for std::result::Result<T, E> {
    fn config(self) -> Outcome<T> {
        self.map_err(|e| Failure::Config(e.into()))
    }

    fn runtime(self) -> Outcome<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

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
        Command::Simulate(a) => stages::simulate(&a),
        Command::Estimate(a) => stages::estimate(&a),
        Command::Slam(a) => stages::slam(&a),
        Command::Eval(a) => stages::eval(&a),
        Command::RunAll(a) => stages::run_all(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
