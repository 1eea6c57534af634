use std::process::ExitCode;

use clap::Parser;
use mcq_uncertainty::cli::{run, Cli};

fn main() -> ExitCode {
    ExitCode::from(run(Cli::parse()) as u8)
}
