use std::process::ExitCode;

use clap::Parser;
use fscil_cli::args::Cli;
use fscil_cli::commands::{execute, exit_code};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
