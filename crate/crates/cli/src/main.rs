use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use roadtwin_cli::cli::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stage = cli.command.stage();
    let started = Instant::now();
    let result = cli.command.execute();
    // Timing goes to stderr so artifacts and stdout stay reproducible.
    eprintln!(
        "roadtwin: {stage} finished in {:.3} s",
        started.elapsed().as_secs_f64()
    );
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("roadtwin: {e}");
            ExitCode::FAILURE
        }
    }
}
