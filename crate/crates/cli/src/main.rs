use std::process::ExitCode;

use clap::Parser;
use pipesynth_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli, &mut std::io::stdout().lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pipesynth: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
