//! Loopback executor for protocol tests: answers every valid pipeline with a
//! planted score.

use std::io;
use std::process::ExitCode;

use pipesynth::evaluator::echo::{parse_args, serve};

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let config = match parse_args(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("echo-executor: {e}");
            return ExitCode::from(2);
        }
    };
    match serve(config, io::stdin().lock(), io::stdout().lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("echo-executor: {e}");
            ExitCode::FAILURE
        }
    }
}
