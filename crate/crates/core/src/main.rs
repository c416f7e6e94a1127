use std::process::ExitCode;

use clap::Parser;
use plast::cli::{self, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli::init_threads().and_then(|()| cli::run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", cli::error_json(&e));
            ExitCode::FAILURE
        }
    }
}
