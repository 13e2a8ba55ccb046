use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use sola::cli::{execute, resolve_config, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let env_out = std::env::var_os("SOLA_OUT").map(PathBuf::from);
    match resolve_config(&cli, env_out).and_then(|cfg| execute(&cli, &cfg)) {
        Ok(msg) => {
            println!("{}", msg.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
