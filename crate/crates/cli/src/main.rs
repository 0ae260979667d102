use std::process::ExitCode;

use clap::Parser;
use salm_cli::commands::{run, Cli};
use salm_cli::exit_code;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(outcome) => match outcome.aborted {
            None => ExitCode::SUCCESS,
            Some(e) => {
                eprintln!("error: {e} (results from the best model before the failure were written)");
                ExitCode::from(exit_code(&e) as u8)
            }
        },
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
