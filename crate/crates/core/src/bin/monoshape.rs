use std::process::ExitCode;

use clap::Parser;
use monoshape::cli::{log_level, run, Cli, Outcome};
use monoshape::Error;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = log_level(&cli);
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .init();
    let mut stdout = std::io::stdout().lock();
    match run(&cli, &mut stdout) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::AllFailed) => {
            eprintln!("error: every instance failed");
            ExitCode::FAILURE
        }
        Err(e @ Error::InvalidConfig(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
