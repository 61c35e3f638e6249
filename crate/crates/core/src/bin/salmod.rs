use std::process::ExitCode;

use salmod::cli::{execute, parse, ParseFailure};

fn main() -> ExitCode {
    let (name, settings, verbosity) = match parse(std::env::args_os()) {
        Ok(p) => p,
        Err(ParseFailure::Clap(e)) => e.exit(),
        Err(ParseFailure::Settings(e)) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let level = match verbosity {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&name, &settings) {
        Ok(report) => {
            print!("{}", report.text);
            if report.success {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
