mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::Cli;

/// Exit status for a failure: 2 usage, 3 missing or malformed artifact,
/// 4 scoring service, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<mtpref::Error>() {
            return match e.root() {
                mtpref::Error::InvalidInput(_) | mtpref::Error::InvalidConfig(_) => 2,
                mtpref::Error::Io(_) | mtpref::Error::Format { .. } => 3,
                mtpref::Error::Remote(_) => 4,
                _ => 1,
            };
        }
        if cause.is::<commands::Usage>() {
            return 2;
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    }))
    .format_timestamp(None)
    .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
