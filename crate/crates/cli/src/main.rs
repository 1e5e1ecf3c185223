use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use puyun_cli::args::Cli;
use puyun_cli::commands;

fn main() -> ExitCode {
    if let Some(n) = std::env::var("PUYUN_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("warning: cannot set thread count: {e}");
        }
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
