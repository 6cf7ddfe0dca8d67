mod args;
mod evaluate;
mod explain;
mod output;
mod report;
mod train;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("XAI_KIT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("XAI_KIT_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Train(a) => train::run(a, &argv),
        Command::Evaluate(a) => evaluate::run(a, &argv),
        Command::Explain(a) => explain::run(a, &argv),
        Command::Report(a) => report::run(a, &argv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
