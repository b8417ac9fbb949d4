//! `ptm`: data preparation, training, prediction, evaluation and analysis.

mod args;
mod commands;
mod context;
mod error;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser};

use args::Cli;
use context::RunContext;
use error::CliError;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    if argv.len() <= 1 {
        eprintln!("{}", Cli::command().render_usage());
        eprintln!("Run `ptm --help` for the list of commands.");
        return ExitCode::from(1);
    }
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.global.quiet { "error" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli, argv: Vec<String>) -> Result<(), CliError> {
    let json = cli.global.json;
    let mut ctx = RunContext::new(cli.global, argv)?;
    let output = commands::run(&mut ctx, &cli.command)?;
    let manifest = ctx.finish()?;
    if json {
        println!("{}", output.json);
    } else {
        for l in &output.lines {
            println!("{l}");
        }
    }
    ctx.info(format!("manifest: {}", manifest.display()));
    Ok(())
}
