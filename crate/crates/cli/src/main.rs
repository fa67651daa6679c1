mod args;
mod commands;
mod fixtures;

use std::process::ExitCode;

use clap::Parser;

use crate::args::{Cli, Command};
use crate::commands::CliError;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match (cli.reference_fixtures, cli.command) {
        (Some(dir), None) => fixtures::write(&dir),
        (None, Some(Command::Fit(a))) => commands::fit(&a),
        (None, Some(Command::Select(a))) => commands::select(&a),
        (None, Some(Command::Dose(a))) => commands::dose(&a),
        (None, Some(Command::Simulate(a))) => commands::simulate(&a),
        (None, None) => Err(CliError::Usage("a subcommand or --reference-fixtures is required; see --help".into())),
        (Some(_), Some(_)) => Err(CliError::Usage("--reference-fixtures cannot be combined with a subcommand".into())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
