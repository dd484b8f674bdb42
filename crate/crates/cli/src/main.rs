mod args;
mod commands;
mod error;
mod manifest;
mod table;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::MakePrior(a) => commands::make_prior(a),
        Command::Degrade(a) => commands::degrade(a),
        Command::Restore(a) => commands::restore(a),
        Command::Eval(a) => commands::eval(a),
        Command::Replay(a) => commands::replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ddnm: {e}");
            e.exit_code()
        }
    }
}
