//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 data or
//! format error.

mod args;
mod commands;
mod config;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};

use crate::args::Cli;

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os().collect()))
}

fn run(argv: Vec<OsString>) -> u8 {
    let argv = match config::expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let mut cmd = Cli::command();
    let matches = match cmd.try_get_matches_from_mut(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };

    let name = cli.command.name();
    let (Some(sub_cmd), Some(sub_matches)) =
        (cmd.find_subcommand(name), matches.subcommand_matches(name))
    else {
        eprintln!("error: missing subcommand");
        return 1;
    };
    let resolved = config::render(name, &config::resolved(sub_cmd, sub_matches));
    print!("{resolved}");

    match commands::run(cli.command, &resolved) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
