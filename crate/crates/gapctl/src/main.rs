//! `gapctl`: command-line front end for gapkit.

mod args;
mod commands;
mod grid;
mod output;

use std::ffi::OsString;

use clap::Parser;

use crate::output::{EXIT_OK, EXIT_VALIDATION};

/// Parses `argv`, runs the subcommand and returns the process exit code.
fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match args::Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version go to stdout and are not failures.
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::run(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    }
}

fn main() {
    std::process::exit(dispatch(std::env::args_os()));
}
