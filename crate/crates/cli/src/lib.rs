pub mod commands;
pub mod config;
pub mod pipeline;
pub mod report;

use std::ffi::OsString;
use std::io::Write;

use clap::{CommandFactory, FromArgMatches};

pub use commands::{Cli, Command};
pub use config::RunConfig;
pub use report::{AblationPoint, ReportRow};

/// Parse `args` and run; returns the process exit code. Errors go to `err` as one line.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let keys = RunConfig::help_text();
    let matches = Cli::command()
        .after_help(keys.clone())
        .mut_subcommands(|c| c.after_help(keys.clone()))
        .try_get_matches_from(args)
        .and_then(|m| Cli::from_arg_matches(&m));
    let cli = match matches {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match commands::execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", commands::error_line(&e));
            commands::exit_code(&e)
        }
    }
}
