//! The `apl` command line and its labelling API.

pub mod args;
pub mod commands;
pub mod config;
pub mod server;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;
use serde_json::{json, Value};

use apl_core::AplError;

use crate::args::{Cli, Command};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// One-line JSON description of a failure, for stderr.
pub fn error_line(e: &AplError) -> String {
    let kind = match e {
        AplError::InvalidInput(_) => "invalid_input",
        AplError::Numeric(_) => "numeric",
        AplError::Config { .. } => "config",
        AplError::OracleUnavailable(_) => "oracle_unavailable",
        AplError::ParseFailure { .. } => "parse_failure",
        AplError::Cancelled(_) => "cancelled",
        AplError::Integrity { .. } => "integrity",
        AplError::Incompatible { .. } => "incompatible",
        AplError::RunFinished(_) => "run_finished",
        AplError::Io(_) => "io",
        AplError::Json(_) => "json",
        AplError::Csv(_) => "csv",
    };
    let mut v = json!({ "error": kind });
    match e {
        AplError::Config { field, message } => {
            v["field"] = json!(field);
            v["message"] = json!(message);
        }
        AplError::ParseFailure { message, .. } => v["message"] = json!(message),
        other => v["message"] = json!(other.to_string()),
    }
    v.to_string()
}

fn dispatch(cmd: Command) -> apl_core::Result<Value> {
    match cmd {
        Command::GenData(a) => commands::gen_data(a),
        Command::Pretrain(a) => commands::pretrain_cmd(a),
        Command::Run(a) => commands::run_cmd(a),
        Command::Eval(a) => commands::eval_cmd(a),
        Command::Consistency(a) => commands::consistency_cmd(a),
        Command::Analyze(a) => commands::analyze_cmd(a),
        Command::Serve(a) => commands::serve_cmd(a),
    }
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
/// The result summary goes to stdout as one JSON line.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env("APL_LOG")
        .try_init();
    match dispatch(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            EXIT_FAILURE
        }
    }
}
