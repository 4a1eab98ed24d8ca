//! `gcaps`: train, evaluate and compare capsule networks, and run the routing
//! analyses.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use config::{ConfigError, RunConfig, OUTPUT_DIR_ENV};

const USAGE: &str = "\
usage: gcaps <command> [--config FILE] [--KEY VALUE | --KEY=VALUE]...

commands:
  train           train one routing config; writes checkpoint, metrics CSV and config
  eval            evaluate --checkpoint on the test (or --split train) data
  compare         train every listed --routing config for every seed and report
  routing-report  coupling-change study on random predictions
  reconstruct     per-type reconstruction grid from a grouped --checkpoint

Flags name config keys with dashes or underscores (--train-limit 2000).
Settings apply in order: defaults, --config file, flags, then the
GCAPS_OUTPUT_DIR environment variable for the output directory.";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.0)
    }
}

impl CliError {
    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Command {
    Train,
    Eval,
    Compare,
    RoutingReport,
    Reconstruct,
}

impl Command {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "train" => Command::Train,
            "eval" => Command::Eval,
            "compare" => Command::Compare,
            "routing-report" => Command::RoutingReport,
            "reconstruct" => Command::Reconstruct,
            _ => return None,
        })
    }
}

/// Splits flags into an optional config file and ordered key/value pairs.
fn parse_flags(args: &[String]) -> Result<(Option<PathBuf>, Vec<(String, String)>), CliError> {
    let mut file = None;
    let mut pairs = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let flag = arg
            .strip_prefix("--")
            .ok_or_else(|| CliError::Usage(format!("unexpected argument `{arg}`")))?;
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::Usage(format!("flag `--{flag}` needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        let key = key.replace('-', "_");
        if key == "config" {
            file = Some(PathBuf::from(value));
        } else {
            pairs.push((key, value));
        }
    }
    Ok((file, pairs))
}

fn run(args: &[String]) -> Result<(), CliError> {
    let Some(name) = args.first() else {
        return Err(CliError::Usage("missing command".into()));
    };
    if name == "--help" || name == "-h" || name == "help" {
        println!("{USAGE}");
        return Ok(());
    }
    let command = Command::parse(name).ok_or_else(|| CliError::Usage(format!("unknown command `{name}`")))?;
    let (file, pairs) = parse_flags(&args[1..])?;
    let mut cfg = RunConfig::default();
    if let Some(file) = file {
        cfg.apply_file(&file)?;
    }
    for (key, value) in &pairs {
        cfg.set(key, value)?;
    }
    cfg.resolve(std::env::var(OUTPUT_DIR_ENV).ok());
    match command {
        Command::Train => commands::train(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Compare => commands::compare(&cfg),
        Command::RoutingReport => commands::routing_report(&cfg),
        Command::Reconstruct => commands::reconstruct(&cfg),
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{USAGE}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
