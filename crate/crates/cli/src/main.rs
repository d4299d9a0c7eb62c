//! `attn-tutor`: generate synthetic data, train and evaluate attention
//! models, sweep η, compare map directories and render reports.

mod commands;
mod flags;
mod pool;

use std::fmt;
use std::process::ExitCode;

/// A failure that ends the process, split by exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config file or environment (exit 1).
    Config(String),
    /// Anything that fails once the run has started (exit 2).
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            Self::Config(_) => 1,
            Self::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(m) => write!(f, "config error: {m}"),
            Self::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

pub fn config(e: impl fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

pub fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let matches = match flags::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::dispatch(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
