//! Operator surface: `repd` CLI and the defense gateway.

pub mod commands;
pub mod config;
pub mod gateway;

use clap::error::ErrorKind;
use clap::Parser;

use repd_core::{CorpusError, EvalError};

/// Exit codes: usage errors 64, file errors 66, backend errors 69,
/// evaluation with errored outcomes 2.
pub const EXIT_OK: i32 = 0;
pub const EXIT_EVAL_ERRORED: i32 = 2;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_FILE: i32 = 66;
pub const EXIT_BACKEND: i32 = 69;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    File(String),
    Backend(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::File(_) => EXIT_FILE,
            CliError::Backend(_) => EXIT_BACKEND,
            CliError::Other(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::File(m) | CliError::Backend(m) | CliError::Other(m) => m,
        }
    }

    pub fn from_corpus(err: CorpusError) -> Self {
        CliError::File(err.to_string())
    }

    pub fn from_eval(err: EvalError) -> Self {
        match err {
            EvalError::Backend(e) => CliError::Backend(e.to_string()),
            EvalError::Pipeline(repd_core::PipelineError::Backend(e)) => {
                CliError::Backend(e.to_string())
            }
            other => CliError::Other(other.to_string()),
        }
    }
}

/// Parses argv and runs the selected subcommand, returning the process
/// exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match commands::Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            let kind = err.kind();
            let _ = err.print();
            return if kind == ErrorKind::DisplayHelp || kind == ErrorKind::DisplayVersion {
                EXIT_OK
            } else {
                EXIT_USAGE
            };
        }
    };

    let result: Result<i32, CliError> = match cli.command {
        commands::Command::Ingest {
            templates,
            questions,
        } => commands::run_ingest(&templates, &questions).map(|()| EXIT_OK),
        commands::Command::Serve { config } => commands::run_serve(&config).map(|()| EXIT_OK),
        commands::Command::Eval { config, out } => {
            commands::run_eval_command(&config, &out).map(|errored| {
                if errored > 0 {
                    EXIT_EVAL_ERRORED
                } else {
                    EXIT_OK
                }
            })
        }
        commands::Command::Forge {
            templates,
            questions,
            mode,
            out,
        } => commands::run_forge(&templates, &questions, mode, &out).map(|()| EXIT_OK),
        commands::Command::GenBenign { n, backend, out } => {
            commands::run_gen_benign(n, &backend, &out).map(|()| EXIT_OK)
        }
    };

    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("repd: {}", err.message());
            err.exit_code()
        }
    }
}
