//! Pipeline driver behind the `delta` binary: configuration, the stage
//! functions each subcommand calls, run logging and report emission.

pub mod config;
pub mod pipeline;
pub mod plot;
pub mod report;

use std::path::PathBuf;

use delta::data::DataError;
use delta::eval::EvalError;
use delta::gen::GenError;
use delta::search::SearchError;
use thiserror::Error;

pub use config::{DataConfig, RunConfig};
pub use report::{Report, ReportRow};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_GENERATION: i32 = 4;
/// The run finished but produced nothing usable, e.g. zero search episodes.
pub const EXIT_EMPTY: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Input(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) | CliError::Eval(_) | CliError::Io { .. } | CliError::Input(_) => EXIT_DATA,
            CliError::Search(e) => match e {
                SearchError::Config(_) => EXIT_CONFIG,
                _ => EXIT_DATA,
            },
            CliError::Gen(e) => match e {
                GenError::Io { .. } | GenError::Manifest(_) | GenError::Vocabulary(_) => EXIT_DATA,
                _ => EXIT_GENERATION,
            },
        }
    }
}

/// How a stage that did not fail ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Done,
    /// Finished with an empty knowledge base; later stages were skipped.
    Empty,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Done => 0,
            Outcome::Empty => EXIT_EMPTY,
        }
    }
}

/// Sets the rayon pool size from `DELTA_WORKERS` when it holds a positive
/// integer. Later calls are no-ops.
pub fn init_workers() {
    if let Some(n) = std::env::var("DELTA_WORKERS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("rayon pool already initialised");
        }
    }
}
