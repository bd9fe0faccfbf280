//! Library side of the `qdiff` command-line tool: train, sample, evaluate and compare runs.
//!
//! # Seeds
//!
//! A run has one master seed. Model parameters are drawn from streams keyed by
//! `(seed, parameter name)`; batch shuffling, training noise, sampling and metric subsampling
//! each use their own ChaCha8 stream of the master seed (see [`qdiff::rng::Stream`]). With one
//! worker thread every run is bit-reproducible from its `config.json`.

pub mod commands;
pub mod config;

pub use commands::{
    compare, evaluate, sample, train, CompareReport, CompareRow, SampleOutcome, TrainOutcome,
};
pub use config::{Dataset, RunConfig};

/// Failure of a command, carrying its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration (exit 1).
    Usage(String),
    /// Missing, unreadable or malformed input data (exit 2).
    Data(String),
    /// An engine error; the exit code depends on its kind.
    Engine(qdiff::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Engine(qdiff::Error::Numerical(_)) => 3,
            CliError::Engine(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Engine(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CliError::Engine(e) => Some(e),
            _ => None,
        }
    }
}

impl From<qdiff::Error> for CliError {
    fn from(e: qdiff::Error) -> Self {
        CliError::Engine(e)
    }
}
