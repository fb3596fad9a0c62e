//! Error type shared across the workspace.

use std::fmt;
use std::io;

/// All failure modes surfaced by library operations.
#[derive(Debug)]
pub enum Error {
    /// Invalid configuration value or malformed config text.
    Config(String),
    /// Shape mismatch or invalid tensor/timestep argument.
    Shape(String),
    /// Dataset file format problem (bad magic, truncation, offsets).
    Data(String),
    /// Checkpoint format or version problem.
    Checkpoint(String),
    /// Training produced a non-finite loss; carries the step index.
    Diverged { step: u64, loss: f64 },
    /// Underlying I/O failure.
    Io(io::Error),
    /// Command usage error (bad arguments, missing files).
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::Diverged { step, loss } => {
                write!(f, "training diverged at step {step}: loss = {loss}")
            }
            Error::Io(err) => write!(f, "io error: {err}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<io::Error> for Error {
    fn from(err: io::Error) -> Self {
        Error::Io(err)
    }
}

impl Error {
    /// Process exit code for the CLI: 0 success, 2 usage, 3 data, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 2,
            Error::Data(_) | Error::Checkpoint(_) | Error::Io(_) | Error::Shape(_) => 3,
            Error::Diverged { .. } => 4,
        }
    }
}
