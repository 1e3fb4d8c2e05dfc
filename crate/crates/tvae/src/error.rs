//! Error type shared across the crate's fallible surfaces.
//!
//! Programmer errors inside the tensor engine (shape mismatches, out-of-range
//! axes, fully masked attention rows) panic with descriptive messages; this
//! type covers the workflow surfaces: data loading, configuration,
//! checkpoint I/O, and training-time aborts.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: u64, what: String },

    #[error("non-finite gradient in parameter `{name}` at step {step}")]
    NanGradient { name: String, step: u64 },

    #[error("freeze pattern `{0}` matched no parameters")]
    FreezeNoMatch(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
