//! Error types shared across the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Array shapes incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Inputs outside an operation's domain (empty input, timestep out of range, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Operation called in a state that forbids it (unfrozen predecessor, pruned expert, ...).
    #[error("state error: {0}")]
    State(String),

    /// Unknown token, concept, or expert id.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// No free slot for a new registration.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Layout DSL parse failure, with a byte offset into the input.
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    /// Region layout rejected (overlapping boxes, degenerate extents).
    #[error("layout error: {0}")]
    Layout(String),

    /// A function under gradient check produced a non-finite value.
    #[error("evaluation error: {0}")]
    Eval(String),

    /// A numeric result became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Run configuration invalid; names the offending key.
    #[error("config error: {0}")]
    Config(String),

    /// A prerequisite file for a command is missing.
    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code per the CLI contract: 2 config, 3 missing artifact,
    /// 4 numeric failure, 1 everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } => 2,
            Error::MissingArtifact(_) => 3,
            Error::NonFinite(_) => 4,
            _ => 1,
        }
    }
}
