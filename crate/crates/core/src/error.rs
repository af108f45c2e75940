//! Error type shared across the library.

use std::fmt;

/// Library-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
///
/// The variants are grouped so a caller (notably the CLI) can map them to
/// distinct exit codes: configuration problems, bad inputs, I/O failures,
/// missing pipeline stages, and internal invariant violations.
#[derive(Debug)]
pub enum Error {
    /// Invalid configuration value; the message names the offending field.
    Config(String),
    /// Invalid runtime input (bad token ids, empty batches, mismatched key sets).
    Input(String),
    /// Filesystem or serialization failure.
    Io { context: String, source: std::io::Error },
    /// Artifact exists but cannot be parsed.
    Format(String),
    /// A pipeline stage was invoked before its predecessor produced artifacts.
    StageDependency { stage: String, missing: String },
    /// Checkpoint carries an unsupported format version.
    CheckpointVersion { found: u32, expected: u32 },
    /// Checkpoint ended before all declared tensors were read.
    CheckpointTruncated(String),
    /// Checkpoint tensor shapes disagree with the embedded configuration.
    CheckpointShape(String),
    /// Violated internal invariant; indicates a bug, not user error.
    Internal(String),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    /// Process exit code for the CLI: 0 is success, everything here is nonzero.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Input(_) => 3,
            Error::CheckpointVersion { .. }
            | Error::CheckpointTruncated(_)
            | Error::CheckpointShape(_)
            | Error::Format(_) => 3,
            Error::Io { .. } => 4,
            Error::StageDependency { .. } => 5,
            Error::Internal(_) => 70,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Input(msg) => write!(f, "input error: {msg}"),
            Error::Io { context, source } => write!(f, "i/o error: {context}: {source}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::StageDependency { stage, missing } => {
                write!(f, "stage `{stage}` requires artifacts from stage `{missing}`; run that stage first")
            }
            Error::CheckpointVersion { found, expected } => {
                write!(f, "checkpoint version {found} not supported (expected {expected})")
            }
            Error::CheckpointTruncated(msg) => write!(f, "truncated checkpoint: {msg}"),
            Error::CheckpointShape(msg) => write!(f, "checkpoint shape mismatch: {msg}"),
            Error::Internal(msg) => write!(f, "internal error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io { context: "io".into(), source: e }
    }
}
