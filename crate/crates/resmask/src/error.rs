//! Error type shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor was requested with an impossible shape (zero dim, bad rank,
    /// or data length that does not match the dimension product).
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// Two tensors that must agree in shape do not. The message names both.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Kernel geometry that cannot produce an output (kernel larger than the
    /// padded input, zero stride, spatial size collapsing below 1, ...).
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    /// Batch statistics are undefined: batch x spatial size < 2 in train mode.
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    /// `backward` was called on a tape that has already been consumed.
    #[error("tape already consumed: backward may run once per recorded tape")]
    TapeConsumed,

    /// `backward` was asked to differentiate a value that is not connected to
    /// the tape (produced under a non-recording context).
    #[error("value is not recorded on this tape; re-run the forward pass with recording enabled")]
    NotOnTape,

    /// An internal contract was violated (e.g. a trainable parameter missing
    /// its gradient during an optimizer step).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value appeared where the pipeline requires finite math.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Label outside 0..=6.
    #[error("label {got} out of range (valid classes are 0..={max})")]
    LabelOutOfRange { got: usize, max: usize },

    /// CSV / image parse failure with the 1-based line (or byte) position.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Checkpoint file does not start with the expected magic bytes.
    #[error("checkpoint has bad magic (not a network checkpoint)")]
    CheckpointBadMagic,

    /// Checkpoint version this build does not understand.
    #[error("checkpoint version {0} unsupported (expected 1)")]
    CheckpointBadVersion(u16),

    /// Checkpoint ended mid-record.
    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    /// Checkpoint names a parameter the target network does not have.
    #[error("checkpoint contains unknown parameter {0:?}")]
    CheckpointUnknownParam(String),

    /// Target network has a parameter the checkpoint does not provide.
    #[error("checkpoint is missing parameter {0:?}")]
    CheckpointMissingParam(String),

    /// Stored dtype cannot be loaded in the requested precision.
    #[error("checkpoint dtype mismatch: {0}")]
    CheckpointDtype(String),

    /// Checkpoint parameters do not match any known architecture preset.
    #[error("checkpoint does not match the network architecture: {0}")]
    CheckpointSpecMismatch(String),

    /// Network construction failed (spec validation).
    #[error("cannot build network: {0}")]
    Build(String),

    /// Anything touching the filesystem.
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Command-level usage problems that are not caught by the argument parser.
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
