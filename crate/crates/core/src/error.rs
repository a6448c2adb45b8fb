use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("training diverged at step {step}: non-finite values in {linear}")]
    Diverged { step: usize, linear: String },

    #[error("gradient record out of order: expected step {expected}, got {got}")]
    OutOfOrder { expected: usize, got: usize },

    #[error("unknown linear {0}")]
    UnknownLinear(String),

    #[error("missing IGIA matrix for {0}")]
    MissingIgia(String),

    #[error("invalid prune plan: {0}")]
    Plan(String),

    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownName {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error(transparent)]
    Container(#[from] ContainerError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short stable identifier used in single-line CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::NonFinite(_) => "non_finite",
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Diverged { .. } => "diverged",
            Error::OutOfOrder { .. } => "out_of_order",
            Error::UnknownLinear(_) => "unknown_linear",
            Error::MissingIgia(_) => "missing_igia",
            Error::Plan(_) => "plan",
            Error::UnknownName { .. } => "unknown_name",
            Error::Container(e) => e.kind(),
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures specific to reading and writing tensor containers.
#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic: expected IGPK, found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated container: {0}")]
    Truncated(String),

    #[error("tensor `{name}` out of bounds: bytes {offset}..{end} exceed payload of {payload} bytes")]
    OutOfBounds {
        name: String,
        offset: u64,
        end: u64,
        payload: u64,
    },

    #[error("tensors `{0}` and `{1}` overlap in the payload")]
    Overlap(String, String),

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("malformed header: {0}")]
    Header(String),
}

impl ContainerError {
    pub fn kind(&self) -> &'static str {
        match self {
            ContainerError::BadMagic(_) => "bad_magic",
            ContainerError::UnsupportedVersion(_) => "unsupported_version",
            ContainerError::Truncated(_) => "truncated",
            ContainerError::OutOfBounds { .. } => "out_of_bounds",
            ContainerError::Overlap(..) => "overlap",
            ContainerError::DuplicateName(_) => "duplicate_name",
            ContainerError::Header(_) => "header",
        }
    }
}
