use thiserror::Error;

/// Every failure surfaced by the library.
///
/// `kind()` gives a stable machine-readable tag used by the CLI's JSON error
/// output.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cloud sizes differ: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFiniteInput(String),

    #[error("loss tensor must be 1x1, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("degenerate neighborhood around point {index}")]
    DegenerateNeighborhood { index: usize },

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("degenerate point pair: second point lies on the reference normal axis")]
    DegeneratePair,

    #[error("every sampled point pair was degenerate")]
    AllPairsDegenerate,

    #[error("pose set is empty")]
    EmptySet,

    #[error("record list is empty")]
    EmptyRecords,

    #[error("need at least two points, got {0}")]
    TooFewPoints(usize),

    #[error("only {survivors} points survive culling and occlusion")]
    EverythingOccluded { survivors: usize },

    #[error("invalid value for {key}: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("malformed PLY header: {0}")]
    MalformedHeader(String),

    #[error("PLY file lacks normal properties (nx ny nz)")]
    MissingNormals,

    #[error("schema violation: {0}")]
    SchemaViolation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::SizeMismatch { .. } => "SizeMismatch",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::NonFiniteInput(_) => "NonFiniteInput",
            Error::NonScalarLoss { .. } => "NonScalarLoss",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::DegenerateNeighborhood { .. } => "DegenerateNeighborhood",
            Error::DegenerateConfiguration(_) => "DegenerateConfiguration",
            Error::DegeneratePair => "DegeneratePair",
            Error::AllPairsDegenerate => "AllPairsDegenerate",
            Error::EmptySet => "EmptySet",
            Error::EmptyRecords => "EmptyRecords",
            Error::TooFewPoints(_) => "TooFewPoints",
            Error::EverythingOccluded { .. } => "EverythingOccluded",
            Error::InvalidConfig { .. } => "InvalidConfig",
            Error::MalformedHeader(_) => "MalformedHeader",
            Error::MissingNormals => "MissingNormals",
            Error::SchemaViolation(_) => "SchemaViolation",
            Error::Io { .. } => "Io",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
