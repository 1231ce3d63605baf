use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty mask")]
    EmptyMask,
    #[error("softmax over empty set")]
    EmptySoftmax,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("infeasible packing: {0}")]
    InfeasiblePacking(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("diverged: {0}")]
    Diverged(String),
    #[error("numerical failure at frame {0}")]
    NumericalFailure(usize),
    #[error("format version mismatch: expected {expected}, found {found}")]
    FormatVersion { expected: u32, found: u32 },
    #[error("missing ground truth: {0}")]
    MissingGroundTruth(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Stable short tag for machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyMask => "empty_mask",
            Error::EmptySoftmax => "empty_softmax",
            Error::Shape(_) => "shape",
            Error::InvalidInput(_) => "invalid_input",
            Error::Config(_) => "config",
            Error::InfeasiblePacking(_) => "infeasible_packing",
            Error::NonFinite(_) => "non_finite",
            Error::Diverged(_) => "diverged",
            Error::NumericalFailure(_) => "numerical_failure",
            Error::FormatVersion { .. } => "format_version",
            Error::MissingGroundTruth(_) => "missing_ground_truth",
            Error::Io(_) => "io",
            Error::Serde(_) => "serde",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
