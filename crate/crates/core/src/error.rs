//! Error type shared across the crate.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, GapaError>;

/// Errors emitted by the GAPA pipeline, from dense linear algebra up to
/// file-format handling.
#[derive(Debug)]
pub enum GapaError {
    /// Two operands (or a file and the network it claims to describe) have
    /// incompatible shapes.
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    /// A Cholesky pivot was not strictly positive. Usually means the jitter
    /// supplied with the kernel matrix is too small.
    NotPositiveDefinite { pivot_index: usize },
    /// A construction or load produced a NaN or infinity.
    NonFinite { context: &'static str },
    /// A variance entry was negative where a Gaussian state requires it
    /// to be non-negative.
    NegativeVariance { index: usize, value: f64 },
    /// Variance (or scale) parameter that must be strictly positive was not.
    NonPositiveVariance { value: f64 },
    NonPositiveScale { value: f64 },
    /// An operation that needs cached rows got an empty cache.
    EmptyCache,
    /// The median pairwise distance is zero: all sampled rows coincide.
    DegenerateScale,
    /// CoarseIVF requested more lists than there are inducing rows.
    TooFewRows { n_lists: usize, rows: usize },
    /// AUROC needs both classes present in the labels.
    SingleClass,
    /// The noise-head fit diverged (loss became non-finite).
    NonFiniteLoss { epoch: usize },
    /// A file failed its checksum or is structurally truncated/garbled.
    CorruptFile { reason: String },
    /// The container declares a schema version this build does not read.
    SchemaVersionUnsupported { found: u32, supported: u32 },
    /// An artifact was built against a different network/dataset pair.
    FingerprintMismatch { context: &'static str },
    /// A parameter failed validation (e.g. M > rows, K > M, eps <= 0).
    InvalidParameter { what: String },
    Io(std::io::Error),
}

impl fmt::Display for GapaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DimensionMismatch {
                context,
                expected,
                got,
            } => write!(f, "dimension mismatch in {context}: expected {expected}, got {got}"),
            Self::NotPositiveDefinite { pivot_index } => write!(
                f,
                "matrix not positive definite (pivot {pivot_index} <= 0); increase jitter"
            ),
            Self::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Self::NegativeVariance { index, value } => {
                write!(f, "negative variance {value} at index {index}")
            }
            Self::NonPositiveVariance { value } => {
                write!(f, "variance must be > 0, got {value}")
            }
            Self::NonPositiveScale { value } => write!(f, "scale must be > 0, got {value}"),
            Self::EmptyCache => write!(f, "activation cache has no rows"),
            Self::DegenerateScale => {
                write!(f, "median pairwise distance is zero; cannot set a lengthscale")
            }
            Self::TooFewRows { n_lists, rows } => {
                write!(f, "cannot build {n_lists} IVF lists over {rows} rows")
            }
            Self::SingleClass => write!(f, "AUROC requires both positive and negative labels"),
            Self::NonFiniteLoss { epoch } => {
                write!(f, "noise-head loss became non-finite at epoch {epoch}; lower the learning rate")
            }
            Self::CorruptFile { reason } => write!(f, "corrupt file: {reason}"),
            Self::SchemaVersionUnsupported { found, supported } => {
                write!(f, "schema version {found} unsupported (this build reads <= {supported})")
            }
            Self::FingerprintMismatch { context } => write!(
                f,
                "fingerprint mismatch in {context}: artifact was built from a different network/dataset"
            ),
            Self::InvalidParameter { what } => write!(f, "invalid parameter: {what}"),
            Self::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for GapaError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for GapaError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

impl GapaError {
    /// True for errors that stem from bad inputs or stale artifacts, as
    /// opposed to numerical failures. The CLI maps the former to exit code 2
    /// and the latter to exit code 3.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Self::NotPositiveDefinite { .. }
                | Self::NonFinite { .. }
                | Self::NonFiniteLoss { .. }
                | Self::DegenerateScale
        )
    }
}
