use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("graph has already been consumed by backward")]
    GraphConsumed,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unregistered dataset label {0}")]
    UnknownLabel(usize),

    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("actnorm layers are not initialized")]
    NotInitialized,

    #[error("actnorm layers are already initialized")]
    AlreadyInitialized,

    #[error("dimension {0} has zero variance in the initialization batch")]
    ZeroVariance(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss is {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("split would leave an empty partition for label {0}")]
    EmptySplit(usize),

    #[error("not enough samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("checksum mismatch: file is corrupted")]
    Checksum,

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("file is truncated")]
    Truncated,

    #[error("malformed file: {0}")]
    Format(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("image is {width}x{height}; the largest accepted side is {max}")]
    ImageTooLarge { width: u32, height: u32, max: u32 },

    #[error("checkpoint has no trained flow")]
    NoFlow,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by NaN/Inf or optimizer divergence.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Divergence { .. })
    }

    /// True for failures reading or writing files.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::Checksum
                | Error::Version { .. }
                | Error::Truncated
                | Error::Format(_)
                | Error::Json(_)
                | Error::Image(_)
                | Error::ImageTooLarge { .. }
        )
    }
}
