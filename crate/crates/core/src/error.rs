use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("length mismatch in {context}: expected {expected}, got {got}")]
    LengthMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("timestep {t} outside [0, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("non-finite loss at step {step} (lr {lr:e}, scheme {scheme})")]
    NonFiniteLoss { step: usize, lr: f64, scheme: String },

    #[error("non-finite value during generation at reverse step {step} (t = {t})")]
    NonFiniteGeneration { step: usize, t: usize },

    #[error("loss mask selects no domain: empty objective")]
    EmptyObjective,

    #[error("empty batch")]
    EmptyBatch,

    #[error("malformed file: {0}")]
    Format(String),

    #[error("unsupported {kind} version {found} (this build reads {supported})")]
    Version {
        kind: &'static str,
        found: u32,
        supported: u32,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
