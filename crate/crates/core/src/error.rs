use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("window ({x}, {y}, {w}x{h}) outside slide bounds {width}x{height}")]
    OutOfBounds {
        x: u64,
        y: u64,
        w: u64,
        h: u64,
        width: u32,
        height: u32,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("manifest mismatch: expected {expected} tile rows, got {got}")]
    ManifestMismatch { expected: usize, got: usize },

    #[error("encoder {encoder} failed on tile {index}: {reason}")]
    Encoder {
        encoder: String,
        index: usize,
        reason: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("parameter group {0} is frozen in this stage")]
    FrozenGroup(String),

    #[error("invalid stage {0}: expected 1..=4")]
    InvalidStage(u8),

    #[error("class {class} has {have} samples, protocol needs {need}")]
    InsufficientSamples {
        class: usize,
        have: usize,
        need: usize,
    },

    #[error("empty pool for source {0}")]
    EmptyPool(&'static str),

    #[error("training set contains a single class")]
    SingleClass,

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
