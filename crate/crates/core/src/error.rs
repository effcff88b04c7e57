use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("backward already ran on this tape; reset it before another backward pass")]
    DoubleBackward,

    #[error("backward requires a 1x1 loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("degenerate mask: round({ratio} * {tokens}) = {masked} masked tokens")]
    DegenerateMask {
        tokens: usize,
        ratio: f64,
        masked: usize,
    },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("corrupted data: {0}")]
    Data(String),

    #[error("model is already wrapped with adapters")]
    AlreadyWrapped,

    #[error("adapter `{0}` was already merged into its base weight")]
    AdapterConsumed(String),

    #[error("strategy {strategy} is incompatible with the model: {reason}")]
    StrategyMismatch {
        strategy: &'static str,
        reason: String,
    },

    #[error("upsampling is not supported: input rate {0} Hz is below 50 Hz")]
    UnsupportedUpsampling(f64),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("unknown domain `{name}` (available: {available})")]
    UnknownDomain { name: String, available: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Toml(e.to_string())
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Error::Toml(e.to_string())
    }
}
