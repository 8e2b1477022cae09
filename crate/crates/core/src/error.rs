use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong across the library. Variants are grouped by
/// the stage that raises them; the CLI maps them onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {ctx}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        ctx: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{ctx}: expected a scalar, got shape {shape:?}")]
    NotScalar { ctx: String, shape: Vec<usize> },

    #[error("log of non-positive value {value}")]
    LogDomain { value: f64 },

    #[error("softmax row is fully masked in {ctx}")]
    MaskedRow { ctx: String },

    #[error("batch norm needs at least 2 elements per channel, got {got}")]
    DegenerateBatch { got: usize },

    #[error("invalid parameter {name}: {msg}")]
    InvalidParam { name: String, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("ingestion error in series {series_id}: {msg}")]
    Ingestion { series_id: String, msg: String },

    #[error("series {series_id} is shorter than the window: {len} < {window}")]
    SeriesTooShort {
        series_id: String,
        len: usize,
        window: usize,
    },

    #[error("cannot merge an empty probability vector")]
    EmptyMerge,

    #[error("alpha tuning needs both classes in the validation set")]
    SingleClassValidation,

    #[error("split needs at least {min} series, got {got}")]
    TooFewSeries { min: usize, got: usize },

    #[error("undersampling needs both classes present")]
    SingleClassTrain,

    #[error("metric inputs differ in length: {lhs} vs {rhs}")]
    MetricLength { lhs: usize, rhs: usize },

    #[error("mask selects no positions")]
    EmptyMask,

    #[error("non-finite value produced in {ctx}")]
    NonFinite { ctx: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(ctx: &str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            ctx: ctx.to_string(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
