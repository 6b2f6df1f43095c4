use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training error in `{param}`: {reason}")]
    Training { param: String, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("bands unavailable in sample: {}", .0.join(", "))]
    UnavailableBand(Vec<String>),

    #[error("normalization stats error: {0}")]
    Stats(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("unsupported evaluation cell: {0}")]
    UnsupportedCell(String),

    #[error("incomplete model `{model}`: missing cell {cell}")]
    IncompleteModel { model: String, cell: String },

    #[error("unknown {kind} `{name}`")]
    UnknownName { kind: &'static str, name: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
