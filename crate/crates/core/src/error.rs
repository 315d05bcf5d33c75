use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv format error: {0}")]
    Format(String),

    #[error("need at least 2 valid candles, found {found}")]
    InsufficientData { found: usize },

    #[error("dates must be strictly increasing: {prev} then {next}")]
    Ordering { prev: String, next: String },

    #[error("invalid candle on {date}: {detail}")]
    InvalidCandle { date: String, detail: String },

    #[error("split leaves the {side} side with {len} candles (need at least 2)")]
    DegenerateSplit { side: &'static str, len: usize },

    #[error("invalid split dates: {0}")]
    InvalidSplit(String),

    #[error("series of length {len} is too short: need {needed}")]
    InsufficientLength { len: usize, needed: usize },

    #[error("episode already finished")]
    EpisodeFinished,

    #[error("transaction cost {0} outside [0, 1)")]
    TransactionCost(f64),

    #[error("expected {expected} actions, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("configuration error at `{field}`: {detail}")]
    Config { field: String, detail: String },

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("{metric}: {detail}")]
    Domain { metric: &'static str, detail: String },

    #[error("sharpe ratio is undefined for zero volatility")]
    UndefinedSharpe,

    #[error(transparent)]
    Neural(#[from] neuralcore::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Self::Config {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::TransactionCost(_) | Error::InvalidSplit(_) => 2,
            Error::Compatibility(_) => 4,
            Error::Neural(neuralcore::Error::Incompatible { .. } | neuralcore::Error::Checkpoint(_)) => 4,
            _ => 3,
        }
    }
}
