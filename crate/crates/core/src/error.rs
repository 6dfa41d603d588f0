use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, channel counts or configuration values that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),
    /// An API was called out of order or with an argument it cannot accept.
    #[error("usage error: {0}")]
    Usage(String),
    /// A latent value lies outside the domain it was checked against.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("render error: {0}")]
    Render(String),
    /// A training label or dataset record is malformed.
    #[error("data error: {0}")]
    Data(String),
    /// Non-finite loss or gradient during optimization.
    #[error("training error at step {step}: {message}")]
    Training { step: u64, message: String },
    /// Every particle received zero weight.
    #[error("degenerate posterior: all {particles} importance weights are zero (closest ABC distance {min_distance})")]
    DegeneratePosterior { particles: usize, min_distance: f64 },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code: 2 for usage/config problems, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Training { .. } | Error::DegeneratePosterior { .. } => 3,
            _ => 2,
        }
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
pub(crate) use config_err;
