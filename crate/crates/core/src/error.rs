use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid probability mass: {0}")]
    InvalidPmf(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("missing control v_{0} in history")]
    MissingControl(i64),
    #[error("stage {stage}: A11 is indefinite (min eigenvalue {min_eig:e})")]
    Indefinite { stage: usize, min_eig: f64 },
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("enumeration budget exceeded: {count} realizations > {budget}")]
    Budget { count: u128, budget: u128 },
    #[error("oracle: {0}")]
    Oracle(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
