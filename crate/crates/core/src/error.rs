use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("autodiff: {0}")]
    Autodiff(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("infeasible decision: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by user input rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Format(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
