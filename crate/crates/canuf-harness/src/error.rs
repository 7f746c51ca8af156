//! Error categories mapped to CLI exit codes: usage 1, data 2, numerical 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) => 1,
            HarnessError::Data(_) => 2,
            HarnessError::Numerical(_) => 3,
        }
    }
}

/// Exit code for an anyhow error chain (2 for uncategorized failures).
pub fn exit_code_of(err: &anyhow::Error) -> i32 {
    err.downcast_ref::<HarnessError>()
        .map_or(2, HarnessError::exit_code)
}
