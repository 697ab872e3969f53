use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied an argument outside the operation's domain.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A file or dataset violated its format contract.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("data contract violation: {0}")]
    DataContract(String),

    #[error("soft labels missing for {} datapoint(s): {}", .missing.len(), preview_ids(.missing))]
    Coverage { missing: Vec<u64> },

    #[error("training diverged: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn preview_ids(ids: &[u64]) -> String {
    const SHOWN: usize = 20;
    let mut s = ids
        .iter()
        .take(SHOWN)
        .map(u64::to_string)
        .collect::<Vec<_>>()
        .join(",");
    if ids.len() > SHOWN {
        s.push_str(",...");
    }
    s
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
