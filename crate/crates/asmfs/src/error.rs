use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("label domain violation at subject {subject}: {value} (labels must be +1 or -1)")]
    LabelDomain { subject: usize, value: String },

    #[error("non-finite value in {context} at {location}")]
    NonFinite { context: String, location: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(
        "subject {subject} has {available} within-class candidate(s); \
         K={k} requires at least K+1 (enable K clamping or lower K)"
    )]
    NeighborCount {
        subject: usize,
        available: usize,
        k: usize,
    },

    #[error("linear solve failed in {context}: matrix not positive definite (pivot {pivot})")]
    LinearSolve { context: String, pivot: usize },

    #[error("kernel matrix is not symmetric positive semidefinite: {0}")]
    KernelNotPsd(String),

    #[error("degenerate solve: {0}")]
    Degenerate(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input (files, shapes, config) as
    /// opposed to numeric failures encountered while computing.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Csv { .. }
                | Error::ShapeMismatch { .. }
                | Error::LabelDomain { .. }
                | Error::NonFinite { .. }
                | Error::InvalidConfig(_)
                | Error::InvalidInput(_)
                | Error::Json(_)
        )
    }
}
