use thiserror::Error;

/// Errors raised by ingestion, estimation, selection and simulation.
///
/// Variants are grouped by the kind of failure so front ends can map them to
/// stable exit codes (see [`Error::category`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {message}")]
    Csv { path: String, message: String },

    #[error("study `{study}`: {rule}")]
    InvalidStudy { study: String, rule: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("duplicate study id `{0}`")]
    DuplicateStudy(String),

    #[error("not estimable: {0}")]
    NotEstimable(String),

    #[error("study `{study}`: separation detected ({detail})")]
    Separation { study: String, detail: String },

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("{what} did not converge after {iterations} iterations")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
    },

    #[error("enumeration cap of {cap} subsets exceeded; use the sequential selector instead")]
    EnumerationCap { cap: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse failure class used for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Input,
    Estimability,
    Convergence,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Csv { .. }
            | Error::InvalidStudy { .. }
            | Error::InvalidInput(_)
            | Error::DuplicateStudy(_)
            | Error::Io(_) => ErrorCategory::Input,
            Error::NotEstimable(_)
            | Error::Separation { .. }
            | Error::Singular(_)
            | Error::EnumerationCap { .. } => ErrorCategory::Estimability,
            Error::NoConvergence { .. } => ErrorCategory::Convergence,
        }
    }

    pub(crate) fn study(study: &str, rule: impl Into<String>) -> Self {
        Error::InvalidStudy {
            study: study.to_string(),
            rule: rule.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
