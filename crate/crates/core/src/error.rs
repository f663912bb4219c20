use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the pipeline.
///
/// The variants are grouped the way the command-line front end reports them:
/// [`Error::Data`] and [`Error::Io`] are data failures, [`Error::Config`] is a
/// configuration failure, everything else is an internal contract violation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message} (token `{token}`)")]
    Parse {
        line: usize,
        token: String,
        message: String,
    },

    #[error("training error at step {step}: non-finite gradient in `{param}`")]
    NonFiniteGradient { param: String, step: u64 },

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
