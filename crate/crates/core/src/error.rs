use thiserror::Error;

/// Errors raised by geometry construction, solvers and configuration.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("unsupported geometry: {0}")]
    UnsupportedGeometry(String),

    /// A modelling assumption (A1-A4) is violated by the data.
    #[error("assumption {assumption} violated: {detail}")]
    Assumption {
        assumption: &'static str,
        detail: String,
    },

    #[error("linear solver did not converge after {iterations} iterations (relative residual {residual:.3e}) in {context}")]
    Solver {
        context: String,
        iterations: usize,
        residual: f64,
    },

    #[error("numerical consistency error: {0}")]
    Consistency(String),

    /// Maximum or monotonicity principle breached by a discrete solution.
    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("Picard iteration did not converge on window [{t_start:.4}, {t_end:.4}] after {iterations} iterations (W = {w_metric:.3e}); try a smaller window T0")]
    NonConvergence {
        t_start: f64,
        t_end: f64,
        iterations: usize,
        w_metric: f64,
    },

    #[error("configuration error at `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error("I/O error: {0}")]
    Io(String),
}

impl Error {
    pub fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            detail: detail.into(),
        }
    }

    pub fn assumption(assumption: &'static str, detail: impl Into<String>) -> Self {
        Error::Assumption {
            assumption,
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. }
            | Error::Assumption { .. }
            | Error::Geometry(_)
            | Error::Resolution(_)
            | Error::UnsupportedGeometry(_) => 2,
            Error::Solver { .. } | Error::NonConvergence { .. } | Error::Io(_) => 3,
            Error::Consistency(_) | Error::Invariant(_) => 4,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
