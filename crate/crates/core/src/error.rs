use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Inconsistent shapes or otherwise malformed model description.
    ModelDefinition(String),
    /// Argument outside the domain of an operation (time outside the horizon, θ outside the box).
    Domain(String),
    UnsupportedMethod(String),
    /// An internal invariant was violated (e.g. the thinning envelope was exceeded).
    Internal(String),
    /// The intensity vanishes at an observed event, so derivatives are undefined.
    Infeasible(String),
    EstimationFailed(String),
    NumericalFailure(String),
    Config(String),
    DegenerateInformation(String),
    DegenerateModel(String),
    Singular(String),
    Divergence(String),
    InvalidPath(String),
}

impl Error {
    /// Whether the error stems from user input (model, configuration, path) rather than
    /// from a numerical breakdown.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::ModelDefinition(_)
                | Error::Domain(_)
                | Error::UnsupportedMethod(_)
                | Error::Config(_)
                | Error::InvalidPath(_)
        )
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, msg) = match self {
            Error::ModelDefinition(m) => ("model definition error", m),
            Error::Domain(m) => ("domain error", m),
            Error::UnsupportedMethod(m) => ("unsupported method", m),
            Error::Internal(m) => ("internal assertion failed", m),
            Error::Infeasible(m) => ("infeasible parameter", m),
            Error::EstimationFailed(m) => ("estimation failed", m),
            Error::NumericalFailure(m) => ("numerical failure", m),
            Error::Config(m) => ("configuration error", m),
            Error::DegenerateInformation(m) => ("degenerate information", m),
            Error::DegenerateModel(m) => ("degenerate model", m),
            Error::Singular(m) => ("singular matrix", m),
            Error::Divergence(m) => ("iteration diverged", m),
            Error::InvalidPath(m) => ("invalid point path", m),
        };
        write!(f, "{kind}: {msg}")
    }
}

impl core::error::Error for Error {}
