use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{function}: argument {value} is outside the domain ({expected})")]
    Domain {
        function: &'static str,
        value: f64,
        expected: &'static str,
    },

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("matrix is singular or numerically rank deficient: {0}")]
    Singular(String),

    #[error("sample is empty")]
    EmptySample,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate construction: {0}")]
    Degenerate(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain(function: &'static str, value: f64, expected: &'static str) -> Error {
    Error::Domain {
        function,
        value,
        expected,
    }
}
