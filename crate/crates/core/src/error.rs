use thiserror::Error;

/// Error type shared across the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("linear algebra error: {0}")]
    LinAlg(String),

    #[error("arithmetic domain error: {0}")]
    Domain(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Solver ran out of iterations. Carries the best iterate found and its
    /// residual so callers can decide whether to fall back or fail hard.
    #[error("solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    Iteration {
        iterations: usize,
        residual: f64,
        best: Vec<f64>,
    },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("bracket error: {0}")]
    Bracket(String),

    #[error("sampler error at iteration {iteration}: {msg}")]
    Sampler { iteration: usize, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
