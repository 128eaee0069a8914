use thiserror::Error;

/// Errors surfaced by the estimation and simulation stack.
#[derive(Debug, Error)]
pub enum RallyError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("simulation diverged: {0}")]
    Divergence(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("optimizer did not converge: {0}")]
    NonConvergence(String),
}

pub type Result<T> = std::result::Result<T, RallyError>;
