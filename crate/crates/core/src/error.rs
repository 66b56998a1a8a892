use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    /// Structurally or numerically singular linear system.
    #[error("singular linear system: {0}")]
    Singular(String),
    #[error("linear solver did not converge: residual {residual:.3e} after {iterations} iterations (tol {tol:.3e})")]
    NoConvergence {
        residual: f64,
        iterations: usize,
        tol: f64,
    },
    /// Boundary-layer solution failed to stabilize inside the truncated stripe.
    #[error("boundary-layer decay failure: {0}")]
    DecayFailure(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
