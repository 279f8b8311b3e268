//! Error types shared by every module.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CoreError>;

/// Failure categories of the numerical laboratory.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A configuration value violates a precondition (resolution < 3, bad
    /// relaxation factor, empty schedule, ...).
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Inconsistent geometry (obstacle not contained in the box, ...).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// A point or stencil left the grid hull or the solve region.
    #[error("out of domain: {0}")]
    OutOfDomain(String),

    /// Iterative solver did not reach the requested tolerance.
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    Convergence { iterations: usize, residual: f64 },

    /// Coefficient matrix is not usable (not SPD, or unsupported with cut cells).
    #[error("coefficient error: {0}")]
    Coefficient(String),

    /// Oblique direction is not uniformly transversal (W·e_d < δ).
    #[error("obliqueness error: {0}")]
    Obliqueness(String),

    /// Explicit time step violated its stability bound.
    #[error("step error: {0}")]
    Step(String),

    /// A fit or measurement had too little data to be meaningful.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Two operands live on different grids.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Thin-obstacle active set iteration started cycling.
    #[error("active set cycling after {iterations} iterations (history {history:?})")]
    ActiveSetCycling {
        iterations: usize,
        /// Active-set sizes seen along the iteration.
        history: Vec<usize>,
    },

    /// Hodograph inversion hit a non-monotone column.
    #[error("hodograph failure: {0}")]
    Hodograph(String),

    /// Matrix quadratic form degenerated (Aν·ν ≤ 0).
    #[error("ellipticity error: {0}")]
    Ellipticity(String),

    /// I/O and serialization errors from the report/config layer.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON parse error, with line/column from the parser.
    #[error("config parse error: {0}")]
    Json(#[from] serde_json::Error),
}
