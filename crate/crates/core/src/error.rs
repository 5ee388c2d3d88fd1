use thiserror::Error;

/// Errors surfaced by the exploration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid environment: {0}")]
    InvalidEnvironment(String),

    #[error("scan requested from an unsafe state (signed distance {distance:.6})")]
    ScanFromUnsafeState { distance: f64 },

    #[error("integration produced a non-finite state")]
    NonFiniteState,

    #[error("center grid is empty: domain smaller than spacing")]
    EmptyCenterSet,

    #[error("degenerate scan: {safe_points} safe points (need at least 3)")]
    DegenerateScan { safe_points: usize },

    #[error("state lies outside the value grid")]
    OutOfGrid,

    #[error("no harvested state clears the value margin {margin}")]
    EmptyOracleOutput { margin: f64 },

    #[error("safe dataset is empty")]
    EmptySafeSet,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("quadratic program infeasible: {0}")]
    Infeasible(crate::qp::InfeasibilityReport),

    #[error("quadratic program hit the iteration cap ({0})")]
    IterationLimit(usize),

    #[error("decay-buffer condition violated by {violations} positive-weight centers after domain enlargement")]
    DecayBufferViolation { violations: usize },

    #[error("composite barrier has no parts")]
    EmptyComposite,

    #[error("no frontier candidates remain outside scanned territory")]
    NoFrontier,

    #[error("non-finite input to safety filter")]
    NonFiniteInput,

    #[error("config error: {0}")]
    Config(String),

    #[error("artifact error: {0}")]
    Artifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
