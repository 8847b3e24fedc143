use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point {point:?} lies inside the excluded region (|x - c| < {radius})")]
    PointExcluded { point: Vec<f64>, radius: f64 },

    #[error("metric is not positive definite at {point:?}")]
    NotPositiveDefinite { point: Vec<f64> },

    #[error("bad family parameters: {0}")]
    BadParams(String),

    #[error("family is not asymptotically flat (tau = {tau}, need tau > {required})")]
    NotAsymptoticallyFlat { tau: f64, required: f64 },

    #[error("{quantity} did not converge: fit residual {residual:.3e} exceeds tolerance {tolerance:.3e}")]
    NonConverged {
        quantity: String,
        residual: f64,
        tolerance: f64,
    },

    #[error("mass is zero (|m| = {0:.3e}); centre of mass undefined")]
    ZeroMass(f64),

    #[error("centre of mass requested for a family that is not parity-compatible")]
    ParityIncompatible,

    #[error("no sign change of the weighted mean curvature on [{lo}, {hi}]")]
    NoSignChange { lo: f64, hi: f64 },

    #[error("family is not spherically symmetric")]
    NotSpherical,

    #[error("operation requires dimension {expected}, got {got}")]
    WrongDimension { expected: String, got: usize },

    #[error("precondition failed: {0}")]
    PreconditionFailed(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
