use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("longitudinal speed {vx:.4} m/s is below the 0.1 m/s slip threshold")]
    SlipUndefined { vx: f64 },

    #[error("plant diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("lateral position {y} lies on a road edge")]
    RoadEdge { y: f64 },

    #[error("zero force vector has no heading")]
    ZeroForce,

    #[error("QP infeasible: constraint row {row} violated by {violation:e}")]
    Infeasible { row: usize, violation: f64 },

    #[error("understeer denominator {0} is not positive")]
    UnstableUndersteer(f64),

    #[error("sideslip estimate saturated at |beta| = pi/3")]
    SideslipSaturated,

    #[error("non-finite activation at step {step}")]
    NonFiniteActivation { step: usize },

    #[error("training diverged (NaN loss) at epoch {epoch}, iteration {iteration}")]
    NanLoss { epoch: usize, iteration: usize },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("nominal RMSE must be positive")]
    ZeroNominal,

    #[error("{0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
