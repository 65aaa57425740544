//! Crate-wide structured error surface.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DanError>;

#[derive(Debug, Error)]
pub enum DanError {
    #[error("{primitive}: shape mismatch: {detail}")]
    Shape { primitive: &'static str, detail: String },

    #[error("{primitive}: non-finite output value")]
    NonFinite { primitive: &'static str },

    #[error("backward: node {0} is not a scalar loss")]
    NonScalarLoss(usize),

    #[error("gradient_check: step {0} outside (1e-8, 1e-3)")]
    BadStep(f64),

    #[error("degenerate belief: total mass {mass:.3e} (model/observation inconsistency)")]
    DegenerateBelief { mass: f64 },

    #[error("environment generation failed for seed {seed}: {reason}")]
    MazeGen { seed: u64, reason: String },

    #[error("invalid state ({x},{y},{th}) on a size-{n} map")]
    InvalidState { x: usize, y: usize, th: usize, n: usize },

    #[error("value iteration did not converge within {0} iterations")]
    NoConverge(usize),

    #[error("pomdp solver bounds exceeded: {0}")]
    OracleBounds(String),

    #[error("expert rollout exceeded step cap {cap} on env seed {seed}")]
    ExpertCap { cap: usize, seed: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training ({stage}): {reason}")]
    Training { stage: String, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
