use std::io;

use thiserror::Error;

use crate::state::HarvesterState;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite state {0:?}")]
    NonFiniteState(HarvesterState),

    #[error("action {value} exceeds bound {bound}")]
    ConstraintViolation { value: f64, bound: f64 },

    #[error("integration diverged at t = {t} s (state {state:?})")]
    Divergence { t: f64, state: HarvesterState },

    #[error("ambiguous steady state: peak-to-peak {ptp} rad is within 10% of threshold {threshold} rad")]
    AmbiguousAttractor { ptp: f64, threshold: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("spring stretch {0} m is not positive; pretension is too small")]
    SlackSpring(f64),

    #[error("dataset contains a single class")]
    SingleClass,

    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
