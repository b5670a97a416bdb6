use alloc::string::String;
use thiserror::Error;

/// Errors surfaced by the core pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoreError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-finite loss at step {step}: {term}")]
    NonFiniteLoss { step: u64, term: &'static str },

    #[error("precision prior requires beta > 0")]
    NonPositivePrecision,

    #[error("permute_dims needs a batch of at least 2 samples, got {0}")]
    BatchTooSmall(usize),

    #[error("validation set is empty")]
    EmptyValidation,

    #[error("fractile p={0} leaves no interval (need p < 0.5)")]
    DegenerateFractile(f64),

    #[error("stochastic search exhausted after {iters} iterations ({accepted}/{wanted} accepted)")]
    SearchExhausted {
        iters: usize,
        accepted: usize,
        wanted: usize,
    },

    #[error("calibration needs at least {min} validation samples, got {got}")]
    TooFewSamples { min: usize, got: usize },

    #[error("SC vector metric {sc} does not match threshold metric {thresholds}")]
    MetricMismatch { sc: &'static str, thresholds: &'static str },

    #[error("image {h}x{w} smaller than the {win}x{win} similarity window")]
    ImageTooSmall { h: usize, w: usize, win: usize },

    #[error("EM did not converge after {restarts} restarts")]
    EmNotConverged { restarts: usize },

    #[error("{0}")]
    InvalidArgument(String),
}

pub type CoreResult<T> = core::result::Result<T, CoreError>;
