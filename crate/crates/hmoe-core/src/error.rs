//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised while constructing or evaluating models.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("index out of range in {context}: {index} >= {bound}")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("empty input in {context}")]
    EmptyInput { context: &'static str },
    #[error("invalid shape in {context}: {detail}")]
    InvalidShape {
        context: &'static str,
        detail: String,
    },
}

/// Errors raised by the least-squares fitting loop.
#[derive(Debug, Error)]
pub enum FitError {
    #[error("non-finite {what} at epoch {epoch}")]
    NonFinite { what: &'static str, epoch: usize },
    #[error("invalid optimizer configuration: {detail}")]
    InvalidConfig { detail: String },
    #[error("fitted channel count {k_fit} is below the ground-truth channel count {k_true}")]
    TooFewChannels { k_fit: usize, k_true: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Errors raised by identifiability checks.
#[derive(Debug, Error)]
pub enum IdentError {
    #[error("unsupported derivative order {order}; only orders up to 2 are implemented")]
    UnsupportedOrder { order: usize },
    #[error("non-finite value for family member `{descriptor}` at sample point {point}")]
    NonFiniteMember { descriptor: String, point: usize },
    #[error("sample too small: {got} points for {members} members (need at least {need})")]
    SampleTooSmall {
        got: usize,
        members: usize,
        need: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Errors raised by Voronoi-loss computations.
#[derive(Debug, Error)]
pub enum VoronoiError {
    #[error("measures disagree on {what}: {left} vs {right}")]
    ShapeMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("expert matching is brute-force only up to {max} experts per head; got {got}")]
    TooManyExperts { got: usize, max: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Errors raised by experiment orchestration and reporting.
#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment configuration: {detail}")]
    InvalidConfig { detail: String },
    #[error("rate fit needs at least 3 usable points, got {got}")]
    TooFewPoints { got: usize },
    #[error("{failed} of {total} trials aborted, exceeding the 20% budget")]
    AbortBudget { failed: usize, total: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {detail}")]
    Parse { path: String, detail: String },
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Voronoi(#[from] VoronoiError),
    #[error(transparent)]
    Model(#[from] ModelError),
}
