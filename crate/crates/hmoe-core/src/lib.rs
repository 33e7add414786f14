//! Hierarchical mixture-of-experts representations of multi-head and gated
//! attention: model evaluation, least-squares fitting, Voronoi parameter
//! losses, identifiability diagnostics, and the convergence-rate experiment
//! harness.

pub mod activation;
pub mod bridge;
pub mod dataset;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod fixtures;
pub mod identifiability;
pub mod measure;
pub mod model;
pub mod report;
pub mod seed;
pub mod voronoi;

pub use activation::ActivationKind;
pub use error::{ExperimentError, FitError, IdentError, ModelError, VoronoiError};
pub use measure::{MixingMeasure, ModelSpec, Variant};
