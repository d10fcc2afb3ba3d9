//! Recursive explanation analysis.
//!
//! Explainers are applied to their own output until the sequence reaches a
//! fixed point, enters a cycle, diverges or exhausts its budget. The crate
//! provides feature-mask, prototype and sparse-autoencoder explainers over
//! small from-scratch models, a generic recursion engine with property
//! certificates, and report aggregation.

pub mod engine;
pub mod explain_feature;
pub mod explain_proto;
pub mod explain_sae;
pub mod linalg;
pub mod models;
pub mod pipeline;
pub mod report;

pub use engine::{
    detect_cycle, evaluate_properties, run_recursion, ExplainerStep, Outcome, Property, PropertyContext, PropertyReport,
    PropertySuite, RecursionTrace, TraceExport,
};
pub use explain_feature::{FeatureExplainer, FeatureMask, Scorer, SelectionRule};
pub use explain_proto::{PrototypeSystem, TransitionOutcome};
pub use explain_sae::{DynamicsClass, DynamicsTag, HiddenState, LinearSae};
pub use linalg::{Matrix, Spectrum};
pub use models::{Classifier, Dataset, Prediction};
pub use report::{ClassCensus, SummaryRow, TraceRecord};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
    #[error(transparent)]
    Model(#[from] models::ModelError),
    #[error(transparent)]
    Feature(#[from] explain_feature::FeatureError),
    #[error(transparent)]
    Proto(#[from] explain_proto::ProtoError),
    #[error(transparent)]
    Sae(#[from] explain_sae::SaeError),
    #[error(transparent)]
    Engine(#[from] engine::EngineError),
    #[error(transparent)]
    Report(#[from] report::ReportError),
}
