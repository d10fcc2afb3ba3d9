//! Feature-subset explainers over the lattice of feature masks.
//!
//! The recursion state is a [`FeatureMask`]; each step rebuilds the model
//! input from the untouched original `x0` with the zero-masking support
//! function, scores the kept features and shrinks the mask. The selection
//! step never adds features, so every trace is a descending chain and stops
//! after at most `d + 1` masks.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{ExplainerStep, StepError, StepKind, TraceState};
use crate::models::{Classifier, ModelError, Prediction};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("feature index {index} out of range for dim {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("invalid selection: {0}")]
    InvalidSelection(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = FeatureError> = std::result::Result<T, E>;

/// The subset of feature indices an explanation keeps.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawMask")]
pub struct FeatureMask {
    kept: BTreeSet<usize>,
    dim: usize,
}

#[derive(Deserialize)]
struct RawMask {
    kept: Vec<usize>,
    dim: usize,
}

impl TryFrom<RawMask> for FeatureMask {
    type Error = FeatureError;

    fn try_from(raw: RawMask) -> Result<Self> {
        FeatureMask::new(raw.dim, raw.kept)
    }
}

impl FeatureMask {
    pub fn new(dim: usize, kept: impl IntoIterator<Item = usize>) -> Result<Self> {
        let kept: BTreeSet<usize> = kept.into_iter().collect();
        if let Some(&index) = kept.iter().find(|&&i| i >= dim) {
            return Err(FeatureError::IndexOutOfRange { index, dim });
        }
        Ok(Self { kept, dim })
    }

    pub fn full(dim: usize) -> Self {
        Self {
            kept: (0..dim).collect(),
            dim,
        }
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            kept: BTreeSet::new(),
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.kept.contains(&i)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.kept.iter().copied()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.iter().collect()
    }

    pub fn is_subset(&self, other: &FeatureMask) -> bool {
        self.dim == other.dim && self.kept.is_subset(&other.kept)
    }

    pub fn without(&self, i: usize) -> Self {
        let mut m = self.clone();
        m.kept.remove(&i);
        m
    }
}

/// Relevance scores, one per input feature; zero outside the mask that
/// produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores(pub Vec<f64>);

impl ImportanceScores {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Zero-masking support function: kept features copy `x`, the rest are 0.
pub fn apply_support(x: &[f64], mask: &FeatureMask) -> Result<Vec<f64>> {
    if x.len() != mask.dim() {
        return Err(FeatureError::DimensionMismatch {
            expected: mask.dim(),
            actual: x.len(),
        });
    }
    Ok(x.iter()
        .enumerate()
        .map(|(i, &v)| if mask.contains(i) { v } else { 0.0 })
        .collect())
}

/// Drop in target probability when each kept feature is occluded on its own.
pub fn importance_occlusion(model: &Classifier, x: &[f64], mask: &FeatureMask, target: usize) -> Result<ImportanceScores> {
    let base = model.predict(&apply_support(x, mask)?)?.distribution[target];
    let mut scores = vec![0.0; x.len()];
    for i in mask.iter() {
        let occluded = model.predict(&apply_support(x, &mask.without(i))?)?.distribution[target];
        scores[i] = base - occluded;
    }
    Ok(ImportanceScores(scores))
}

/// Gradient × input of the target log-probability at the masked input.
pub fn importance_gradient_input(model: &Classifier, x: &[f64], mask: &FeatureMask, target: usize) -> Result<ImportanceScores> {
    let grad = model.input_gradient(&apply_support(x, mask)?, target)?;
    let scores = (0..x.len())
        .map(|i| if mask.contains(i) { grad[i] * x[i] } else { 0.0 })
        .collect();
    Ok(ImportanceScores(scores))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    Occlusion,
    GradientInput,
}

impl Scorer {
    pub fn score(self, model: &Classifier, x: &[f64], mask: &FeatureMask, target: usize) -> Result<ImportanceScores> {
        match self {
            Scorer::Occlusion => importance_occlusion(model, x, mask, target),
            Scorer::GradientInput => importance_gradient_input(model, x, mask, target),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Scorer::Occlusion => "occlusion",
            Scorer::GradientInput => "gradient_input",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Keep the `k` highest scores.
    TopK(usize),
    /// Keep scores `>= τ`.
    Threshold(f64),
}

/// One deflationary selection step.
///
/// Features picked by `rule` are candidates to stay; of the rest, at most
/// `⌈ρ·|mask|⌉` with the smallest `|score|` are removed. Ties go to the
/// lowest index in both orderings.
pub fn select_deflationary(
    scores: &ImportanceScores,
    mask: &FeatureMask,
    rule: SelectionRule,
    max_remove_fraction: f64,
) -> Result<FeatureMask> {
    if !(max_remove_fraction > 0.0 && max_remove_fraction <= 1.0) {
        return Err(FeatureError::InvalidSelection(format!(
            "max_remove_fraction must be in (0, 1], got {max_remove_fraction}"
        )));
    }
    if scores.0.len() != mask.dim() {
        return Err(FeatureError::DimensionMismatch {
            expected: mask.dim(),
            actual: scores.0.len(),
        });
    }
    let s = scores.as_slice();
    let candidate: BTreeSet<usize> = match rule {
        SelectionRule::TopK(k) => {
            let mut ranked = mask.indices();
            ranked.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
            ranked.into_iter().take(k).collect()
        }
        SelectionRule::Threshold(tau) => {
            if !tau.is_finite() {
                return Err(FeatureError::InvalidSelection("threshold must be finite".into()));
            }
            mask.iter().filter(|&i| s[i] >= tau).collect()
        }
    };
    if candidate.len() == mask.len() {
        return Ok(mask.clone());
    }
    let budget = (max_remove_fraction * mask.len() as f64).ceil() as usize;
    let mut removable: Vec<usize> = mask.iter().filter(|i| !candidate.contains(i)).collect();
    removable.sort_by(|&a, &b| s[a].abs().total_cmp(&s[b].abs()).then(a.cmp(&b)));
    let mut next = mask.clone();
    for i in removable.into_iter().take(budget) {
        next.kept.remove(&i);
    }
    Ok(next)
}

/// A feature explainer bound to one model and one original input.
#[derive(Debug, Clone)]
pub struct FeatureExplainer<'a> {
    pub model: &'a Classifier,
    pub x0: Vec<f64>,
    pub target: usize,
    pub scorer: Scorer,
    pub rule: SelectionRule,
    pub max_remove_fraction: f64,
}

impl<'a> FeatureExplainer<'a> {
    /// Explains the model's own prediction on `x0`.
    pub fn for_prediction(
        model: &'a Classifier,
        x0: Vec<f64>,
        scorer: Scorer,
        rule: SelectionRule,
        max_remove_fraction: f64,
    ) -> Result<Self> {
        let target = model.predict(&x0)?.label;
        Ok(Self {
            model,
            x0,
            target,
            scorer,
            rule,
            max_remove_fraction,
        })
    }

    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    pub fn step(&self, mask: &FeatureMask) -> Result<FeatureMask> {
        explainer_step_feature(self.model, &self.x0, mask, self.target, self.scorer, self.rule, self.max_remove_fraction)
    }
}

impl ExplainerStep for FeatureExplainer<'_> {
    type State = FeatureMask;
    type Key = FeatureMask;

    fn kind(&self) -> StepKind {
        StepKind::Feature
    }

    fn apply(&self, mask: &FeatureMask) -> Result<FeatureMask, StepError> {
        Ok(self.step(mask)?)
    }

    fn key(&self, mask: &FeatureMask) -> Option<FeatureMask> {
        Some(mask.clone())
    }

    fn predict(&self, mask: &FeatureMask) -> Result<Prediction, StepError> {
        Ok(self.model.predict(&apply_support(&self.x0, mask)?)?)
    }

    fn realize(&self, mask: &FeatureMask) -> Result<Vec<f64>, StepError> {
        Ok(apply_support(&self.x0, mask)?)
    }

    fn predict_point(&self, point: &[f64]) -> Result<Prediction, StepError> {
        Ok(self.model.predict(point)?)
    }

    fn export_state(&self, mask: &FeatureMask) -> TraceState {
        TraceState::Feature {
            kept: mask.indices(),
            dim: mask.dim(),
        }
    }
}

/// support → score → deflationary selection.
pub fn explainer_step_feature(
    model: &Classifier,
    x0: &[f64],
    mask: &FeatureMask,
    target: usize,
    scorer: Scorer,
    rule: SelectionRule,
    max_remove_fraction: f64,
) -> Result<FeatureMask> {
    if mask.is_empty() {
        if x0.len() != mask.dim() {
            return Err(FeatureError::DimensionMismatch {
                expected: mask.dim(),
                actual: x0.len(),
            });
        }
        return Ok(mask.clone());
    }
    let scores = scorer.score(model, x0, mask, target)?;
    select_deflationary(&scores, mask, rule, max_remove_fraction)
}
