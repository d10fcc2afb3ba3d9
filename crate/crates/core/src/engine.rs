//! Recursion driver: repeatedly applies an explainer step, stops at fixed
//! points, cycles, divergence or the step budget, and evaluates property
//! suites over every recorded iterate.

use std::collections::HashMap;
use std::fmt::Debug;
use std::hash::Hash;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{total_variation, Prediction};

pub const DEFAULT_BUDGET: usize = 1000;

pub type StepError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("budget must be >= 1")]
    InvalidBudget,
    #[error("step is not deterministic: state {index} produced different successors")]
    NonDeterministicStep { index: usize },
    #[error("no cycle found within {budget} states")]
    NoCycleWithinBudget { budget: usize },
    #[error("missing context: {0}")]
    MissingContext(String),
    #[error("invalid property: {0}")]
    InvalidProperty(String),
    #[error("explainer step failed: {0}")]
    Step(#[source] StepError),
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Feature,
    Prototype,
    Sae,
}

/// Kind-tagged state as written to trace files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceState {
    Feature { kept: Vec<usize>, dim: usize },
    Input,
    Prototype { index: usize },
    Sae { z: Vec<f64>, active: Vec<usize> },
}

/// One application of an explainer, composed with its support function.
///
/// Steps with a discrete state space return `Some` from [`key`]; those get
/// exact cycle detection. Continuous steps return `None` and rely on
/// [`same_state`] tolerances and [`diverged`].
///
/// [`key`]: ExplainerStep::key
/// [`same_state`]: ExplainerStep::same_state
/// [`diverged`]: ExplainerStep::diverged
pub trait ExplainerStep {
    type State: Clone + PartialEq + Debug;
    type Key: Eq + Hash;

    fn kind(&self) -> StepKind;

    fn apply(&self, state: &Self::State) -> Result<Self::State, StepError>;

    fn key(&self, state: &Self::State) -> Option<Self::Key>;

    fn same_state(&self, a: &Self::State, b: &Self::State) -> bool {
        a == b
    }

    fn diverged(&self, _state: &Self::State) -> bool {
        false
    }

    /// Model prediction at this iterate.
    fn predict(&self, state: &Self::State) -> Result<Prediction, StepError>;

    /// The point the model actually sees at this iterate; stability
    /// sampling perturbs it.
    fn realize(&self, state: &Self::State) -> Result<Vec<f64>, StepError>;

    fn predict_point(&self, point: &[f64]) -> Result<Prediction, StepError>;

    fn active_set(&self, _state: &Self::State) -> Option<Vec<usize>> {
        None
    }

    fn export_state(&self, state: &Self::State) -> TraceState;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Outcome {
    FixedPoint { k: usize },
    Cycle { entry: usize, period: usize },
    Diverged { k: usize },
    BudgetExhausted,
}

impl Outcome {
    pub fn is_fixed_point(&self) -> bool {
        matches!(self, Outcome::FixedPoint { .. })
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Outcome::FixedPoint { .. } => "fixed_point",
            Outcome::Cycle { .. } => "cycle",
            Outcome::Diverged { .. } => "diverged",
            Outcome::BudgetExhausted => "budget_exhausted",
        }
    }

    /// Index of the last new state before the recursion repeats: `k` for a
    /// fixed point, `n + m - 1` for a cycle.
    pub fn convergence_steps(&self) -> Option<usize> {
        match *self {
            Outcome::FixedPoint { k } => Some(k),
            Outcome::Cycle { entry, period } => Some(entry + period - 1),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecursionTrace<S> {
    pub kind: StepKind,
    pub states: Vec<S>,
    pub outcome: Outcome,
    pub predictions: Vec<Prediction>,
    pub active_sets: Vec<Option<Vec<usize>>>,
}

impl<S> RecursionTrace<S> {
    pub fn fixed_point(&self) -> Option<&S> {
        match self.outcome {
            Outcome::FixedPoint { k } => self.states.get(k),
            _ => None,
        }
    }

    pub fn last_state(&self) -> &S {
        self.states.last().expect("trace holds the start state")
    }
}

/// Iterates `step` from `start` for at most `budget` applications.
///
/// A fixed point at `k` means `states[k]` and `states[k + 1]` agree under
/// the step's equality contract; it is confirmed by one more application.
/// For discrete steps any repeat of an earlier state is reported as a cycle
/// with its minimal entry and period.
pub fn run_recursion<E: ExplainerStep>(step: &E, start: E::State, budget: usize) -> Result<RecursionTrace<E::State>> {
    if budget == 0 {
        return Err(EngineError::InvalidBudget);
    }
    let mut states = vec![start];
    let mut seen: HashMap<E::Key, usize> = HashMap::new();
    if let Some(k) = step.key(&states[0]) {
        seen.insert(k, 0);
    }
    let mut outcome = None;
    for i in 0..budget {
        let current = &states[i];
        if step.diverged(current) {
            outcome = Some(Outcome::Diverged { k: i });
            break;
        }
        let next = step.apply(current).map_err(EngineError::Step)?;
        if step.same_state(current, &next) {
            let confirm = step.apply(&next).map_err(EngineError::Step)?;
            if step.same_state(&next, &confirm) {
                states.push(next);
                outcome = Some(Outcome::FixedPoint { k: i });
                break;
            }
            if step.key(&next).is_some() {
                return Err(EngineError::NonDeterministicStep { index: i });
            }
        }
        if let Some(key) = step.key(&next) {
            if let Some(&entry) = seen.get(&key) {
                states.push(next);
                outcome = Some(Outcome::Cycle {
                    entry,
                    period: i + 1 - entry,
                });
                break;
            }
            seen.insert(key, i + 1);
        }
        states.push(next);
    }
    let outcome = match outcome {
        Some(o) => o,
        None if step.diverged(states.last().expect("non-empty")) => Outcome::Diverged { k: states.len() - 1 },
        None => Outcome::BudgetExhausted,
    };
    finish_trace(step, states, outcome)
}

fn finish_trace<E: ExplainerStep>(step: &E, states: Vec<E::State>, outcome: Outcome) -> Result<RecursionTrace<E::State>> {
    let diverged_at = match outcome {
        Outcome::Diverged { k } => Some(k),
        _ => None,
    };
    let mut predictions = Vec::with_capacity(states.len());
    for (i, s) in states.iter().enumerate() {
        // a diverged state may be too large to push through the model
        if diverged_at.is_some_and(|k| i >= k) {
            break;
        }
        predictions.push(step.predict(s).map_err(EngineError::Step)?);
    }
    let active_sets = states.iter().map(|s| step.active_set(s)).collect();
    Ok(RecursionTrace {
        kind: step.kind(),
        states,
        outcome,
        predictions,
        active_sets,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cycle {
    pub entry: usize,
    pub period: usize,
}

/// Brent's cycle detection on the sequence `start, f(start), f(f(start)), …`.
///
/// Finds the minimal entry `n` and period `m`; any cycle with
/// `n + m <= max_states` is found.
pub fn detect_cycle<T, F>(start: T, mut successor: F, max_states: usize) -> Result<Cycle>
where
    T: Clone + PartialEq,
    F: FnMut(&T) -> T,
{
    let limit = max_states.saturating_mul(3).max(1);
    let mut evaluations = 1usize;
    let mut power = 1usize;
    let mut period = 1usize;
    let mut tortoise = start.clone();
    let mut hare = successor(&start);
    while tortoise != hare {
        if power == period {
            tortoise = hare.clone();
            power *= 2;
            period = 0;
        }
        hare = successor(&hare);
        period += 1;
        evaluations += 1;
        if evaluations > limit {
            return Err(EngineError::NoCycleWithinBudget { budget: max_states });
        }
    }
    let mut tortoise = start.clone();
    let mut hare = start;
    for _ in 0..period {
        hare = successor(&hare);
    }
    let mut entry = 0;
    while tortoise != hare {
        tortoise = successor(&tortoise);
        hare = successor(&hare);
        entry += 1;
    }
    Ok(Cycle { entry, period })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "property", rename_all = "snake_case")]
pub enum Property {
    /// Label at each iterate equals the label of the starting point.
    LabelPreserved,
    /// Label equals `label`, or the context ground truth when unset.
    CorrectLabel {
        #[serde(default)]
        label: Option<usize>,
    },
    TopKAgreement {
        k: usize,
        #[serde(default)]
        label: Option<usize>,
    },
    /// Total variation to the terminal iterate's distribution is at most `tau`.
    DistributionClose { tau: f64 },
    /// No label flip among `samples` uniform L∞ perturbations of size
    /// `radius`. Can only falsify, never verify.
    LocalStabilitySampled { radius: f64, samples: usize },
}

impl Property {
    pub fn tag(&self) -> &'static str {
        match self {
            Property::LabelPreserved => "label_preserved",
            Property::CorrectLabel { .. } => "correct_label",
            Property::TopKAgreement { .. } => "top_k_agreement",
            Property::DistributionClose { .. } => "distribution_close",
            Property::LocalStabilitySampled { .. } => "local_stability_sampled",
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EngineError::InvalidProperty(m.to_owned()));
        match *self {
            Property::TopKAgreement { k: 0, .. } => bad("top_k_agreement needs k >= 1"),
            Property::DistributionClose { tau } if !(tau > 0.0 && tau <= 1.0) => bad("distribution_close needs 0 < tau <= 1"),
            Property::LocalStabilitySampled { radius, samples } if !(radius > 0.0) || samples == 0 => {
                bad("local_stability_sampled needs radius > 0 and samples >= 1")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PropertySuite {
    pub properties: Vec<Property>,
}

impl PropertySuite {
    pub fn new(properties: Vec<Property>) -> Result<Self> {
        let suite = Self { properties };
        suite.validate()?;
        Ok(suite)
    }

    pub fn validate(&self) -> Result<()> {
        self.properties.iter().try_for_each(Property::validate)
    }

    pub fn is_empty(&self) -> bool {
        self.properties.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertyContext {
    pub ground_truth: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub iteration: usize,
    pub property: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub properties: Vec<String>,
    /// `matrix[iteration][property]`.
    pub matrix: Vec<Vec<bool>>,
    pub first_violation: Option<Violation>,
    /// Fixed point reached and every property holds at every iterate.
    pub certified: bool,
    /// Fixed point reached and every property holds at the fixed point.
    pub terminal_satisfied: bool,
}

/// Evaluates `suite` at every state of `trace` that has a prediction.
pub fn evaluate_properties<E: ExplainerStep>(
    step: &E,
    trace: &RecursionTrace<E::State>,
    suite: &PropertySuite,
    ctx: &PropertyContext,
) -> Result<PropertyReport> {
    suite.validate()?;
    let resolve = |label: Option<usize>, what: &str| {
        label
            .or(ctx.ground_truth)
            .ok_or_else(|| EngineError::MissingContext(format!("{what} needs a label or ground truth")))
    };
    let start_label = trace.predictions.first().map(|p| p.label);
    let terminal = trace.predictions.last();
    let mut matrix = Vec::with_capacity(trace.predictions.len());
    for (i, pred) in trace.predictions.iter().enumerate() {
        let mut row = Vec::with_capacity(suite.properties.len());
        for prop in &suite.properties {
            let holds = match *prop {
                Property::LabelPreserved => Some(pred.label) == start_label,
                Property::CorrectLabel { label } => pred.label == resolve(label, "correct_label")?,
                Property::TopKAgreement { k, label } => pred.in_top_k(resolve(label, "top_k_agreement")?, k),
                Property::DistributionClose { tau } => {
                    let t = terminal.expect("non-empty predictions");
                    total_variation(&pred.distribution, &t.distribution) <= tau
                }
                Property::LocalStabilitySampled { radius, samples } => {
                    let point = step.realize(&trace.states[i]).map_err(EngineError::Step)?;
                    sampled_stable(step, &point, pred.label, radius, samples, ctx.seed)?
                }
            };
            row.push(holds);
        }
        matrix.push(row);
    }
    let first_violation = matrix.iter().enumerate().find_map(|(i, row)| {
        row.iter().position(|ok| !ok).map(|j| Violation {
            iteration: i,
            property: suite.properties[j].tag().to_owned(),
        })
    });
    let fixed = trace.outcome.is_fixed_point();
    let all_recorded = trace.predictions.len() == trace.states.len();
    let terminal_satisfied = fixed && matrix.last().is_some_and(|row| row.iter().all(|ok| *ok));
    Ok(PropertyReport {
        properties: suite.properties.iter().map(|p| p.tag().to_owned()).collect(),
        certified: fixed && all_recorded && first_violation.is_none(),
        terminal_satisfied,
        matrix,
        first_violation,
    })
}

/// Seeds the stability sampler from the point itself so identical states
/// always draw identical perturbations.
fn point_seed(seed: u64, point: &[f64]) -> u64 {
    // FNV-1a over the bit patterns
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for v in point {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

fn sampled_stable<E: ExplainerStep>(step: &E, point: &[f64], label: usize, radius: f64, samples: usize, seed: u64) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(point_seed(seed, point));
    let mut perturbed = point.to_vec();
    for _ in 0..samples {
        for (p, &x) in perturbed.iter_mut().zip(point) {
            *p = x + rng.random_range(-radius..=radius);
        }
        if step.predict_point(&perturbed).map_err(EngineError::Step)?.label != label {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Re-applies the step `extra` times past a fixed point and re-evaluates
/// the suite over the extended trace. Returns whether the certificate
/// still holds; uncertified traces return `false`.
pub fn recheck_after_extension<E: ExplainerStep>(
    step: &E,
    trace: &RecursionTrace<E::State>,
    suite: &PropertySuite,
    ctx: &PropertyContext,
    extra: usize,
) -> Result<bool> {
    let Outcome::FixedPoint { k } = trace.outcome else {
        return Ok(false);
    };
    let mut states = trace.states.clone();
    for _ in 0..extra {
        let last = states.last().expect("non-empty");
        let next = step.apply(last).map_err(EngineError::Step)?;
        if !step.same_state(last, &next) {
            return Ok(false);
        }
        states.push(next);
    }
    let extended = finish_trace(step, states, Outcome::FixedPoint { k })?;
    Ok(evaluate_properties(step, &extended, suite, ctx)?.certified)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionExport {
    pub label: usize,
    pub distribution: Vec<f64>,
}

/// Serialized form of a trace; the field names are a stable interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceExport {
    pub kind: StepKind,
    pub states: Vec<TraceState>,
    pub outcome: Outcome,
    pub predictions: Vec<PredictionExport>,
    pub properties: Option<PropertyReport>,
}

impl TraceExport {
    pub fn new<E: ExplainerStep>(step: &E, trace: &RecursionTrace<E::State>, report: Option<&PropertyReport>) -> Self {
        Self {
            kind: trace.kind,
            states: trace.states.iter().map(|s| step.export_state(s)).collect(),
            outcome: trace.outcome,
            predictions: trace
                .predictions
                .iter()
                .map(|p| PredictionExport {
                    label: p.label,
                    distribution: p.distribution.clone(),
                })
                .collect(),
            properties: report.cloned(),
        }
    }
}
