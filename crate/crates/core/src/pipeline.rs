//! Experiment pipelines over whole datasets. Every input gets its own seed
//! derived from the master seed, so results do not depend on scheduling;
//! outputs are always in input order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{
    evaluate_properties, recheck_after_extension, run_recursion, ExplainerStep, Outcome, PropertyContext, PropertyReport,
    PropertySuite, RecursionTrace, TraceExport,
};
use crate::explain_feature::{FeatureExplainer, FeatureMask, Scorer, SelectionRule};
use crate::explain_proto::{
    build_digraph, build_from_dataset, self_consistency_report, AutoencoderConfig, Distance, ProtoExplainer, ProtoState,
    PrototypeConfig, PrototypeSystem, TransitionOutcome,
};
use crate::explain_sae::{jaccard_active, patched_predict, sae_step, DynamicsTolerances, LinearSae, SaeExplainer};
use crate::models::{Classifier, Dataset};
use crate::report::{ProtoSample, SaeSample, SaeSetting, TraceRecord};
use crate::Error;

/// Extra applications used to re-check certificates.
pub const EXTENSION_STEPS: usize = 100;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// SplitMix64 over `master` and `parts`.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(master), |acc, &p| mix(acc ^ mix(p)))
}

/// Every fourth sample goes to the test split.
pub fn holdout_split(data: &Dataset) -> Result<(Dataset, Dataset)> {
    let pick = |test: bool| -> Result<Dataset> {
        let (inputs, labels): (Vec<_>, Vec<_>) = (0..data.len())
            .filter(|i| (i % 4 == 3) == test)
            .map(|i| (data.inputs()[i].clone(), data.labels()[i]))
            .unzip();
        Ok(Dataset::new(inputs, labels, data.classes())?)
    };
    Ok((pick(false)?, pick(true)?))
}

fn in_pool<T: Send>(pool: Option<&rayon::ThreadPool>, f: impl FnOnce() -> T + Send) -> T {
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

/// A finished trace with its property evaluation.
#[derive(Debug, Clone)]
pub struct Evaluated<S> {
    pub trace: RecursionTrace<S>,
    pub report: PropertyReport,
    pub export: TraceExport,
    /// For certified traces: whether the certificate survives
    /// [`EXTENSION_STEPS`] more applications.
    pub extension_holds: Option<bool>,
}

fn evaluate<E: ExplainerStep>(
    step: &E,
    trace: RecursionTrace<E::State>,
    suite: &PropertySuite,
    ctx: &PropertyContext,
) -> Result<Evaluated<E::State>> {
    let report = evaluate_properties(step, &trace, suite, ctx)?;
    let extension_holds = if report.certified {
        Some(recheck_after_extension(step, &trace, suite, ctx, EXTENSION_STEPS)?)
    } else {
        None
    };
    let export = TraceExport::new(step, &trace, Some(&report));
    Ok(Evaluated {
        trace,
        report,
        export,
        extension_holds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureParams {
    pub scorer: Scorer,
    pub rule: SelectionRule,
    pub max_remove_fraction: f64,
    pub budget: usize,
}

#[derive(Debug, Clone)]
pub struct FeatureRun {
    pub records: Vec<TraceRecord>,
    pub traces: Vec<Evaluated<FeatureMask>>,
}

/// Explains the model's prediction on each listed input of `data`,
/// starting from the full mask.
pub fn run_feature_pipeline(
    dataset_tag: &str,
    data: &Dataset,
    model: &Classifier,
    params: &FeatureParams,
    suite: &PropertySuite,
    inputs: &[usize],
    seed: u64,
    pool: Option<&rayon::ThreadPool>,
) -> Result<FeatureRun> {
    let results = in_pool(pool, || {
        inputs
            .par_iter()
            .map(|&i| {
                let (x, label) = data.sample(i);
                let step = FeatureExplainer::for_prediction(model, x.to_vec(), params.scorer, params.rule, params.max_remove_fraction)?;
                let trace = run_recursion(&step, FeatureMask::full(x.len()), params.budget)?;
                let ctx = PropertyContext {
                    ground_truth: Some(label),
                    seed: derive_seed(seed, &[i as u64]),
                };
                let ev = evaluate(&step, trace, suite, &ctx)?;
                let record = TraceRecord {
                    dataset: dataset_tag.to_owned(),
                    explainer: params.scorer.tag().to_owned(),
                    input_index: i,
                    true_label: Some(label),
                    total_features: x.len(),
                    outcome: ev.trace.outcome,
                    certified: ev.report.certified,
                    terminal_satisfied: ev.report.terminal_satisfied,
                    fixed_point_features: ev.trace.fixed_point().map(FeatureMask::len),
                    iterate_labels: ev.trace.predictions.iter().map(|p| p.label).collect(),
                    jaccard_start_step1: None,
                    jaccard_start_fixed: None,
                    prototype_self_consistency: None,
                };
                Ok((record, ev))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let (records, traces) = results.into_iter().unzip();
    Ok(FeatureRun { records, traces })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtoParams {
    pub n_prototypes: Vec<usize>,
    pub systems: usize,
    pub latent_dim: usize,
    pub ridge: f64,
    pub rounds: usize,
    pub jitter: f64,
    pub distance: Distance,
    pub budget: usize,
    /// Test inputs per system; `0` uses the whole test split.
    pub test_inputs: usize,
}

impl Default for ProtoParams {
    fn default() -> Self {
        Self {
            n_prototypes: vec![10, 20, 50, 100],
            systems: 20,
            latent_dim: 8,
            ridge: 0.5,
            rounds: 3,
            jitter: 1.0,
            distance: Distance::Euclidean,
            budget: 1000,
            test_inputs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigraphExport {
    pub n_prototypes: usize,
    pub system: usize,
    pub exclude_self: bool,
    pub graph: TransitionOutcome,
}

#[derive(Debug, Clone)]
pub struct ProtoSystemRun {
    pub n_prototypes: usize,
    pub system: usize,
    pub sample: ProtoSample,
    pub records: Vec<TraceRecord>,
    pub traces: Vec<Evaluated<ProtoState>>,
    pub digraphs: Vec<DigraphExport>,
}

#[derive(Debug, Clone, Default)]
pub struct ProtoRun {
    pub systems: Vec<ProtoSystemRun>,
}

impl ProtoRun {
    pub fn samples(&self) -> Vec<ProtoSample> {
        self.systems.iter().map(|s| s.sample.clone()).collect()
    }

    pub fn records(&self) -> Vec<TraceRecord> {
        self.systems.iter().flat_map(|s| s.records.iter().cloned()).collect()
    }
}

pub fn proto_system_seed(master: u64, n_prototypes: usize, system: usize) -> u64 {
    derive_seed(master, &[0x0070_726f_746f, n_prototypes as u64, system as u64])
}

/// Builds the prototype system for one `(|S|, system)` cell of the sweep.
pub fn build_sweep_system(train: &Dataset, params: &ProtoParams, n_prototypes: usize, system: usize, master: u64) -> Result<PrototypeSystem> {
    let seed = proto_system_seed(master, n_prototypes, system);
    let cfg = PrototypeConfig {
        n_prototypes,
        autoencoder: AutoencoderConfig {
            latent_dim: params.latent_dim,
            ridge: params.ridge,
            rounds: params.rounds,
            seed,
        },
        jitter: params.jitter,
        distance: params.distance,
        seed: seed ^ 1,
    };
    Ok(build_from_dataset(train, &cfg)?)
}

/// Measures one prototype system: accuracy, self-consistency, class
/// preservation from prototypes and from test inputs in both modes, and
/// recursion traces from every test input.
pub fn measure_proto_system(
    dataset_tag: &str,
    sys: &PrototypeSystem,
    test: &Dataset,
    params: &ProtoParams,
    suite: &PropertySuite,
    n_prototypes: usize,
    system: usize,
    seed: u64,
) -> Result<ProtoSystemRun> {
    let sc = self_consistency_report(sys)?;
    let count = if params.test_inputs == 0 { test.len() } else { params.test_inputs.min(test.len()) };
    let mut correct = 0usize;
    for i in 0..count {
        let (x, y) = test.sample(i);
        correct += usize::from(sys.nearest_class(x)? == y);
    }
    let mut records = Vec::new();
    let mut traces = Vec::new();
    let mut digraphs = Vec::new();
    let mut class_p_s = [0.0; 2];
    let mut class_p_x = [0.0; 2];
    let mut steps: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (mode, exclude_self) in [false, true].into_iter().enumerate() {
        digraphs.push(DigraphExport {
            n_prototypes,
            system,
            exclude_self,
            graph: build_digraph(sys, exclude_self)?,
        });
        let preserved = (0..sys.len())
            .map(|p| sys.rollout_preserves_class(p, exclude_self))
            .collect::<std::result::Result<Vec<bool>, _>>()?;
        class_p_s[mode] = preserved.iter().filter(|b| **b).count() as f64 / sys.len() as f64;
        let mut kept = 0usize;
        for i in 0..count {
            let (x, y) = test.sample(i);
            let step = ProtoExplainer {
                system: sys,
                input: Some(x.to_vec()),
                exclude_self,
            };
            let trace = run_recursion(&step, ProtoState::Input, params.budget)?;
            let start_class = match trace.states.get(1) {
                Some(ProtoState::Prototype(p)) => sys.class_of(*p),
                _ => unreachable!("the first step always lands on a prototype"),
            };
            let keeps = trace.states[1..].iter().all(|s| match s {
                ProtoState::Prototype(p) => sys.class_of(*p) == start_class,
                ProtoState::Input => false,
            });
            kept += usize::from(keeps);
            if let Some(s) = trace.outcome.convergence_steps() {
                steps[mode].push(s);
            }
            let ctx = PropertyContext {
                ground_truth: Some(y),
                seed: derive_seed(seed, &[i as u64, mode as u64]),
            };
            let ev = evaluate(&step, trace, suite, &ctx)?;
            records.push(TraceRecord {
                dataset: dataset_tag.to_owned(),
                explainer: format!("proto_s{n_prototypes:03}_{}", if exclude_self { "noloop" } else { "loop" }),
                input_index: i,
                true_label: Some(y),
                total_features: sys.len(),
                outcome: ev.trace.outcome,
                certified: ev.report.certified,
                terminal_satisfied: ev.report.terminal_satisfied,
                fixed_point_features: None,
                iterate_labels: ev.trace.predictions.iter().map(|p| p.label).collect(),
                jaccard_start_step1: None,
                jaccard_start_fixed: None,
                prototype_self_consistency: Some(sc.fraction),
            });
            traces.push(ev);
        }
        class_p_x[mode] = if count == 0 { 0.0 } else { kept as f64 / count as f64 };
    }
    let [steps_loop, steps_noloop] = steps;
    Ok(ProtoSystemRun {
        n_prototypes,
        system,
        sample: ProtoSample {
            dataset: dataset_tag.to_owned(),
            n_prototypes,
            seed: proto_system_seed(seed, n_prototypes, system),
            accuracy: if count == 0 { 0.0 } else { correct as f64 / count as f64 },
            self_consistency: sc.fraction,
            class_p_s_loop: class_p_s[0],
            class_p_s_noloop: class_p_s[1],
            class_p_x_loop: class_p_x[0],
            class_p_x_noloop: class_p_x[1],
            steps_loop,
            steps_noloop,
        },
        records,
        traces,
        digraphs,
    })
}

/// The full `|S| × systems` sweep.
pub fn run_proto_sweep(
    dataset_tag: &str,
    train: &Dataset,
    test: &Dataset,
    params: &ProtoParams,
    suite: &PropertySuite,
    seed: u64,
    pool: Option<&rayon::ThreadPool>,
) -> Result<ProtoRun> {
    let cells: Vec<(usize, usize)> = params
        .n_prototypes
        .iter()
        .flat_map(|&n| (0..params.systems).map(move |s| (n, s)))
        .collect();
    let systems = in_pool(pool, || {
        cells
            .par_iter()
            .map(|&(n, s)| {
                let sys = build_sweep_system(train, params, n, s, seed)?;
                measure_proto_system(dataset_tag, &sys, test, params, suite, n, s, seed)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(ProtoRun { systems })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeParams {
    pub budget: usize,
    pub tolerances: DynamicsTolerances,
}

#[derive(Debug, Clone)]
pub struct SaeRun {
    pub records: Vec<TraceRecord>,
    pub samples: Vec<SaeSample>,
    pub traces: Vec<Evaluated<crate::explain_sae::HiddenState>>,
}

/// Runs `z ← ε(z)` from each listed input's hidden activation and
/// evaluates the table settings 0, 1, 2 and the fixed point.
pub fn run_sae_pipeline(
    dataset_tag: &str,
    data: &Dataset,
    model: &Classifier,
    sae: &LinearSae,
    params: &SaeParams,
    suite: &PropertySuite,
    inputs: &[usize],
    seed: u64,
    pool: Option<&rayon::ThreadPool>,
) -> Result<SaeRun> {
    let results = in_pool(pool, || {
        inputs
            .par_iter()
            .map(|&i| {
                let (x, label) = data.sample(i);
                let step = SaeExplainer::new(sae, model, x.to_vec(), &params.tolerances);
                let trace = run_recursion(&step, step.start()?, params.budget)?;
                let ctx = PropertyContext {
                    ground_truth: Some(label),
                    seed: derive_seed(seed, &[i as u64]),
                };
                let ev = evaluate(&step, trace, suite, &ctx)?;
                let pattern = |z: &[f64]| -> Result<Vec<usize>> { Ok(sae.gate(&sae.encoder().vec_mul(z)?)) };
                let start = pattern(&ev.trace.states[0].z)?;
                let mut settings = vec![(SaeSetting::Base, 0), (SaeSetting::Single, 1), (SaeSetting::Double, 2)];
                if let Outcome::FixedPoint { k } = ev.trace.outcome {
                    settings.push((SaeSetting::Constant, k));
                }
                let mut samples = Vec::new();
                for (setting, t) in settings {
                    // diverged traces may stop before t
                    let Some(state) = ev.trace.states.get(t).filter(|s| !step.diverged(s)) else {
                        continue;
                    };
                    let now = pattern(&state.z)?;
                    let next = pattern(&sae_step(sae, &state.z)?.z)?;
                    let pred = patched_predict(model, x, &state.z)?;
                    samples.push(SaeSample {
                        setting,
                        iterations: t,
                        correct: pred.label == label,
                        correct_top3: pred.in_top_k(label, 3),
                        jaccard_step: jaccard_active(&now, &next),
                        jaccard_start: jaccard_active(&start, &now),
                    });
                }
                let find = |s: SaeSetting| samples.iter().find(|v| v.setting == s);
                let record = TraceRecord {
                    dataset: dataset_tag.to_owned(),
                    explainer: "sae".into(),
                    input_index: i,
                    true_label: Some(label),
                    total_features: sae.h_dim(),
                    outcome: ev.trace.outcome,
                    certified: ev.report.certified,
                    terminal_satisfied: ev.report.terminal_satisfied,
                    fixed_point_features: None,
                    iterate_labels: ev.trace.predictions.iter().map(|p| p.label).collect(),
                    jaccard_start_step1: find(SaeSetting::Base).map(|s| s.jaccard_step),
                    jaccard_start_fixed: find(SaeSetting::Constant).map(|s| s.jaccard_start),
                    prototype_self_consistency: None,
                };
                Ok((record, samples, ev))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut run = SaeRun {
        records: Vec::new(),
        samples: Vec::new(),
        traces: Vec::new(),
    };
    for (r, s, ev) in results {
        run.records.push(r);
        run.samples.extend(s);
        run.traces.push(ev);
    }
    Ok(run)
}
