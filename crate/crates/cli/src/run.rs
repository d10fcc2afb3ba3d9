//! Experiment dispatch and report writing.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use recurx::engine::TraceExport;
use recurx::explain_proto::{fit_linear_autoencoder, read_prototypes_csv, AutoencoderConfig, PrototypeSystem};
use recurx::explain_sae::{run_linear_mc, train_sae, write_mc_csv, DynamicsTag, DynamicsTolerances, LinearSae, McConfig, McRecord, SaeTrainConfig};
use recurx::linalg::format_f64;
use recurx::models::{generate_synthetic, train, Classifier, Dataset, SyntheticSpec, TrainConfig};
use recurx::pipeline::{
    derive_seed, holdout_split, measure_proto_system, run_feature_pipeline, run_proto_sweep, run_sae_pipeline, Evaluated, FeatureParams, ProtoParams, ProtoRun,
    SaeParams,
};
use recurx::report::{aggregate, aggregate_proto, aggregate_sae, class_census, emit, emit_json, read_json_file, CsvRow, Format, GroupKey, TraceRecord};

use crate::config::{ExperimentConfig, ExperimentKind, OUT_DIR_ENV};

const TOOL: &str = "recurx";

// seed stream labels
const DATA_STREAM: u64 = 1;
const MODEL_STREAM: u64 = 2;
const EXPLAIN_STREAM: u64 = 3;
const SAE_STREAM: u64 = 4;
const MC_STREAM: u64 = 5;

#[derive(Debug)]
pub struct RunError {
    pub phase: &'static str,
    pub message: String,
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.phase, self.message)
    }
}

impl std::error::Error for RunError {}

trait Phase<T> {
    fn phase(self, phase: &'static str) -> Result<T, RunError>;
}

impl<T, E: fmt::Display> Phase<T> for Result<T, E> {
    fn phase(self, phase: &'static str) -> Result<T, RunError> {
        self.map_err(|e| RunError {
            phase,
            message: e.to_string(),
        })
    }
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
}

/// `--out`, then the environment, then the config.
pub fn resolve_out_dir(cfg: &ExperimentConfig, opts: &RunOptions) -> PathBuf {
    opts.out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| cfg.output.dir.clone())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CertificateCheck {
    pub certified: usize,
    pub extension_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub kind: ExperimentKind,
    pub config_sha256: String,
    pub seed: u64,
    pub files: Vec<String>,
    pub certificates: Option<CertificateCheck>,
}

/// One entry of `traces.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub explainer: String,
    pub input_index: usize,
    pub extension_holds: Option<bool>,
    pub trace: TraceExport,
}

#[derive(Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

struct Writer {
    dir: PathBuf,
    files: Vec<String>,
}

impl Writer {
    fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), RunError> {
        emit_json(value, &self.dir.join(name)).phase("write")?;
        self.files.push(name.to_owned());
        Ok(())
    }

    fn csv<T: CsvRow + Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), RunError> {
        emit(rows, Format::Csv, &self.dir.join(name)).phase("write")?;
        self.files.push(name.to_owned());
        Ok(())
    }
}

/// Runs the experiment described by `cfg` and writes every artifact.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutput, RunError> {
    let seed = opts.seed.unwrap_or(cfg.seed);
    let pool = match opts.jobs {
        Some(n) => Some(rayon::ThreadPoolBuilder::new().num_threads(n).build().phase("thread pool")?),
        None => None,
    };
    let dir = resolve_out_dir(cfg, opts);
    fs::create_dir_all(&dir).phase("write")?;
    let mut w = Writer { dir, files: Vec::new() };
    let certificates = match cfg.kind {
        ExperimentKind::Feature => Some(run_feature(cfg, seed, pool.as_ref(), &mut w)?),
        ExperimentKind::Proto => Some(run_proto(cfg, seed, pool.as_ref(), &mut w)?),
        ExperimentKind::Sae => Some(run_sae(cfg, seed, pool.as_ref(), &mut w)?),
        ExperimentKind::LinearMc => {
            run_mc(cfg, seed, pool.as_ref(), &mut w)?;
            None
        }
    };
    let mut files = w.files.clone();
    files.sort();
    let manifest = Manifest {
        tool: TOOL.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        kind: cfg.kind,
        config_sha256: cfg.source_sha256.clone(),
        seed,
        files,
        certificates,
    };
    w.json("manifest.json", &manifest)?;
    Ok(RunOutput { dir: w.dir, manifest })
}

fn load_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset, RunError> {
    let d = &cfg.dataset;
    match &d.path {
        Some(path) => {
            let file = fs::File::open(path).phase("load dataset")?;
            Dataset::read_csv(file, None).phase("load dataset")
        }
        None => generate_synthetic(&SyntheticSpec {
            kind: d.kind,
            classes: d.classes,
            dim: d.dim,
            per_class: d.per_class,
            noise: d.noise,
            seed: derive_seed(seed, &[DATA_STREAM]),
        })
        .phase("generate dataset"),
    }
}

fn load_model(cfg: &ExperimentConfig, train_set: &Dataset, seed: u64) -> Result<Classifier, RunError> {
    let m = &cfg.model;
    let model: Classifier = match &m.path {
        Some(path) => read_json_file(path).phase("load model")?,
        None => train(
            train_set,
            &TrainConfig {
                architecture: m.architecture,
                hidden: m.hidden,
                epochs: m.epochs,
                lr: m.lr,
                batch_size: m.batch_size,
                seed: derive_seed(seed, &[MODEL_STREAM]),
            },
        )
        .phase("train model")?,
    };
    if model.input_dim() != train_set.dim() || model.classes() < train_set.classes() {
        return Err(RunError {
            phase: "load model",
            message: format!(
                "model expects {} inputs and {} classes, dataset has {} and {}",
                model.input_dim(),
                model.classes(),
                train_set.dim(),
                train_set.classes()
            ),
        });
    }
    Ok(model)
}

fn certificate_check<S>(traces: &[Evaluated<S>]) -> CertificateCheck {
    CertificateCheck {
        certified: traces.iter().filter(|t| t.report.certified).count(),
        extension_violations: traces.iter().filter(|t| t.extension_holds == Some(false)).count(),
    }
}

fn trace_entries<S>(records: &[TraceRecord], traces: Vec<Evaluated<S>>) -> Vec<TraceEntry> {
    records
        .iter()
        .zip(traces)
        .map(|(r, t)| TraceEntry {
            explainer: r.explainer.clone(),
            input_index: r.input_index,
            extension_holds: t.extension_holds,
            trace: t.export,
        })
        .collect()
}

/// `summary.csv`, `summary_by_class.csv` and `census.json` from records.
pub fn write_record_reports(records: &[TraceRecord], classes: usize, dir: &Path) -> Result<Vec<String>, RunError> {
    let mut w = Writer {
        dir: dir.to_owned(),
        files: Vec::new(),
    };
    write_summaries(records, classes, &mut w)?;
    Ok(w.files)
}

fn write_summaries(records: &[TraceRecord], classes: usize, w: &mut Writer) -> Result<(), RunError> {
    let rows = aggregate(records, &[GroupKey::Dataset, GroupKey::Explainer]).phase("aggregate")?;
    w.csv("summary.csv", &rows)?;
    let by_class = aggregate(records, &[GroupKey::Dataset, GroupKey::Explainer, GroupKey::TrueLabel]).phase("aggregate")?;
    w.csv("summary_by_class.csv", &by_class)?;
    let census = class_census(records, classes).phase("census")?;
    w.json("census.json", &census)
}

fn input_indices(requested: usize, available: usize) -> Vec<usize> {
    (0..requested.min(available)).collect()
}

fn run_feature(cfg: &ExperimentConfig, seed: u64, pool: Option<&rayon::ThreadPool>, w: &mut Writer) -> Result<CertificateCheck, RunError> {
    let data = load_dataset(cfg, seed)?;
    let (train_set, test_set) = holdout_split(&data).phase("split dataset")?;
    let model = load_model(cfg, &train_set, seed)?;
    let f = &cfg.feature;
    let params = FeatureParams {
        scorer: f.scorer,
        rule: f.rule,
        max_remove_fraction: f.max_remove_fraction,
        budget: cfg.budget,
    };
    let inputs = input_indices(f.inputs, test_set.len());
    let run = run_feature_pipeline(
        &cfg.dataset_tag(),
        &test_set,
        &model,
        &params,
        &cfg.suite(),
        &inputs,
        derive_seed(seed, &[EXPLAIN_STREAM]),
        pool,
    )
    .phase("feature recursion")?;
    let check = certificate_check(&run.traces);
    w.json("records.json", &run.records)?;
    write_summaries(&run.records, data.classes(), w)?;
    w.json("model.json", &model)?;
    if cfg.output.traces {
        w.json("traces.json", &trace_entries(&run.records, run.traces))?;
    }
    Ok(check)
}

fn proto_params(cfg: &ExperimentConfig) -> ProtoParams {
    let p = &cfg.proto;
    ProtoParams {
        n_prototypes: p.n_prototypes.clone(),
        systems: p.systems,
        latent_dim: p.latent_dim,
        ridge: p.ridge,
        rounds: p.rounds,
        jitter: p.jitter,
        distance: p.distance,
        budget: cfg.budget,
        test_inputs: p.test_inputs,
    }
}

fn run_proto(cfg: &ExperimentConfig, seed: u64, pool: Option<&rayon::ThreadPool>, w: &mut Writer) -> Result<CertificateCheck, RunError> {
    let data = load_dataset(cfg, seed)?;
    let (train_set, test_set) = holdout_split(&data).phase("split dataset")?;
    let params = proto_params(cfg);
    let suite = cfg.suite();
    let tag = cfg.dataset_tag();
    let run = match &cfg.proto.prototypes_path {
        Some(path) => {
            let sys = load_prototype_system(path, &train_set, &params, seed)?;
            let one = measure_proto_system(&tag, &sys, &test_set, &params, &suite, sys.len(), 0, seed).phase("prototype recursion")?;
            ProtoRun { systems: vec![one] }
        }
        None => run_proto_sweep(&tag, &train_set, &test_set, &params, &suite, seed, pool).phase("prototype recursion")?,
    };
    let records = run.records();
    let table = aggregate_proto(&run.samples()).phase("aggregate")?;
    w.csv("proto_table.csv", &table)?;
    w.json("records.json", &records)?;
    write_summaries(&records, data.classes(), w)?;
    let digraphs: Vec<_> = run.systems.iter().flat_map(|s| s.digraphs.iter().cloned()).collect();
    w.json("digraphs.json", &digraphs)?;
    let traces: Vec<_> = run.systems.into_iter().flat_map(|s| s.traces).collect();
    let check = certificate_check(&traces);
    if cfg.output.traces {
        w.json("traces.json", &trace_entries(&records, traces))?;
    }
    Ok(check)
}

fn load_prototype_system(path: &Path, train_set: &Dataset, params: &ProtoParams, seed: u64) -> Result<PrototypeSystem, RunError> {
    let file = fs::File::open(path).phase("load prototypes")?;
    let prototypes = read_prototypes_csv(file).phase("load prototypes")?;
    let (enc, dec) = fit_linear_autoencoder(
        train_set,
        &AutoencoderConfig {
            latent_dim: prototypes.first().map_or(params.latent_dim, |p| p.latent.len()),
            ridge: params.ridge,
            rounds: params.rounds,
            seed: derive_seed(seed, &[EXPLAIN_STREAM]),
        },
    )
    .phase("fit autoencoder")?;
    PrototypeSystem::new(prototypes, enc, dec, params.distance, train_set.classes()).phase("load prototypes")
}

fn run_sae(cfg: &ExperimentConfig, seed: u64, pool: Option<&rayon::ThreadPool>, w: &mut Writer) -> Result<CertificateCheck, RunError> {
    let data = load_dataset(cfg, seed)?;
    let (train_set, test_set) = holdout_split(&data).phase("split dataset")?;
    let model = load_model(cfg, &train_set, seed)?;
    let s = &cfg.sae;
    let sae = match &s.weights_path {
        Some(path) => LinearSae::read_manifest(path).phase("load sae")?,
        None => {
            let hidden = train_set
                .inputs()
                .iter()
                .map(|x| model.hidden_activation(x))
                .collect::<Result<Vec<_>, _>>()
                .phase("train sae")?;
            train_sae(
                &hidden,
                &SaeTrainConfig {
                    h_dim: s.h_dim,
                    k: s.k,
                    nonlinearity: s.nonlinearity,
                    epochs: s.epochs,
                    lr: s.lr,
                    seed: derive_seed(seed, &[SAE_STREAM]),
                },
            )
            .phase("train sae")?
        }
    };
    let params = SaeParams {
        budget: cfg.budget,
        tolerances: DynamicsTolerances {
            zero: s.zero_tol,
            conv: s.conv_tol,
            diverge: s.diverge_tol,
        },
    };
    let tag = cfg.dataset_tag();
    let inputs = input_indices(s.inputs, test_set.len());
    let run = run_sae_pipeline(
        &tag,
        &test_set,
        &model,
        &sae,
        &params,
        &cfg.suite(),
        &inputs,
        derive_seed(seed, &[EXPLAIN_STREAM]),
        pool,
    )
    .phase("sae recursion")?;
    let check = certificate_check(&run.traces);
    w.csv("sae_table.csv", &aggregate_sae(&tag, &run.samples))?;
    w.json("records.json", &run.records)?;
    write_summaries(&run.records, data.classes(), w)?;
    w.json("model.json", &model)?;
    sae.write_dir(&w.dir.join("sae")).phase("write")?;
    w.files.extend(["sae/decode.csv", "sae/encode.csv", "sae/sae.json"].map(String::from));
    if cfg.output.traces {
        w.json("traces.json", &trace_entries(&run.records, run.traces))?;
    }
    Ok(check)
}

/// One regime of the Monte Carlo summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummaryRow {
    pub regime: String,
    pub matrices: usize,
    pub converged_percent: f64,
    pub diverged_percent: f64,
    pub contracts_to_zero: usize,
    pub converges: usize,
    pub diverges: usize,
    pub bounded_non_convergent: usize,
}

impl CsvRow for McSummaryRow {
    const HEADER: &'static [&'static str] = &[
        "regime",
        "matrices",
        "converged_percent",
        "diverged_percent",
        "contracts_to_zero",
        "converges",
        "diverges",
        "bounded_non_convergent",
    ];

    fn fields(&self) -> Vec<String> {
        vec![
            self.regime.clone(),
            self.matrices.to_string(),
            format_f64(self.converged_percent),
            format_f64(self.diverged_percent),
            self.contracts_to_zero.to_string(),
            self.converges.to_string(),
            self.diverges.to_string(),
            self.bounded_non_convergent.to_string(),
        ]
    }

    fn parse(f: &[&str]) -> Result<Self, String> {
        let u = |s: &str| s.parse::<usize>().map_err(|e| format!("`{s}`: {e}"));
        let x = |s: &str| s.parse::<f64>().map_err(|e| format!("`{s}`: {e}"));
        Ok(Self {
            regime: f[0].to_owned(),
            matrices: u(f[1])?,
            converged_percent: x(f[2])?,
            diverged_percent: x(f[3])?,
            contracts_to_zero: u(f[4])?,
            converges: u(f[5])?,
            diverges: u(f[6])?,
            bounded_non_convergent: u(f[7])?,
        })
    }
}

/// Rows for the contractive (max norm < 1) and expansive regimes.
pub fn summarize_mc(records: &[McRecord]) -> Vec<McSummaryRow> {
    let mut groups: BTreeMap<&str, Vec<&McRecord>> = BTreeMap::new();
    for r in records {
        let regime = if r.max_eig_norm < 1.0 { "contractive" } else { "expansive" };
        groups.entry(regime).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(regime, rs)| {
            let count = |tag: DynamicsTag| rs.iter().filter(|r| r.class == tag).count();
            let zero = count(DynamicsTag::ContractsToZero);
            let conv = count(DynamicsTag::ConvergesNonzeroFixedPoint);
            let div = count(DynamicsTag::Diverges);
            let n = rs.len();
            McSummaryRow {
                regime: regime.to_owned(),
                matrices: n,
                converged_percent: 100.0 * (zero + conv) as f64 / n as f64,
                diverged_percent: 100.0 * div as f64 / n as f64,
                contracts_to_zero: zero,
                converges: conv,
                diverges: div,
                bounded_non_convergent: count(DynamicsTag::BoundedNonConvergent),
            }
        })
        .collect()
}

fn run_mc(cfg: &ExperimentConfig, seed: u64, pool: Option<&rayon::ThreadPool>, w: &mut Writer) -> Result<(), RunError> {
    let mc = &cfg.linear_mc;
    let s = &cfg.sae;
    let records = run_linear_mc(
        &McConfig {
            dim: mc.dim,
            contractive: mc.contractive,
            expansive: mc.expansive,
            budget: mc.budget,
            seed: derive_seed(seed, &[MC_STREAM]),
            tolerances: DynamicsTolerances {
                zero: s.zero_tol,
                conv: s.conv_tol,
                diverge: s.diverge_tol,
            },
        },
        pool,
    )
    .phase("monte carlo")?;
    let mut buf = Vec::new();
    write_mc_csv(&records, &mut buf).phase("write")?;
    recurx::report::write_file(&w.dir.join("monte_carlo.csv"), &buf).phase("write")?;
    w.files.push("monte_carlo.csv".into());
    w.csv("linear_mc_summary.csv", &summarize_mc(&records))
}

/// Re-aggregates a `records.json` into `dir`. `classes` defaults to
/// one past the largest label seen.
pub fn rereport(records_path: &Path, classes: Option<usize>, dir: &Path) -> Result<Vec<String>, RunError> {
    let records: Vec<TraceRecord> = read_json_file(records_path).phase("read records")?;
    let classes = classes.unwrap_or_else(|| records.iter().filter_map(|r| r.true_label).max().map_or(0, |m| m + 1));
    fs::create_dir_all(dir).phase("write")?;
    write_record_reports(&records, classes, dir)
}

