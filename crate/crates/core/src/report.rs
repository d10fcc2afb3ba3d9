//! Aggregation of recursion traces into summary tables and a per-class
//! fixed-point census, with CSV and JSON emission.
//!
//! Standard deviations are population deviations. Floats in CSV files are
//! printed with 17 significant digits so files round-trip exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Outcome;
use crate::linalg::format_f64;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("group {0} has no traces")]
    EmptyGroup(String),
    #[error("trace {index} has no ground-truth label")]
    MissingLabels { index: usize },
    #[error("io failure on {path}: {reason}")]
    IoFailure { path: String, reason: String },
    #[error("csv line {line}: {reason}")]
    Parse { line: u64, reason: String },
}

pub type Result<T, E = ReportError> = std::result::Result<T, E>;

/// Everything the tables need from one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub dataset: String,
    pub explainer: String,
    pub input_index: usize,
    pub true_label: Option<usize>,
    pub total_features: usize,
    pub outcome: Outcome,
    pub certified: bool,
    pub terminal_satisfied: bool,
    /// Mask size at the fixed point, for feature traces.
    pub fixed_point_features: Option<usize>,
    /// Predicted label at every recorded iterate.
    pub iterate_labels: Vec<usize>,
    pub jaccard_start_step1: Option<f64>,
    pub jaccard_start_fixed: Option<f64>,
    /// Fraction of self-consistent prototypes in the system that produced
    /// the trace.
    pub prototype_self_consistency: Option<f64>,
}

impl TraceRecord {
    /// Certification as tabulated: an empty-mask fixed point converges but
    /// never counts as certified.
    pub fn counts_as_certified(&self) -> bool {
        self.certified && self.fixed_point_features != Some(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    Dataset,
    Explainer,
    TrueLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub explainer: String,
    /// True label of the group, or `*` when not grouped by label.
    pub class: String,
    pub traces: usize,
    pub total_features: usize,
    pub fixed_point_features_mean: Option<f64>,
    pub fixed_point_features_std: Option<f64>,
    /// Percent of traces that count as certified.
    pub certified_percent: f64,
    /// Percent of traces whose fixed point satisfies the suite.
    pub terminal_percent: f64,
    /// Percent of traces ending in a fixed point or cycle.
    pub converged_percent: f64,
    pub steps_mean: Option<f64>,
    pub steps_std: Option<f64>,
    pub steps_min: Option<usize>,
    pub steps_max: Option<usize>,
    pub jaccard_start_step1: Option<f64>,
    pub jaccard_start_fixed: Option<f64>,
    /// Mean percent of self-consistent prototypes; kept apart from
    /// `certified_percent`.
    pub prototype_self_consistency_percent: Option<f64>,
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.max(0.0).sqrt()))
}

/// Mean over values sorted first, so the result does not depend on input
/// order.
fn stable_sorted(mut values: Vec<f64>) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    values
}

fn percent(count: usize, total: usize) -> f64 {
    100.0 * count as f64 / total as f64
}

fn group_key(r: &TraceRecord, keys: &[GroupKey]) -> (String, String, String) {
    let star = || "*".to_owned();
    (
        if keys.contains(&GroupKey::Dataset) { r.dataset.clone() } else { star() },
        if keys.contains(&GroupKey::Explainer) { r.explainer.clone() } else { star() },
        if keys.contains(&GroupKey::TrueLabel) {
            r.true_label.map_or_else(|| "none".to_owned(), |l| l.to_string())
        } else {
            star()
        },
    )
}

/// Groups `records` by `keys` and reduces every group to a row. Rows are
/// ordered by group key; every statistic is invariant to record order.
pub fn aggregate(records: &[TraceRecord], keys: &[GroupKey]) -> Result<Vec<SummaryRow>> {
    if records.is_empty() {
        return Err(ReportError::EmptyGroup(format!("{keys:?}")));
    }
    let mut groups: BTreeMap<(String, String, String), Vec<&TraceRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(group_key(r, keys)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((dataset, explainer, class), group)| summarize(dataset, explainer, class, &group))
        .collect()
}

fn summarize(dataset: String, explainer: String, class: String, group: &[&TraceRecord]) -> Result<SummaryRow> {
    if group.is_empty() {
        return Err(ReportError::EmptyGroup(format!("{dataset}/{explainer}/{class}")));
    }
    let n = group.len();
    let fp = stable_sorted(group.iter().filter_map(|r| r.fixed_point_features.map(|v| v as f64)).collect());
    let steps: Vec<usize> = {
        let mut s: Vec<usize> = group.iter().filter_map(|r| r.outcome.convergence_steps()).collect();
        s.sort_unstable();
        s
    };
    let steps_f: Vec<f64> = steps.iter().map(|&s| s as f64).collect();
    let mean_of = |f: &dyn Fn(&TraceRecord) -> Option<f64>| {
        mean_std(&stable_sorted(group.iter().filter_map(|r| f(r)).collect())).map(|(m, _)| m)
    };
    let fp_stats = mean_std(&fp);
    let step_stats = mean_std(&steps_f);
    Ok(SummaryRow {
        dataset,
        explainer,
        class,
        traces: n,
        total_features: group.iter().map(|r| r.total_features).max().unwrap_or(0),
        fixed_point_features_mean: fp_stats.map(|s| s.0),
        fixed_point_features_std: fp_stats.map(|s| s.1),
        certified_percent: percent(group.iter().filter(|r| r.counts_as_certified()).count(), n),
        terminal_percent: percent(group.iter().filter(|r| r.terminal_satisfied).count(), n),
        converged_percent: percent(group.iter().filter(|r| r.outcome.convergence_steps().is_some()).count(), n),
        steps_mean: step_stats.map(|s| s.0),
        steps_std: step_stats.map(|s| s.1),
        steps_min: steps.first().copied(),
        steps_max: steps.last().copied(),
        jaccard_start_step1: mean_of(&|r| r.jaccard_start_step1),
        jaccard_start_fixed: mean_of(&|r| r.jaccard_start_fixed),
        prototype_self_consistency_percent: mean_of(&|r| r.prototype_self_consistency.map(|f| 100.0 * f)),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCount {
    pub label: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCensusRow {
    pub class: usize,
    pub traces: usize,
    pub certified_fixed_points: usize,
    pub fixed_point_exists: bool,
    /// Iterates of uncertified traces whose label differs from `class`.
    pub examined_iterates: usize,
    /// Where those iterates land, by predicted label.
    pub label_distribution: Vec<LabelCount>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCensus {
    pub classes: Vec<ClassCensusRow>,
}

/// Per true class: whether any certified fixed point was found, and for
/// uncertified traces the labels of the iterates that left the class.
pub fn class_census(records: &[TraceRecord], classes: usize) -> Result<ClassCensus> {
    let mut rows: Vec<ClassCensusRow> = (0..classes)
        .map(|class| ClassCensusRow {
            class,
            traces: 0,
            certified_fixed_points: 0,
            fixed_point_exists: false,
            examined_iterates: 0,
            label_distribution: Vec::new(),
        })
        .collect();
    let mut dist: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); classes];
    for (index, r) in records.iter().enumerate() {
        let class = r.true_label.ok_or(ReportError::MissingLabels { index })?;
        if class >= classes {
            return Err(ReportError::MissingLabels { index });
        }
        let row = &mut rows[class];
        row.traces += 1;
        if r.counts_as_certified() {
            row.certified_fixed_points += 1;
            continue;
        }
        for &label in r.iterate_labels.iter().filter(|&&l| l != class) {
            *dist[class].entry(label).or_insert(0) += 1;
            row.examined_iterates += 1;
        }
    }
    for (row, d) in rows.iter_mut().zip(dist) {
        row.fixed_point_exists = row.certified_fixed_points > 0;
        row.label_distribution = d.into_iter().map(|(label, count)| LabelCount { label, count }).collect();
    }
    Ok(ClassCensus { classes: rows })
}

/// Iteration settings of the SAE table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaeSetting {
    Base,
    Single,
    Double,
    Constant,
}

impl SaeSetting {
    pub const ALL: [SaeSetting; 4] = [SaeSetting::Base, SaeSetting::Single, SaeSetting::Double, SaeSetting::Constant];

    pub fn as_str(self) -> &'static str {
        match self {
            SaeSetting::Base => "base",
            SaeSetting::Single => "single",
            SaeSetting::Double => "double",
            SaeSetting::Constant => "constant",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }
}

/// One trace evaluated at one setting `t`: `A(t)` is the active set the
/// SAE selects from `z_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeSample {
    pub setting: SaeSetting,
    pub iterations: usize,
    pub correct: bool,
    pub correct_top3: bool,
    /// `J(A(t), A(t+1))`.
    pub jaccard_step: f64,
    /// `J(A(0), A(t))`.
    pub jaccard_start: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeRow {
    pub dataset: String,
    pub setting: String,
    pub traces: usize,
    pub iterations_mean: Option<f64>,
    pub iterations_std: Option<f64>,
    pub correctness: Option<f64>,
    pub correctness_top3: Option<f64>,
    pub jaccard_start_step1: Option<f64>,
    pub jaccard_start_fixed: Option<f64>,
}

/// Always four rows, base to constant; settings with no samples have
/// empty statistics.
pub fn aggregate_sae(dataset: &str, samples: &[SaeSample]) -> Vec<SaeRow> {
    SaeSetting::ALL
        .iter()
        .map(|&setting| {
            let group: Vec<&SaeSample> = samples.iter().filter(|s| s.setting == setting).collect();
            let stat = |f: &dyn Fn(&SaeSample) -> f64| mean_std(&stable_sorted(group.iter().map(|s| f(s)).collect()));
            let iters = stat(&|s| s.iterations as f64);
            SaeRow {
                dataset: dataset.to_owned(),
                setting: setting.as_str().to_owned(),
                traces: group.len(),
                iterations_mean: iters.map(|s| s.0),
                iterations_std: iters.map(|s| s.1),
                correctness: stat(&|s| f64::from(u8::from(s.correct))).map(|s| s.0),
                correctness_top3: stat(&|s| f64::from(u8::from(s.correct_top3))).map(|s| s.0),
                jaccard_start_step1: stat(&|s| s.jaccard_step).map(|s| s.0),
                jaccard_start_fixed: stat(&|s| s.jaccard_start).map(|s| s.0),
            }
        })
        .collect()
}

/// One prototype system's measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtoSample {
    pub dataset: String,
    pub n_prototypes: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub self_consistency: f64,
    pub class_p_s_loop: f64,
    pub class_p_s_noloop: f64,
    pub class_p_x_loop: f64,
    pub class_p_x_noloop: f64,
    /// Convergence steps of every recursion from a test input.
    pub steps_loop: Vec<usize>,
    pub steps_noloop: Vec<usize>,
}

/// Prototype table row; percentages are means over systems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtoRow {
    pub dataset: String,
    pub n_prototypes: usize,
    pub systems: usize,
    pub accuracy_percent: f64,
    pub self_consistency_percent: f64,
    pub class_p_s_loop_percent: f64,
    pub class_p_s_noloop_percent: f64,
    pub class_p_x_loop_percent: f64,
    pub class_p_x_noloop_percent: f64,
    pub steps_loop_min: Option<usize>,
    pub steps_loop_mean: Option<f64>,
    pub steps_loop_max: Option<usize>,
    pub steps_noloop_min: Option<usize>,
    pub steps_noloop_mean: Option<f64>,
    pub steps_noloop_max: Option<usize>,
}

/// Rows by `(dataset, n_prototypes)`.
pub fn aggregate_proto(samples: &[ProtoSample]) -> Result<Vec<ProtoRow>> {
    if samples.is_empty() {
        return Err(ReportError::EmptyGroup("prototype sweep".into()));
    }
    let mut groups: BTreeMap<(String, usize), Vec<&ProtoSample>> = BTreeMap::new();
    for s in samples {
        groups.entry((s.dataset.clone(), s.n_prototypes)).or_default().push(s);
    }
    Ok(groups
        .into_iter()
        .map(|((dataset, n_prototypes), g)| {
            let pct = |f: &dyn Fn(&ProtoSample) -> f64| {
                100.0 * mean_std(&stable_sorted(g.iter().map(|s| f(s)).collect())).map_or(0.0, |m| m.0)
            };
            let steps = |f: &dyn Fn(&ProtoSample) -> &Vec<usize>| {
                let mut all: Vec<usize> = g.iter().flat_map(|s| f(s).iter().copied()).collect();
                all.sort_unstable();
                let mean = mean_std(&all.iter().map(|&v| v as f64).collect::<Vec<_>>()).map(|m| m.0);
                (all.first().copied(), mean, all.last().copied())
            };
            let (l_min, l_mean, l_max) = steps(&|s| &s.steps_loop);
            let (n_min, n_mean, n_max) = steps(&|s| &s.steps_noloop);
            ProtoRow {
                dataset,
                n_prototypes,
                systems: g.len(),
                accuracy_percent: pct(&|s| s.accuracy),
                self_consistency_percent: pct(&|s| s.self_consistency),
                class_p_s_loop_percent: pct(&|s| s.class_p_s_loop),
                class_p_s_noloop_percent: pct(&|s| s.class_p_s_noloop),
                class_p_x_loop_percent: pct(&|s| s.class_p_x_loop),
                class_p_x_noloop_percent: pct(&|s| s.class_p_x_noloop),
                steps_loop_min: l_min,
                steps_loop_mean: l_mean,
                steps_loop_max: l_max,
                steps_noloop_min: n_min,
                steps_noloop_mean: n_mean,
                steps_noloop_max: n_max,
            }
        })
        .collect())
}

/// Fixed-order CSV encoding of a row type.
pub trait CsvRow: Sized {
    const HEADER: &'static [&'static str];
    fn fields(&self) -> Vec<String>;
    fn parse(fields: &[&str]) -> std::result::Result<Self, String>;
}

fn opt_f(v: Option<f64>) -> String {
    v.map(format_f64).unwrap_or_default()
}

fn opt_u(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn p_f(s: &str) -> std::result::Result<f64, String> {
    s.parse().map_err(|e| format!("`{s}`: {e}"))
}

fn p_u(s: &str) -> std::result::Result<usize, String> {
    s.parse().map_err(|e| format!("`{s}`: {e}"))
}

fn p_of(s: &str) -> std::result::Result<Option<f64>, String> {
    if s.is_empty() {
        Ok(None)
    } else {
        p_f(s).map(Some)
    }
}

fn p_ou(s: &str) -> std::result::Result<Option<usize>, String> {
    if s.is_empty() {
        Ok(None)
    } else {
        p_u(s).map(Some)
    }
}

impl CsvRow for SummaryRow {
    const HEADER: &'static [&'static str] = &[
        "dataset",
        "explainer",
        "class",
        "traces",
        "total_features",
        "fixed_point_features_mean",
        "fixed_point_features_std",
        "certified_percent",
        "terminal_percent",
        "converged_percent",
        "steps_mean",
        "steps_std",
        "steps_min",
        "steps_max",
        "jaccard_start_step1",
        "jaccard_start_fixed",
        "prototype_self_consistency_percent",
    ];

    fn fields(&self) -> Vec<String> {
        vec![
            self.dataset.clone(),
            self.explainer.clone(),
            self.class.clone(),
            self.traces.to_string(),
            self.total_features.to_string(),
            opt_f(self.fixed_point_features_mean),
            opt_f(self.fixed_point_features_std),
            format_f64(self.certified_percent),
            format_f64(self.terminal_percent),
            format_f64(self.converged_percent),
            opt_f(self.steps_mean),
            opt_f(self.steps_std),
            opt_u(self.steps_min),
            opt_u(self.steps_max),
            opt_f(self.jaccard_start_step1),
            opt_f(self.jaccard_start_fixed),
            opt_f(self.prototype_self_consistency_percent),
        ]
    }

    fn parse(f: &[&str]) -> std::result::Result<Self, String> {
        Ok(Self {
            dataset: f[0].to_owned(),
            explainer: f[1].to_owned(),
            class: f[2].to_owned(),
            traces: p_u(f[3])?,
            total_features: p_u(f[4])?,
            fixed_point_features_mean: p_of(f[5])?,
            fixed_point_features_std: p_of(f[6])?,
            certified_percent: p_f(f[7])?,
            terminal_percent: p_f(f[8])?,
            converged_percent: p_f(f[9])?,
            steps_mean: p_of(f[10])?,
            steps_std: p_of(f[11])?,
            steps_min: p_ou(f[12])?,
            steps_max: p_ou(f[13])?,
            jaccard_start_step1: p_of(f[14])?,
            jaccard_start_fixed: p_of(f[15])?,
            prototype_self_consistency_percent: p_of(f[16])?,
        })
    }
}

impl CsvRow for SaeRow {
    const HEADER: &'static [&'static str] = &[
        "dataset",
        "setting",
        "traces",
        "iterations_mean",
        "iterations_std",
        "correctness",
        "correctness_top3",
        "jaccard_start_step1",
        "jaccard_start_fixed",
    ];

    fn fields(&self) -> Vec<String> {
        vec![
            self.dataset.clone(),
            self.setting.clone(),
            self.traces.to_string(),
            opt_f(self.iterations_mean),
            opt_f(self.iterations_std),
            opt_f(self.correctness),
            opt_f(self.correctness_top3),
            opt_f(self.jaccard_start_step1),
            opt_f(self.jaccard_start_fixed),
        ]
    }

    fn parse(f: &[&str]) -> std::result::Result<Self, String> {
        if SaeSetting::parse(f[1]).is_none() {
            return Err(format!("unknown setting `{}`", f[1]));
        }
        Ok(Self {
            dataset: f[0].to_owned(),
            setting: f[1].to_owned(),
            traces: p_u(f[2])?,
            iterations_mean: p_of(f[3])?,
            iterations_std: p_of(f[4])?,
            correctness: p_of(f[5])?,
            correctness_top3: p_of(f[6])?,
            jaccard_start_step1: p_of(f[7])?,
            jaccard_start_fixed: p_of(f[8])?,
        })
    }
}

impl CsvRow for ProtoRow {
    const HEADER: &'static [&'static str] = &[
        "dataset",
        "n_prototypes",
        "systems",
        "accuracy_percent",
        "self_consistency_percent",
        "class_p_s_loop_percent",
        "class_p_s_noloop_percent",
        "class_p_x_loop_percent",
        "class_p_x_noloop_percent",
        "steps_loop_min",
        "steps_loop_mean",
        "steps_loop_max",
        "steps_noloop_min",
        "steps_noloop_mean",
        "steps_noloop_max",
    ];

    fn fields(&self) -> Vec<String> {
        vec![
            self.dataset.clone(),
            self.n_prototypes.to_string(),
            self.systems.to_string(),
            format_f64(self.accuracy_percent),
            format_f64(self.self_consistency_percent),
            format_f64(self.class_p_s_loop_percent),
            format_f64(self.class_p_s_noloop_percent),
            format_f64(self.class_p_x_loop_percent),
            format_f64(self.class_p_x_noloop_percent),
            opt_u(self.steps_loop_min),
            opt_f(self.steps_loop_mean),
            opt_u(self.steps_loop_max),
            opt_u(self.steps_noloop_min),
            opt_f(self.steps_noloop_mean),
            opt_u(self.steps_noloop_max),
        ]
    }

    fn parse(f: &[&str]) -> std::result::Result<Self, String> {
        Ok(Self {
            dataset: f[0].to_owned(),
            n_prototypes: p_u(f[1])?,
            systems: p_u(f[2])?,
            accuracy_percent: p_f(f[3])?,
            self_consistency_percent: p_f(f[4])?,
            class_p_s_loop_percent: p_f(f[5])?,
            class_p_s_noloop_percent: p_f(f[6])?,
            class_p_x_loop_percent: p_f(f[7])?,
            class_p_x_noloop_percent: p_f(f[8])?,
            steps_loop_min: p_ou(f[9])?,
            steps_loop_mean: p_of(f[10])?,
            steps_loop_max: p_ou(f[11])?,
            steps_noloop_min: p_ou(f[12])?,
            steps_noloop_mean: p_of(f[13])?,
            steps_noloop_max: p_ou(f[14])?,
        })
    }
}

pub fn write_rows_csv<T: CsvRow, W: Write>(rows: &[T], writer: W) -> Result<()> {
    let err = |e: csv::Error| ReportError::IoFailure {
        path: "csv".into(),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(T::HEADER).map_err(err)?;
    for row in rows {
        w.write_record(row.fields()).map_err(err)?;
    }
    w.flush().map_err(|e| ReportError::IoFailure {
        path: "csv".into(),
        reason: e.to_string(),
    })
}

pub fn read_rows_csv<T: CsvRow, R: Read>(reader: R) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers().map_err(|e| ReportError::Parse {
        line: 1,
        reason: e.to_string(),
    })?;
    if header.iter().ne(T::HEADER.iter().copied()) {
        return Err(ReportError::Parse {
            line: 1,
            reason: format!("expected header `{}`", T::HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| ReportError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let fields: Vec<&str> = rec.iter().collect();
        rows.push(T::parse(&fields).map_err(|reason| ReportError::Parse { line, reason })?);
    }
    Ok(rows)
}

/// Pretty JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|e| ReportError::IoFailure {
        path: "json".into(),
        reason: e.to_string(),
    })?;
    out.push(b'\n');
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ReportError {
    ReportError::IoFailure {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

/// Writes `rows` to `path` as CSV or as a JSON array.
pub fn emit<T: CsvRow + Serialize>(rows: &[T], format: Format, path: &Path) -> Result<()> {
    let bytes = match format {
        Format::Csv => {
            let mut buf = Vec::new();
            write_rows_csv(rows, &mut buf)?;
            buf
        }
        Format::Json => to_json_bytes(rows)?,
    };
    write_file(path, &bytes)
}

/// Writes any serializable document (census, trace, manifest) as JSON.
pub fn emit_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    write_file(path, &to_json_bytes(value)?)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn read_csv_file<T: CsvRow>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    read_rows_csv(std::io::BufReader::new(f))
}

pub fn read_json_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}
