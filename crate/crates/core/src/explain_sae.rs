//! Sparse-autoencoder recursion over a model's hidden layer: top-k
//! reconstruction, activation patching, and classification of the linear
//! dynamics `x ↦ x·W` that a fixed activation pattern induces.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{ExplainerStep, StepError, StepKind, TraceState};
use crate::linalg::{
    dist_inf, format_f64, make_matrix_with_spectrum, norm2, norm_inf, spectral_radius_estimate, LinalgError, Matrix, Spectrum,
};
use crate::models::{Classifier, ModelError, Prediction};

pub const MAX_PATTERNS: u128 = 10_000;

#[derive(Debug, Error)]
pub enum SaeError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid sae: {0}")]
    Invalid(String),
    #[error("{count} activation patterns exceed the limit of {MAX_PATTERNS}")]
    TooManyPatterns { count: u128 },
    #[error("sae training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error on {path}: {reason}")]
    Io { path: String, reason: String },
}

pub type Result<T, E = SaeError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Identity,
    TopK,
}

/// `ε(z) = a(z·W^E)·W^D` with `a` either the identity or a binary top-k
/// gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSae {
    encode: Matrix,
    decode: Matrix,
    k: usize,
    nonlinearity: Nonlinearity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenState {
    pub z: Vec<f64>,
    /// Features kept by the top-k gate that produced `z`; empty for the
    /// identity nonlinearity and for the starting activation.
    pub active: Vec<usize>,
}

impl HiddenState {
    pub fn start(z: Vec<f64>) -> Self {
        Self { z, active: Vec::new() }
    }
}

impl LinearSae {
    pub fn new(encode: Matrix, decode: Matrix, k: usize, nonlinearity: Nonlinearity) -> Result<Self> {
        if encode.cols() != decode.rows() || encode.rows() != decode.cols() {
            return Err(SaeError::Invalid(format!(
                "encoder {}x{} does not pair with decoder {}x{}",
                encode.rows(),
                encode.cols(),
                decode.rows(),
                decode.cols()
            )));
        }
        if nonlinearity == Nonlinearity::TopK && !(1..=encode.cols()).contains(&k) {
            return Err(SaeError::Invalid(format!("k = {k} must lie in [1, {}]", encode.cols())));
        }
        if !encode.is_finite() || !decode.is_finite() {
            return Err(SaeError::Invalid("weights are not finite".into()));
        }
        Ok(Self {
            encode,
            decode,
            k,
            nonlinearity,
        })
    }

    /// Random Gaussian weights, `W^E` scaled by `1/√z` and `W^D` by `1/√h`.
    pub fn random(z_dim: usize, h_dim: usize, k: usize, nonlinearity: Nonlinearity, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encode = Matrix::random_gaussian(z_dim, h_dim, 1.0 / (z_dim as f64).sqrt(), &mut rng);
        let decode = Matrix::random_gaussian(h_dim, z_dim, 1.0 / (h_dim as f64).sqrt(), &mut rng);
        Self::new(encode, decode, k, nonlinearity)
    }

    pub fn z_dim(&self) -> usize {
        self.encode.rows()
    }

    pub fn h_dim(&self) -> usize {
        self.encode.cols()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        self.nonlinearity
    }

    pub fn encoder(&self) -> &Matrix {
        &self.encode
    }

    pub fn decoder(&self) -> &Matrix {
        &self.decode
    }

    /// `W^E·W^D`, the map of the identity nonlinearity.
    pub fn composed(&self) -> Matrix {
        self.encode.matmul(&self.decode).expect("shapes checked at construction")
    }

    /// `W^E·diag(P)·W^D` for the binary pattern `P` given by `active`.
    pub fn pattern_map(&self, active: &[usize]) -> Result<Matrix> {
        let mut gate = vec![0.0; self.h_dim()];
        for &i in active {
            if i >= self.h_dim() {
                return Err(SaeError::Invalid(format!("feature {i} out of range")));
            }
            gate[i] = 1.0;
        }
        Ok(self.encode.matmul(&Matrix::from_diag(&gate))?.matmul(&self.decode)?)
    }

    /// Indices whose features the gate keeps for pre-activation `h`.
    pub fn gate(&self, h: &[f64]) -> Vec<usize> {
        match self.nonlinearity {
            Nonlinearity::Identity => Vec::new(),
            Nonlinearity::TopK => top_k_indices(h, self.k),
        }
    }

    /// Writes `encode.csv`, `decode.csv` and the `sae.json` manifest.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let io = |path: &Path, e: &dyn std::fmt::Display| SaeError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        };
        fs::create_dir_all(dir).map_err(|e| io(dir, &e))?;
        for (name, m) in [("encode.csv", &self.encode), ("decode.csv", &self.decode)] {
            let path = dir.join(name);
            let f = fs::File::create(&path).map_err(|e| io(&path, &e))?;
            m.write_csv(BufWriter::new(f))?;
        }
        let manifest = SaeManifest {
            k: self.k,
            nonlinearity: self.nonlinearity,
            encode: "encode.csv".into(),
            decode: "decode.csv".into(),
        };
        let path = dir.join("sae.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| io(&path, &e))?;
        fs::write(&path, text + "\n").map_err(|e| io(&path, &e))
    }

    /// Reads an SAE from its manifest; matrix paths are relative to it.
    pub fn read_manifest(path: &Path) -> Result<Self> {
        let io = |p: &Path, e: &dyn std::fmt::Display| SaeError::Io {
            path: p.display().to_string(),
            reason: e.to_string(),
        };
        let text = fs::read_to_string(path).map_err(|e| io(path, &e))?;
        let manifest: SaeManifest = serde_json::from_str(&text).map_err(|e| io(path, &e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let load = |name: &str| -> Result<Matrix> {
            let p = base.join(name);
            let f = fs::File::open(&p).map_err(|e| io(&p, &e))?;
            Ok(Matrix::read_csv(BufReader::new(f))?)
        };
        Self::new(load(&manifest.encode)?, load(&manifest.decode)?, manifest.k, manifest.nonlinearity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeManifest {
    pub k: usize,
    pub nonlinearity: Nonlinearity,
    #[serde(default = "default_encode")]
    pub encode: String,
    #[serde(default = "default_decode")]
    pub decode: String,
}

fn default_encode() -> String {
    "encode.csv".into()
}

fn default_decode() -> String {
    "decode.csv".into()
}

/// The `k` largest-magnitude indices, ties to the lowest index, sorted.
pub fn top_k_indices(h: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..h.len()).collect();
    order.sort_by(|&a, &b| h[b].abs().total_cmp(&h[a].abs()).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(k).collect();
    kept.sort_unstable();
    kept
}

pub fn sae_step(sae: &LinearSae, z: &[f64]) -> Result<HiddenState> {
    if z.len() != sae.z_dim() {
        return Err(SaeError::DimensionMismatch {
            expected: sae.z_dim(),
            actual: z.len(),
        });
    }
    let mut h = sae.encode.vec_mul(z)?;
    let active = sae.gate(&h);
    if sae.nonlinearity == Nonlinearity::TopK {
        let mut gated = vec![0.0; h.len()];
        for &i in &active {
            gated[i] = h[i];
        }
        h = gated;
    }
    Ok(HiddenState {
        z: sae.decode.vec_mul(&h)?,
        active,
    })
}

/// Forward pass of `model` on `x` with its hidden activation replaced by
/// `z_override`.
pub fn patched_predict(model: &Classifier, x: &[f64], z_override: &[f64]) -> Result<Prediction> {
    if x.len() != model.input_dim() {
        return Err(SaeError::DimensionMismatch {
            expected: model.input_dim(),
            actual: x.len(),
        });
    }
    Ok(model.predict_from_hidden(z_override)?)
}

pub fn jaccard_active(a: &[usize], b: &[usize]) -> f64 {
    let a: BTreeSet<usize> = a.iter().copied().collect();
    let b: BTreeSet<usize> = b.iter().copied().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DynamicsTag {
    ContractsToZero,
    ConvergesNonzeroFixedPoint,
    BoundedNonConvergent,
    Diverges,
}

impl DynamicsTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DynamicsTag::ContractsToZero => "ContractsToZero",
            DynamicsTag::ConvergesNonzeroFixedPoint => "ConvergesNonzeroFixedPoint",
            DynamicsTag::BoundedNonConvergent => "BoundedNonConvergent",
            DynamicsTag::Diverges => "Diverges",
        }
    }
}

impl std::fmt::Display for DynamicsTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DynamicsTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [
            DynamicsTag::ContractsToZero,
            DynamicsTag::ConvergesNonzeroFixedPoint,
            DynamicsTag::BoundedNonConvergent,
            DynamicsTag::Diverges,
        ]
        .into_iter()
        .find(|t| t.as_str() == s)
        .ok_or_else(|| format!("unknown dynamics class `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsTolerances {
    pub zero: f64,
    pub conv: f64,
    pub diverge: f64,
}

impl Default for DynamicsTolerances {
    fn default() -> Self {
        Self {
            zero: 1e-8,
            conv: 1e-9,
            diverge: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsEvidence {
    pub radius: f64,
    /// Whether the radius estimate agrees with the tag.
    pub radius_consistent: bool,
    /// `‖x_t‖₂` at `t = 0, 1, 2, 4, 8, …` and at the last step.
    pub trajectory_norms: Vec<f64>,
    pub final_norm: f64,
    pub final_point: Vec<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsClass {
    pub tag: DynamicsTag,
    pub evidence: DynamicsEvidence,
}

/// Iterates a seeded unit vector under `x ↦ x·W` for up to `budget` steps.
///
/// The first rule that fires decides the tag: norm above `diverge` (or
/// non-finite) is `Diverges`; norm at most `zero` is `ContractsToZero`; an
/// L∞ step at most `conv` both absolutely and relative to `‖x‖∞` is
/// `ConvergesNonzeroFixedPoint`. Otherwise the orbit is
/// `BoundedNonConvergent` once the budget runs out.
pub fn classify_linear_dynamics(w: &Matrix, budget: usize, tol: &DynamicsTolerances, seed: u64) -> Result<DynamicsClass> {
    if !w.is_square() {
        return Err(LinalgError::NonSquare {
            rows: w.rows(),
            cols: w.cols(),
        }
        .into());
    }
    let n = w.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let norm0 = norm2(&x);
    x.iter_mut().for_each(|v| *v /= norm0);
    let mut norms = vec![1.0];
    let mut next_record = 1;
    let mut tag = DynamicsTag::BoundedNonConvergent;
    let mut steps = budget;
    for t in 1..=budget {
        let next = w.vec_mul(&x)?;
        let norm = norm2(&next);
        if t == next_record {
            norms.push(norm);
            next_record *= 2;
        }
        let step = dist_inf(&next, &x);
        x = next;
        if !norm.is_finite() || norm > tol.diverge {
            tag = DynamicsTag::Diverges;
        } else if norm <= tol.zero {
            tag = DynamicsTag::ContractsToZero;
        } else if step <= tol.conv && step <= tol.conv * norm_inf(&x) {
            tag = DynamicsTag::ConvergesNonzeroFixedPoint;
        } else {
            continue;
        }
        steps = t;
        break;
    }
    let final_norm = norm2(&x);
    if norms.len() == 1 || *norms.last().expect("non-empty") != final_norm {
        norms.push(final_norm);
    }
    let radius = spectral_radius_estimate(w, 1000, 1e-12, seed)?;
    let radius_consistent = match tag {
        DynamicsTag::ContractsToZero => radius < 1.0 + 1e-6,
        DynamicsTag::Diverges => radius > 1.0 - 1e-6,
        DynamicsTag::ConvergesNonzeroFixedPoint => (radius - 1.0).abs() <= 1e-3,
        DynamicsTag::BoundedNonConvergent => radius <= 1.0 + 1e-3,
    };
    Ok(DynamicsClass {
        tag,
        evidence: DynamicsEvidence {
            radius,
            radius_consistent,
            trajectory_norms: norms,
            final_norm,
            final_point: x,
            steps,
        },
    })
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternDynamics {
    pub active: Vec<usize>,
    pub class: DynamicsClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BruteForceReport {
    pub patterns: Vec<PatternDynamics>,
    /// Every fixed-pattern linear map contracts to zero.
    pub all_contract: bool,
}

/// Classifies the linear map of every binary top-k activation pattern.
pub fn nonlinear_fixed_point_bruteforce(sae: &LinearSae, budget: usize, tol: &DynamicsTolerances, seed: u64) -> Result<BruteForceReport> {
    let h = sae.h_dim();
    let k = match sae.nonlinearity {
        Nonlinearity::Identity => h,
        Nonlinearity::TopK => sae.k,
    };
    let count = binomial(h, k);
    if count > MAX_PATTERNS {
        return Err(SaeError::TooManyPatterns { count });
    }
    let patterns = (0..h)
        .combinations(k)
        .map(|active| {
            let class = classify_linear_dynamics(&sae.pattern_map(&active)?, budget, tol, seed)?;
            Ok(PatternDynamics { active, class })
        })
        .collect::<Result<Vec<_>>>()?;
    let all_contract = patterns.iter().all(|p| p.class.tag == DynamicsTag::ContractsToZero);
    Ok(BruteForceReport { patterns, all_contract })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeTrainConfig {
    pub h_dim: usize,
    pub k: usize,
    pub nonlinearity: Nonlinearity,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        Self {
            h_dim: 32,
            k: 8,
            nonlinearity: Nonlinearity::TopK,
            epochs: 200,
            lr: 0.05,
            seed: 0,
        }
    }
}

/// Full-batch gradient descent on the mean squared reconstruction error of
/// `samples`; the top-k gate is held fixed within each gradient evaluation.
pub fn train_sae(samples: &[Vec<f64>], cfg: &SaeTrainConfig) -> Result<LinearSae> {
    let z_dim = samples
        .first()
        .map(Vec::len)
        .ok_or_else(|| SaeError::Invalid("no training activations".into()))?;
    if let Some(bad) = samples.iter().find(|s| s.len() != z_dim) {
        return Err(SaeError::DimensionMismatch {
            expected: z_dim,
            actual: bad.len(),
        });
    }
    if !(cfg.lr > 0.0) {
        return Err(SaeError::Invalid("lr must be > 0".into()));
    }
    let mut sae = LinearSae::random(z_dim, cfg.h_dim, cfg.k, cfg.nonlinearity, cfg.seed)?;
    let h_dim = cfg.h_dim;
    let n = samples.len() as f64;
    for epoch in 0..cfg.epochs {
        let mut g_enc = vec![0.0; z_dim * h_dim];
        let mut g_dec = vec![0.0; h_dim * z_dim];
        let mut loss = 0.0;
        for z in samples {
            let pre = sae.encode.vec_mul(z)?;
            let active = sae.gate(&pre);
            let gate: Vec<f64> = match sae.nonlinearity {
                Nonlinearity::Identity => vec![1.0; h_dim],
                Nonlinearity::TopK => {
                    let mut g = vec![0.0; h_dim];
                    active.iter().for_each(|&i| g[i] = 1.0);
                    g
                }
            };
            let a: Vec<f64> = pre.iter().zip(&gate).map(|(p, g)| p * g).collect();
            let out = sae.decode.vec_mul(&a)?;
            let r: Vec<f64> = out.iter().zip(z).map(|(o, t)| o - t).collect();
            loss += r.iter().map(|v| v * v).sum::<f64>() / n;
            // d(loss)/d(out) = 2r/n
            for j in 0..h_dim {
                for c in 0..z_dim {
                    g_dec[j * z_dim + c] += 2.0 * a[j] * r[c] / n;
                }
            }
            let da = sae.decode.mul_vec(&r)?;
            for i in 0..z_dim {
                for j in 0..h_dim {
                    g_enc[i * h_dim + j] += 2.0 * z[i] * da[j] * gate[j] / n;
                }
            }
        }
        if !loss.is_finite() {
            return Err(SaeError::Diverged { epoch });
        }
        let update = |m: &Matrix, g: &[f64]| {
            let data = m.as_slice().iter().zip(g).map(|(w, d)| w - cfg.lr * d).collect();
            Matrix::new(m.rows(), m.cols(), data)
        };
        let encode = update(&sae.encode, &g_enc).map_err(|_| SaeError::Diverged { epoch })?;
        let decode = update(&sae.decode, &g_dec).map_err(|_| SaeError::Diverged { epoch })?;
        sae.encode = encode;
        sae.decode = decode;
    }
    Ok(sae)
}

/// Mean squared reconstruction error `‖ε(z) − z‖²` over `samples`.
pub fn reconstruction_loss(sae: &LinearSae, samples: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for z in samples {
        let out = sae_step(sae, z)?.z;
        total += out.iter().zip(z).map(|(o, t)| (o - t) * (o - t)).sum::<f64>();
    }
    Ok(total / samples.len() as f64)
}

/// Recursion `z ← ε(z)` on a model's hidden layer.
#[derive(Debug, Clone)]
pub struct SaeExplainer<'a> {
    pub sae: &'a LinearSae,
    pub model: &'a Classifier,
    pub x: Vec<f64>,
    pub conv: f64,
    pub diverge: f64,
}

impl<'a> SaeExplainer<'a> {
    pub fn new(sae: &'a LinearSae, model: &'a Classifier, x: Vec<f64>, tol: &DynamicsTolerances) -> Self {
        Self {
            sae,
            model,
            x,
            conv: tol.conv,
            diverge: tol.diverge,
        }
    }

    pub fn start(&self) -> Result<HiddenState> {
        Ok(HiddenState::start(self.model.hidden_activation(&self.x)?))
    }
}

impl ExplainerStep for SaeExplainer<'_> {
    type State = HiddenState;
    type Key = ();

    fn kind(&self) -> StepKind {
        StepKind::Sae
    }

    fn apply(&self, state: &HiddenState) -> Result<HiddenState, StepError> {
        Ok(sae_step(self.sae, &state.z)?)
    }

    fn key(&self, _state: &HiddenState) -> Option<()> {
        None
    }

    fn same_state(&self, a: &HiddenState, b: &HiddenState) -> bool {
        dist_inf(&a.z, &b.z) <= self.conv
    }

    fn diverged(&self, state: &HiddenState) -> bool {
        let n = norm_inf(&state.z);
        !n.is_finite() || n > self.diverge
    }

    fn predict(&self, state: &HiddenState) -> Result<Prediction, StepError> {
        Ok(patched_predict(self.model, &self.x, &state.z)?)
    }

    fn realize(&self, state: &HiddenState) -> Result<Vec<f64>, StepError> {
        Ok(state.z.clone())
    }

    fn predict_point(&self, point: &[f64]) -> Result<Prediction, StepError> {
        Ok(self.model.predict_from_hidden(point)?)
    }

    fn active_set(&self, state: &HiddenState) -> Option<Vec<usize>> {
        Some(state.active.clone())
    }

    fn export_state(&self, state: &HiddenState) -> TraceState {
        TraceState::Sae {
            z: state.z.clone(),
            active: state.active.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumRegime {
    /// Largest norm uniform in `[0.5, 0.95]`.
    Contractive,
    /// Largest norm uniform in `[1.05, 2]`.
    Expansive,
}

/// Eigenvalue norms for one Monte Carlo draw: the largest norm from the
/// regime's range, the rest uniform below it.
pub fn sample_norms<R: Rng + ?Sized>(regime: SpectrumRegime, dim: usize, rng: &mut R) -> Vec<f64> {
    let max = match regime {
        SpectrumRegime::Contractive => rng.random_range(0.5..=0.95),
        SpectrumRegime::Expansive => rng.random_range(1.05..=2.0),
    };
    let mut norms = vec![max];
    norms.extend((1..dim).map(|_| rng.random_range(0.0..max)));
    norms
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRecord {
    pub seed: u64,
    pub max_eig_norm: f64,
    pub class: DynamicsTag,
    pub final_norm: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub dim: usize,
    pub contractive: usize,
    pub expansive: usize,
    pub budget: usize,
    pub seed: u64,
    #[serde(default)]
    pub tolerances: DynamicsTolerances,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            dim: 10,
            contractive: 1000,
            expansive: 1000,
            budget: 5000,
            seed: 0,
            tolerances: DynamicsTolerances::default(),
        }
    }
}

/// One Monte Carlo draw; the matrix, its norms and the start vector all
/// derive from `seed`.
pub fn mc_trial(regime: SpectrumRegime, dim: usize, budget: usize, tol: &DynamicsTolerances, seed: u64) -> Result<McRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spectrum = Spectrum::new(sample_norms(regime, dim, &mut rng))?;
    let m = make_matrix_with_spectrum(dim, &spectrum, seed)?;
    let class = classify_linear_dynamics(&m, budget, tol, seed ^ 0x5eed)?;
    Ok(McRecord {
        seed,
        max_eig_norm: spectrum.max_norm(),
        class: class.tag,
        final_norm: class.evidence.final_norm,
        steps: class.evidence.steps,
    })
}

/// Contractive draws use seeds `seed + i`, expansive draws continue after
/// them. Output order is contractive then expansive, by seed.
pub fn run_linear_mc(cfg: &McConfig, pool: Option<&rayon::ThreadPool>) -> Result<Vec<McRecord>> {
    let jobs: Vec<(SpectrumRegime, u64)> = (0..cfg.contractive)
        .map(|i| (SpectrumRegime::Contractive, cfg.seed + i as u64))
        .chain((0..cfg.expansive).map(|i| (SpectrumRegime::Expansive, cfg.seed + (cfg.contractive + i) as u64)))
        .collect();
    let run = || {
        jobs.par_iter()
            .map(|&(regime, seed)| mc_trial(regime, cfg.dim, cfg.budget, &cfg.tolerances, seed))
            .collect::<Result<Vec<_>>>()
    };
    match pool {
        Some(p) => p.install(run),
        None => run(),
    }
}

pub fn write_mc_csv<W: std::io::Write>(records: &[McRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| SaeError::Io {
        path: "monte carlo csv".into(),
        reason: e.to_string(),
    };
    w.write_record(["seed", "max_eig_norm", "class", "final_norm", "steps"]).map_err(err)?;
    for r in records {
        w.write_record([
            r.seed.to_string(),
            format_f64(r.max_eig_norm),
            r.class.to_string(),
            format_f64(r.final_norm),
            r.steps.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| SaeError::Io {
        path: "monte carlo csv".into(),
        reason: e.to_string(),
    })
}

pub fn read_mc_csv<R: std::io::Read>(reader: R) -> Result<Vec<McRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let bad = |line: u64, reason: String| SaeError::Io {
        path: format!("monte carlo csv line {line}"),
        reason,
    };
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 5 {
            return Err(bad(line, format!("expected 5 fields, got {}", rec.len())));
        }
        let num = |i: usize| rec[i].parse::<f64>().map_err(|e| bad(line, e.to_string()));
        let int = |i: usize| rec[i].parse::<u64>().map_err(|e| bad(line, e.to_string()));
        out.push(McRecord {
            seed: int(0)?,
            max_eig_norm: num(1)?,
            class: rec[2].parse().map_err(|e| bad(line, e))?,
            final_norm: num(3)?,
            steps: int(4)? as usize,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run_recursion, Outcome};
    use crate::linalg::{make_matrix_with_spectrum_conditioned, rotation2};
    use crate::models::{Architecture, Dense};

    fn naive_step(sae: &LinearSae, z: &[f64]) -> Vec<f64> {
        let (zd, hd) = (sae.z_dim(), sae.h_dim());
        let mut h = vec![0.0; hd];
        for j in 0..hd {
            for i in 0..zd {
                h[j] += z[i] * sae.encoder().get(i, j);
            }
        }
        if sae.nonlinearity() == Nonlinearity::TopK {
            let keep = top_k_indices(&h, sae.k());
            for (j, v) in h.iter_mut().enumerate() {
                if !keep.contains(&j) {
                    *v = 0.0;
                }
            }
        }
        let mut out = vec![0.0; zd];
        for c in 0..zd {
            for j in 0..hd {
                out[c] += h[j] * sae.decoder().get(j, c);
            }
        }
        out
    }

    #[test]
    fn lossless_sae_is_fixed_after_one_step() {
        let sae = LinearSae::new(Matrix::identity(4), Matrix::identity(4), 4, Nonlinearity::Identity).unwrap();
        let z = vec![0.3, -1.0, 2.0, 0.0];
        assert_eq!(sae_step(&sae, &z).unwrap().z, z);
    }

    #[test]
    fn top_k_magnitude_order() {
        assert_eq!(top_k_indices(&[3.0, -5.0, 1.0], 2), vec![0, 1]);
        assert_eq!(top_k_indices(&[1.0, -1.0, 1.0, 0.5], 2), vec![0, 1]);
        assert_eq!(top_k_indices(&[0.0; 3], 1), vec![0]);
    }

    #[test]
    fn step_matches_naive_multiply() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for seed in 0..50 {
            let nl = if seed % 2 == 0 { Nonlinearity::TopK } else { Nonlinearity::Identity };
            let sae = LinearSae::random(6, 12, 4, nl, seed).unwrap();
            let z: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
            let got = sae_step(&sae, &z).unwrap();
            assert!(dist_inf(&got.z, &naive_step(&sae, &z)) <= 1e-10);
            assert_eq!(sae_step(&sae, &z).unwrap(), got);
        }
    }

    fn tapped_model() -> Classifier {
        Classifier::random(Architecture::Mlp1, 5, 6, 3, 4)
    }

    #[test]
    fn patching_own_activation_is_a_no_op() {
        let model = tapped_model();
        let x = [0.2, -0.4, 1.0, 0.0, 0.7];
        let z = model.hidden_activation(&x).unwrap();
        assert_eq!(patched_predict(&model, &x, &z).unwrap(), model.predict(&x).unwrap());
    }

    #[test]
    fn zero_patch_uses_output_bias_only() {
        let model = tapped_model();
        let p = patched_predict(&model, &[0.0; 5], &[0.0; 6]).unwrap();
        let bias = &model.output_layer().bias;
        let m = bias.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = bias.iter().map(|b| (b - m).exp()).collect();
        let s: f64 = e.iter().sum();
        for (got, want) in p.distribution.iter().zip(&e) {
            assert!((got - want / s).abs() < 1e-12);
        }
        assert!((p.distribution.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn linear_model_has_no_tap() {
        let model = Classifier::linear(Dense::new(Matrix::zeros(3, 2), vec![0.0; 2]).unwrap());
        assert!(matches!(patched_predict(&model, &[0.0; 3], &[0.0; 2]), Err(SaeError::Model(ModelError::NoHiddenTap))));
    }

    #[test]
    fn scalar_contraction() {
        let c = classify_linear_dynamics(&Matrix::identity(4).scaled(0.5), 5000, &DynamicsTolerances::default(), 1).unwrap();
        assert_eq!(c.tag, DynamicsTag::ContractsToZero);
        assert!(c.evidence.radius_consistent);
        // 0.5^t ≤ 1e-8 first at t = 27
        assert_eq!(c.evidence.steps, 27);
    }

    /// `M^256` by repeated squaring; more squarings would amplify the
    /// rounding error of the unit eigenvalue.
    fn limit_projector(m: &Matrix) -> Matrix {
        let mut p = m.clone();
        for _ in 0..8 {
            p = p.matmul(&p).unwrap();
        }
        p
    }

    #[test]
    fn unit_eigenvalue_converges_to_its_eigenspace() {
        let spectrum = Spectrum::new(vec![1.0, 0.3, 0.3, 0.3, 0.3]).unwrap();
        let seed = (0..100)
            .find(|&s| make_matrix_with_spectrum_conditioned(5, &spectrum, s).unwrap().eigenvalues[0] > 0.0)
            .expect("a seed with eigenvalue +1");
        let m = make_matrix_with_spectrum(5, &spectrum, seed).unwrap();
        let c = classify_linear_dynamics(&m, 5000, &DynamicsTolerances::default(), 3).unwrap();
        assert_eq!(c.tag, DynamicsTag::ConvergesNonzeroFixedPoint);
        assert!(c.evidence.radius_consistent);
        // the limit of x_0 is x_0·P with P the spectral projector
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x0: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
        let n0 = norm2(&x0);
        x0.iter_mut().for_each(|v| *v /= n0);
        let want = limit_projector(&m).vec_mul(&x0).unwrap();
        assert!(dist_inf(&c.evidence.final_point, &want) < 1e-7, "{:?} vs {:?}", c.evidence.final_point, want);
        let back = m.vec_mul(&c.evidence.final_point).unwrap();
        assert!(dist_inf(&back, &c.evidence.final_point) < 1e-8);
    }

    #[test]
    fn rotation_is_bounded_and_non_convergent() {
        let c = classify_linear_dynamics(&rotation2(0.7), 2000, &DynamicsTolerances::default(), 0).unwrap();
        assert_eq!(c.tag, DynamicsTag::BoundedNonConvergent);
        assert!((c.evidence.final_norm - 1.0).abs() < 1e-9);
        assert!(c.evidence.radius_consistent);
    }

    #[test]
    fn expansion_diverges() {
        let c = classify_linear_dynamics(&Matrix::identity(3).scaled(1.1), 5000, &DynamicsTolerances::default(), 0).unwrap();
        assert_eq!(c.tag, DynamicsTag::Diverges);
        assert!(c.evidence.radius_consistent);
        assert!(classify_linear_dynamics(&Matrix::zeros(2, 3), 10, &DynamicsTolerances::default(), 0).is_err());
    }

    #[test]
    fn full_pattern_reduces_to_linear_case() {
        let sae = LinearSae::random(4, 4, 4, Nonlinearity::TopK, 2).unwrap();
        let tol = DynamicsTolerances::default();
        let r = nonlinear_fixed_point_bruteforce(&sae, 3000, &tol, 5).unwrap();
        assert_eq!(r.patterns.len(), 1);
        let direct = classify_linear_dynamics(&sae.composed(), 3000, &tol, 5).unwrap();
        assert_eq!(r.patterns[0].class.tag, direct.tag);
        assert_eq!(r.all_contract, direct.tag == DynamicsTag::ContractsToZero);
    }

    #[test]
    fn pattern_count_matches_binomial() {
        let sae = LinearSae::random(3, 5, 2, Nonlinearity::TopK, 9).unwrap();
        let r = nonlinear_fixed_point_bruteforce(&sae, 500, &DynamicsTolerances::default(), 0).unwrap();
        // 5! / (2! 3!)
        assert_eq!(r.patterns.len(), 10);
        let distinct: BTreeSet<Vec<usize>> = r.patterns.iter().map(|p| p.active.clone()).collect();
        assert_eq!(distinct.len(), 10);
        assert_eq!(binomial(5, 2), 10);
        assert_eq!(binomial(40, 20), 137_846_528_820);
        let big = LinearSae::random(3, 40, 20, Nonlinearity::TopK, 0).unwrap();
        assert!(matches!(
            nonlinear_fixed_point_bruteforce(&big, 10, &DynamicsTolerances::default(), 0),
            Err(SaeError::TooManyPatterns { .. })
        ));
    }

    /// Largest singular value via power iteration on `MᵀM`.
    fn operator_norm(m: &Matrix) -> f64 {
        let g = m.transpose().matmul(m).unwrap();
        let mut v = vec![1.0; g.rows()];
        for _ in 0..500 {
            let w = g.mul_vec(&v).unwrap();
            let n = norm2(&w);
            v = w.into_iter().map(|x| x / n).collect();
        }
        norm2(&m.mul_vec(&v).unwrap())
    }

    #[test]
    fn norm_product_below_one_contracts_every_pattern() {
        for seed in 0..5 {
            let sae = LinearSae::random(4, 6, 3, Nonlinearity::TopK, seed).unwrap();
            let scale = 0.9 / (operator_norm(sae.encoder()) * operator_norm(sae.decoder()));
            let s = scale.sqrt();
            let shrunk = LinearSae::new(sae.encoder().scaled(s), sae.decoder().scaled(s), 3, Nonlinearity::TopK).unwrap();
            let r = nonlinear_fixed_point_bruteforce(&shrunk, 5000, &DynamicsTolerances::default(), seed).unwrap();
            assert!(r.all_contract);
        }
    }

    #[test]
    fn jaccard_cases() {
        assert_eq!(jaccard_active(&[1, 2], &[2, 1]), 1.0);
        assert_eq!(jaccard_active(&[0], &[1]), 0.0);
        assert_eq!(jaccard_active(&[1, 2, 3], &[2, 3, 4]), 0.5);
        assert_eq!(jaccard_active(&[], &[]), 1.0);
    }

    #[test]
    fn training_reduces_reconstruction_error() {
        let model = tapped_model();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let samples: Vec<Vec<f64>> = (0..40)
            .map(|_| {
                let x: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
                model.hidden_activation(&x).unwrap()
            })
            .collect();
        let cfg = SaeTrainConfig {
            h_dim: 12,
            k: 4,
            epochs: 0,
            ..Default::default()
        };
        let before = reconstruction_loss(&train_sae(&samples, &cfg).unwrap(), &samples).unwrap();
        let trained = train_sae(&samples, &SaeTrainConfig { epochs: 300, ..cfg.clone() }).unwrap();
        let after = reconstruction_loss(&trained, &samples).unwrap();
        assert!(after < 0.5 * before, "{before} -> {after}");
        assert_eq!(train_sae(&samples, &SaeTrainConfig { epochs: 300, ..cfg }).unwrap(), trained);
    }

    #[test]
    fn weights_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let sae = LinearSae::random(3, 7, 2, Nonlinearity::TopK, 1).unwrap();
        sae.write_dir(dir.path()).unwrap();
        assert_eq!(LinearSae::read_manifest(&dir.path().join("sae.json")).unwrap(), sae);
    }

    #[test]
    fn explainer_reaches_fixed_point_on_contraction() {
        let model = tapped_model();
        let sae = LinearSae::new(Matrix::identity(6).scaled(0.5), Matrix::identity(6), 6, Nonlinearity::TopK).unwrap();
        let step = SaeExplainer::new(&sae, &model, vec![1.0, 0.5, -0.3, 0.2, 0.9], &DynamicsTolerances::default());
        let t = run_recursion(&step, step.start().unwrap(), 1000).unwrap();
        assert!(t.outcome.is_fixed_point());
        assert!(norm_inf(&t.last_state().z) <= 2e-9);

        let expand = LinearSae::new(Matrix::identity(6).scaled(2.0), Matrix::identity(6), 6, Nonlinearity::Identity).unwrap();
        let step = SaeExplainer::new(&expand, &model, vec![1.0, 0.5, -0.3, 0.2, 0.9], &DynamicsTolerances::default());
        let t = run_recursion(&step, step.start().unwrap(), 1000).unwrap();
        assert!(matches!(t.outcome, Outcome::Diverged { .. }));
    }

    #[test]
    fn small_monte_carlo_split() {
        let cfg = McConfig {
            contractive: 40,
            expansive: 40,
            ..Default::default()
        };
        let recs = run_linear_mc(&cfg, None).unwrap();
        assert!(recs[..40].iter().all(|r| r.class == DynamicsTag::ContractsToZero));
        assert!(recs[40..].iter().all(|r| r.class == DynamicsTag::Diverges));
        let mut buf = Vec::new();
        write_mc_csv(&recs, &mut buf).unwrap();
        assert!(buf.starts_with(b"seed,max_eig_norm,class,final_norm,steps\n"));
        assert_eq!(read_mc_csv(buf.as_slice()).unwrap(), recs);
    }
}
