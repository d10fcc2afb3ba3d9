//! Prototype explanation systems: nearest-prototype transitions in a latent
//! space, self-consistency, functional digraph decomposition and class
//! preservation.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{ExplainerStep, StepError, StepKind, TraceState};
use crate::linalg::{format_f64, solve_many, LinalgError, Matrix};
use crate::models::{Dataset, Prediction};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtoError {
    #[error("invalid prototype system: {0}")]
    Invalid(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("prototype index {index} out of range for {count} prototypes")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("no candidate prototypes left")]
    EmptyCandidateSet,
    #[error("class {0} has no prototypes")]
    EmptyClass(usize),
    #[error("prototype csv line {line}: {reason}")]
    Csv { line: u64, reason: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T, E = ProtoError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    Euclidean,
    SquaredEuclidean,
}

impl Distance {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        match self {
            Distance::Euclidean => sq.sqrt(),
            Distance::SquaredEuclidean => sq,
        }
    }
}

/// `x ↦ x · W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.cols() {
            return Err(ProtoError::DimensionMismatch {
                expected: weights.cols(),
                actual: bias.len(),
            });
        }
        Ok(Self { weights, bias })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            weights: Matrix::identity(n),
            bias: vec![0.0; n],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.weights.vec_mul(x)?;
        out.iter_mut().zip(&self.bias).for_each(|(o, b)| *o += b);
        Ok(out)
    }

    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub latent: Vec<f64>,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSystem {
    prototypes: Vec<Prototype>,
    encoder: Affine,
    decoder: Affine,
    distance: Distance,
    classes: usize,
}

impl PrototypeSystem {
    pub fn new(prototypes: Vec<Prototype>, encoder: Affine, decoder: Affine, distance: Distance, classes: usize) -> Result<Self> {
        if prototypes.len() < 2 {
            return Err(ProtoError::Invalid("at least two prototypes are required".into()));
        }
        let latent = encoder.out_dim();
        if decoder.in_dim() != latent || decoder.out_dim() != encoder.in_dim() {
            return Err(ProtoError::Invalid(format!(
                "encoder {}→{} and decoder {}→{} do not compose",
                encoder.in_dim(),
                encoder.out_dim(),
                decoder.in_dim(),
                decoder.out_dim()
            )));
        }
        for (i, p) in prototypes.iter().enumerate() {
            if p.latent.len() != latent {
                return Err(ProtoError::Invalid(format!(
                    "prototype {i} has latent dim {}, expected {latent}",
                    p.latent.len()
                )));
            }
            if p.class >= classes {
                return Err(ProtoError::Invalid(format!("prototype {i} has class {} >= {classes}", p.class)));
            }
            if p.latent.iter().any(|v| !v.is_finite()) {
                return Err(ProtoError::Invalid(format!("prototype {i} is not finite")));
            }
        }
        Ok(Self {
            prototypes,
            encoder,
            decoder,
            distance,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn prototypes(&self) -> &[Prototype] {
        &self.prototypes
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn class_of(&self, p: usize) -> usize {
        self.prototypes[p].class
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.out_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.in_dim()
    }

    pub fn distance(&self) -> Distance {
        self.distance
    }

    pub fn encoder(&self) -> &Affine {
        &self.encoder
    }

    pub fn decoder(&self) -> &Affine {
        &self.decoder
    }

    pub fn with_decoder(mut self, decoder: Affine) -> Result<Self> {
        if decoder.in_dim() != self.decoder.in_dim() || decoder.out_dim() != self.decoder.out_dim() {
            return Err(ProtoError::Invalid("replacement decoder has a different shape".into()));
        }
        self.decoder = decoder;
        Ok(self)
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.encoder.apply(x)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.decoder.apply(z)
    }

    /// `e(d(p))` for prototype `p`.
    pub fn reencode(&self, p: usize) -> Result<Vec<f64>> {
        self.check_index(p)?;
        self.encode(&self.decode(&self.prototypes[p].latent)?)
    }

    fn check_index(&self, p: usize) -> Result<()> {
        if p < self.len() {
            Ok(())
        } else {
            Err(ProtoError::IndexOutOfRange {
                index: p,
                count: self.len(),
            })
        }
    }

    /// Closest prototype to `z`, skipping `exclude`; ties go to the lowest
    /// index.
    pub fn nearest_prototype(&self, z: &[f64], exclude: Option<usize>) -> Result<usize> {
        if z.len() != self.latent_dim() {
            return Err(ProtoError::DimensionMismatch {
                expected: self.latent_dim(),
                actual: z.len(),
            });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(ProtoError::Invalid("latent query is not finite".into()));
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in self.prototypes.iter().enumerate() {
            if Some(i) == exclude {
                continue;
            }
            let d = self.distance.eval(z, &p.latent);
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i).ok_or(ProtoError::EmptyCandidateSet)
    }

    /// Decode prototype `p`, re-encode it, and return the nearest prototype;
    /// with `exclude_self`, `p` itself is not a candidate.
    pub fn transition(&self, p: usize, exclude_self: bool) -> Result<usize> {
        let z = self.reencode(p)?;
        self.nearest_prototype(&z, exclude_self.then_some(p))
    }

    /// Nearest-prototype classifier over the input space: class logits are
    /// the negated distance to each class's closest prototype.
    pub fn classify(&self, x: &[f64]) -> Result<Prediction> {
        if x.len() != self.input_dim() {
            return Err(ProtoError::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        let z = self.encode(x)?;
        let mut logits = vec![-1e300; self.classes];
        for p in &self.prototypes {
            let d = -self.distance.eval(&z, &p.latent);
            if d > logits[p.class] {
                logits[p.class] = d;
            }
        }
        Ok(Prediction::from_logits(logits))
    }

    /// The class of the prototype nearest to `encode(x)`.
    pub fn nearest_class(&self, x: &[f64]) -> Result<usize> {
        let p = self.nearest_prototype(&self.encode(x)?, None)?;
        Ok(self.class_of(p))
    }

    /// Whether every state reached from `p` stays in `p`'s class.
    pub fn rollout_preserves_class(&self, p: usize, exclude_self: bool) -> Result<bool> {
        let class = self.class_of(p);
        Ok(self.rollout(p, exclude_self)?.iter().all(|&q| self.class_of(q) == class))
    }

    /// Distinct prototypes visited from `p` until the first repeat.
    pub fn rollout(&self, p: usize, exclude_self: bool) -> Result<Vec<usize>> {
        let mut seen = vec![false; self.len()];
        let mut path = Vec::new();
        let mut cur = p;
        while !seen[cur] {
            seen[cur] = true;
            path.push(cur);
            cur = self.transition(cur, exclude_self)?;
        }
        Ok(path)
    }

    /// Prototypes as CSV `proto_id,class,latent_0,...`.
    pub fn write_prototypes_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_prototypes_csv(&self.prototypes, writer)
    }
}

pub fn write_prototypes_csv<W: Write>(prototypes: &[Prototype], writer: W) -> Result<()> {
    let err = |e: csv::Error| ProtoError::Csv { line: 0, reason: e.to_string() };
    let mut w = csv::Writer::from_writer(writer);
    let m = prototypes.first().map_or(0, |p| p.latent.len());
    let mut header = vec!["proto_id".to_owned(), "class".to_owned()];
    header.extend((0..m).map(|i| format!("latent_{i}")));
    w.write_record(&header).map_err(err)?;
    for (i, p) in prototypes.iter().enumerate() {
        let mut row = vec![i.to_string(), p.class.to_string()];
        row.extend(p.latent.iter().map(|v| format_f64(*v)));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| ProtoError::Csv { line: 0, reason: e.to_string() })
}

/// Reads prototypes; rows must be listed in `proto_id` order `0, 1, …`.
pub fn read_prototypes_csv<R: Read>(reader: R) -> Result<Vec<Prototype>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| ProtoError::Csv { line: 1, reason: e.to_string() })?
        .clone();
    if headers.len() < 3 || headers.get(0) != Some("proto_id") || headers.get(1) != Some("class") {
        return Err(ProtoError::Csv {
            line: 1,
            reason: "header must be `proto_id,class,latent_0,...`".into(),
        });
    }
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| ProtoError::Csv {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |reason: String| ProtoError::Csv { line, reason };
        let id: usize = record[0].trim().parse().map_err(|_| bad("bad proto_id".into()))?;
        if id != out.len() {
            return Err(bad(format!("expected proto_id {}, got {id}", out.len())));
        }
        let class: usize = record[1].trim().parse().map_err(|_| bad("bad class".into()))?;
        let latent = record
            .iter()
            .skip(2)
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(e.to_string()))?;
        out.push(Prototype { latent, class });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfConsistency {
    pub flags: Vec<bool>,
    pub fraction: f64,
}

/// A prototype is self-consistent when decode-then-encode leaves it its own
/// nearest prototype.
pub fn self_consistency_report(sys: &PrototypeSystem) -> Result<SelfConsistency> {
    let flags = (0..sys.len())
        .map(|p| Ok(sys.transition(p, false)? == p))
        .collect::<Result<Vec<bool>>>()?;
    let fraction = flags.iter().filter(|f| **f).count() as f64 / flags.len() as f64;
    Ok(SelfConsistency { flags, fraction })
}

/// A functional digraph (one out-edge per node) and its decomposition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionOutcome {
    /// `adjacency[p]` is the successor of `p`.
    pub adjacency: Vec<usize>,
    /// Each cycle listed along its edges, starting from its smallest node.
    pub cycles: Vec<Vec<usize>>,
    /// Steps from each node to the first node on a cycle.
    pub entry_distance: Vec<usize>,
    /// Index into `cycles` of the cycle each node drains into.
    pub cycle_of: Vec<usize>,
}

/// Decomposes any function `{0..n} → {0..n}` into its cycles and the tree
/// distances leading into them.
pub fn decompose_functional_graph(next: &[usize]) -> TransitionOutcome {
    let n = next.len();
    const UNSEEN: usize = usize::MAX;
    // 0 = unvisited, 1 = on the current walk, 2 = resolved
    let mut color = vec![0u8; n];
    let mut cycle_of = vec![UNSEEN; n];
    let mut entry_distance = vec![0; n];
    let mut cycles: Vec<Vec<usize>> = Vec::new();
    for start in 0..n {
        if color[start] != 0 {
            continue;
        }
        let mut path = Vec::new();
        let mut cur = start;
        while color[cur] == 0 {
            color[cur] = 1;
            path.push(cur);
            cur = next[cur];
        }
        // `cur` is either on this walk (new cycle) or already resolved
        let tail_len = if color[cur] == 1 {
            let pos = path.iter().position(|&v| v == cur).expect("on current walk");
            let mut cycle = path[pos..].to_vec();
            let min_at = cycle.iter().enumerate().min_by_key(|(_, v)| **v).map(|(i, _)| i).unwrap_or(0);
            cycle.rotate_left(min_at);
            let id = cycles.len();
            for &v in &cycle {
                cycle_of[v] = id;
                entry_distance[v] = 0;
                color[v] = 2;
            }
            cycles.push(cycle);
            pos
        } else {
            path.len()
        };
        for i in (0..tail_len).rev() {
            let v = path[i];
            let succ = next[v];
            cycle_of[v] = cycle_of[succ];
            entry_distance[v] = entry_distance[succ] + 1;
            color[v] = 2;
        }
    }
    TransitionOutcome {
        adjacency: next.to_vec(),
        cycles,
        entry_distance,
        cycle_of,
    }
}

pub fn build_digraph(sys: &PrototypeSystem, exclude_self: bool) -> Result<TransitionOutcome> {
    let next = (0..sys.len())
        .map(|p| sys.transition(p, exclude_self))
        .collect::<Result<Vec<_>>>()?;
    Ok(decompose_functional_graph(&next))
}

/// Sufficient condition for recursions that start in class `s` to stay
/// there: for every `p` in the class, its re-encoding is no farther from the
/// class (minus `p` when `exclude_self`) than from any other class.
pub fn class_preservation_condition(sys: &PrototypeSystem, class: usize, exclude_self: bool) -> Result<bool> {
    let members: Vec<usize> = (0..sys.len()).filter(|&p| sys.class_of(p) == class).collect();
    if members.is_empty() {
        return Err(ProtoError::EmptyClass(class));
    }
    for &p in &members {
        let z = sys.reencode(p)?;
        let mut inside = f64::INFINITY;
        let mut outside = f64::INFINITY;
        for (q, proto) in sys.prototypes().iter().enumerate() {
            let d = sys.distance().eval(&z, &proto.latent);
            if proto.class == class {
                if !(exclude_self && q == p) {
                    inside = inside.min(d);
                }
            } else {
                outside = outside.min(d);
            }
        }
        // ties resolve by index and could leave the class
        if !(inside < outside) {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub latent_dim: usize,
    /// Ridge strength per sample.
    pub ridge: f64,
    /// Alternating least-squares rounds.
    pub rounds: usize,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            ridge: 0.5,
            rounds: 3,
            seed: 0,
        }
    }
}

/// Fits a centered affine autoencoder by alternating ridge regressions.
///
/// Returns `(encoder, decoder)` with `encode(x) = (x - μ)·E` and
/// `decode(z) = z·D + μ`. The ridge penalty makes `e ∘ d` a shrinkage of
/// the latent space, so reconstruction is deliberately lossy.
pub fn fit_linear_autoencoder(data: &Dataset, cfg: &AutoencoderConfig) -> Result<(Affine, Affine)> {
    let n = data.len();
    let d = data.dim();
    let m = cfg.latent_dim;
    if m == 0 {
        return Err(ProtoError::Invalid("latent_dim must be >= 1".into()));
    }
    if !(cfg.ridge > 0.0) {
        return Err(ProtoError::Invalid("ridge must be > 0".into()));
    }
    let mut mean = vec![0.0; d];
    for x in data.inputs() {
        mean.iter_mut().zip(x).for_each(|(a, b)| *a += b / n as f64);
    }
    let centered: Vec<Vec<f64>> = data
        .inputs()
        .iter()
        .map(|x| x.iter().zip(&mean).map(|(a, b)| a - b).collect())
        .collect();
    let xc = Matrix::from_rows(&centered)?;
    let xct = xc.transpose();
    let lambda = cfg.ridge * n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut enc = Matrix::random_gaussian(d, m, 1.0 / (d as f64).sqrt(), &mut rng);
    let mut dec = Matrix::zeros(m, d);
    for _ in 0..cfg.rounds.max(1) {
        // decoder given latents
        let z = xc.matmul(&enc)?;
        let zt = z.transpose();
        dec = solve_many(&add_ridge(&zt.matmul(&z)?, lambda), &zt.matmul(&xc)?)?;
        // best latents given the decoder, then the encoder that produces them
        let dt = dec.transpose();
        let gram = add_ridge(&dec.matmul(&dt)?, lambda / n as f64);
        let target = solve_many(&gram, &dec.matmul(&xct)?)?.transpose();
        enc = solve_many(&add_ridge(&xct.matmul(&xc)?, lambda), &xct.matmul(&target)?)?;
    }
    let enc_bias: Vec<f64> = enc.vec_mul(&mean)?.into_iter().map(|v| -v).collect();
    Ok((Affine::new(enc, enc_bias)?, Affine::new(dec, mean)?))
}

fn add_ridge(m: &Matrix, lambda: f64) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        out.set(i, i, m.get(i, i) + lambda);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeConfig {
    pub n_prototypes: usize,
    pub autoencoder: AutoencoderConfig,
    /// Jitter around each class mean, in units of the class's latent spread.
    pub jitter: f64,
    pub distance: Distance,
    pub seed: u64,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        Self {
            n_prototypes: 10,
            autoencoder: AutoencoderConfig::default(),
            jitter: 1.0,
            distance: Distance::Euclidean,
            seed: 0,
        }
    }
}

/// Fits the autoencoder and places prototypes at class-mean latents plus
/// seeded jitter, assigning prototypes to classes round-robin.
pub fn build_from_dataset(data: &Dataset, cfg: &PrototypeConfig) -> Result<PrototypeSystem> {
    let (encoder, decoder) = fit_linear_autoencoder(data, &cfg.autoencoder)?;
    let m = encoder.out_dim();
    let b = data.classes();
    let mut sums = vec![vec![0.0; m]; b];
    let mut sq = vec![vec![0.0; m]; b];
    let mut counts = vec![0usize; b];
    for (x, &y) in data.inputs().iter().zip(data.labels()) {
        let z = encoder.apply(x)?;
        for j in 0..m {
            sums[y][j] += z[j];
            sq[y][j] += z[j] * z[j];
        }
        counts[y] += 1;
    }
    let populated: Vec<usize> = (0..b).filter(|&c| counts[c] > 0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prototypes = (0..cfg.n_prototypes)
        .map(|i| {
            let class = populated[i % populated.len()];
            let n = counts[class] as f64;
            let latent = (0..m)
                .map(|j| {
                    let mean = sums[class][j] / n;
                    let std = (sq[class][j] / n - mean * mean).max(0.0).sqrt();
                    mean + cfg.jitter * std * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            Prototype { latent, class }
        })
        .collect();
    PrototypeSystem::new(prototypes, encoder, decoder, cfg.distance, b)
}

/// A random system: Gaussian prototypes and a random lossy affine
/// encoder/decoder pair.
pub fn random_system(n_prototypes: usize, latent_dim: usize, input_dim: usize, classes: usize, seed: u64) -> Result<PrototypeSystem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes = (0..n_prototypes)
        .map(|i| Prototype {
            latent: (0..latent_dim).map(|_| rng.sample(StandardNormal)).collect(),
            class: if i < classes { i } else { rng.random_range(0..classes) },
        })
        .collect();
    let scale_e = 1.0 / (input_dim as f64).sqrt();
    let scale_d = 1.0 / (latent_dim as f64).sqrt();
    let encoder = Affine::new(
        Matrix::random_gaussian(input_dim, latent_dim, scale_e, &mut rng),
        (0..latent_dim).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect(),
    )?;
    let decoder = Affine::new(
        Matrix::random_gaussian(latent_dim, input_dim, scale_d, &mut rng),
        (0..input_dim).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect(),
    )?;
    PrototypeSystem::new(prototypes, encoder, decoder, Distance::Euclidean, classes)
}

/// Recursion state: the original input before the first step, prototype
/// indices afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProtoState {
    Input,
    Prototype(usize),
}

#[derive(Debug, Clone)]
pub struct ProtoExplainer<'a> {
    pub system: &'a PrototypeSystem,
    /// Needed only when starting from [`ProtoState::Input`].
    pub input: Option<Vec<f64>>,
    pub exclude_self: bool,
}

impl ProtoExplainer<'_> {
    fn input(&self) -> Result<&[f64], StepError> {
        self.input.as_deref().ok_or_else(|| "prototype explainer has no input".into())
    }
}

impl ExplainerStep for ProtoExplainer<'_> {
    type State = ProtoState;
    type Key = ProtoState;

    fn kind(&self) -> StepKind {
        StepKind::Prototype
    }

    fn apply(&self, state: &ProtoState) -> Result<ProtoState, StepError> {
        let next = match *state {
            ProtoState::Input => {
                let z = self.system.encode(self.input()?)?;
                self.system.nearest_prototype(&z, None)?
            }
            ProtoState::Prototype(p) => self.system.transition(p, self.exclude_self)?,
        };
        Ok(ProtoState::Prototype(next))
    }

    fn key(&self, state: &ProtoState) -> Option<ProtoState> {
        Some(*state)
    }

    fn predict(&self, state: &ProtoState) -> Result<Prediction, StepError> {
        let point = self.realize(state)?;
        Ok(self.system.classify(&point)?)
    }

    fn realize(&self, state: &ProtoState) -> Result<Vec<f64>, StepError> {
        match *state {
            ProtoState::Input => Ok(self.input()?.to_vec()),
            ProtoState::Prototype(p) => Ok(self.system.decode(&self.system.prototypes()[p].latent)?),
        }
    }

    fn predict_point(&self, point: &[f64]) -> Result<Prediction, StepError> {
        Ok(self.system.classify(point)?)
    }

    fn export_state(&self, state: &ProtoState) -> TraceState {
        match *state {
            ProtoState::Input => TraceState::Input,
            ProtoState::Prototype(index) => TraceState::Prototype { index },
        }
    }
}
