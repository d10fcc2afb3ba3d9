//! Small classifiers trained from scratch, synthetic datasets and dataset
//! CSV ingestion.
//!
//! Inputs are row vectors; a dense layer computes `x · W + b` with `W`
//! shaped `in × out`.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{format_f64, LinalgError, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("bad synthetic spec: {0}")]
    BadSpec(String),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("class index {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("model has no hidden layer to tap")]
    NoHiddenTap,
    #[error("dataset csv line {line}: {reason}")]
    Csv { line: u64, reason: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    classes: usize,
    feature_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.is_empty() {
            return Err(ModelError::InvalidDataset("dataset is empty".into()));
        }
        if inputs.len() != labels.len() {
            return Err(ModelError::InvalidDataset(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        let dim = inputs[0].len();
        if dim == 0 {
            return Err(ModelError::InvalidDataset("inputs have zero features".into()));
        }
        for (i, x) in inputs.iter().enumerate() {
            if x.len() != dim {
                return Err(ModelError::InvalidDataset(format!(
                    "sample {i} has {} features, expected {dim}",
                    x.len()
                )));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::InvalidDataset(format!("sample {i} is not finite")));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(ModelError::ClassOutOfRange { class: bad, classes });
        }
        Ok(Self {
            inputs,
            labels,
            classes,
            feature_names: None,
        })
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.dim() {
            return Err(ModelError::InvalidDataset(format!(
                "{} feature names for {} features",
                names.len(),
                self.dim()
            )));
        }
        self.feature_names = Some(names);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.feature_names.as_deref()
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (&self.inputs[i], self.labels[i])
    }

    /// Reads `f0,...,f{d-1},label` rows. The class count is one past the
    /// largest label unless `classes` is given.
    pub fn read_csv<R: Read>(reader: R, classes: Option<usize>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| ModelError::Csv { line: 1, reason: e.to_string() })?
            .clone();
        let n = headers.len();
        if n < 2 || headers.get(n - 1) != Some("label") {
            return Err(ModelError::Csv {
                line: 1,
                reason: "header must end with `label`".into(),
            });
        }
        let names: Vec<String> = headers.iter().take(n - 1).map(str::to_owned).collect();
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(|e| ModelError::Csv {
                line: e.position().map_or(0, |p| p.line()),
                reason: e.to_string(),
            })?;
            let line = record.position().map_or(0, |p| p.line());
            let bad = |reason: String| ModelError::Csv { line, reason };
            if record.len() != n {
                return Err(bad(format!("expected {n} fields, got {}", record.len())));
            }
            let mut x = Vec::with_capacity(n - 1);
            for (j, field) in record.iter().take(n - 1).enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| bad(format!("feature {j} is not a number: `{field}`")))?;
                if !v.is_finite() {
                    return Err(bad(format!("feature {j} is not finite")));
                }
                x.push(v);
            }
            let label_field = record.get(n - 1).unwrap_or_default().trim();
            let label: usize = label_field
                .parse()
                .map_err(|_| bad(format!("label is not a class index: `{label_field}`")))?;
            if let Some(c) = classes {
                if label >= c {
                    return Err(bad(format!("label {label} out of range for {c} classes")));
                }
            }
            inputs.push(x);
            labels.push(label);
        }
        let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
        Dataset::new(inputs, labels, classes)?.with_feature_names(names)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let io = |e: csv::Error| ModelError::Csv { line: 0, reason: e.to_string() };
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = match &self.feature_names {
            Some(names) => names.clone(),
            None => (0..self.dim()).map(|i| format!("f{i}")).collect(),
        };
        header.push("label".into());
        w.write_record(&header).map_err(io)?;
        for (x, y) in self.inputs.iter().zip(&self.labels) {
            let mut row: Vec<String> = x.iter().map(|v| format_f64(*v)).collect();
            row.push(y.to_string());
            w.write_record(&row).map_err(io)?;
        }
        w.flush().map_err(|e| ModelError::Csv { line: 0, reason: e.to_string() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    Blobs,
    GridPatterns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Minimum pairwise distance between blob centers.
const BLOB_SEPARATION: f64 = 3.0;

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.dim == 0 || spec.per_class == 0 {
        return Err(ModelError::BadSpec("classes, dim and per_class must be >= 1".into()));
    }
    if !(spec.noise >= 0.0) || !spec.noise.is_finite() {
        return Err(ModelError::BadSpec("noise must be finite and >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = match spec.kind {
        SyntheticKind::Blobs => blob_centers(spec.classes, spec.dim, &mut rng),
        SyntheticKind::GridPatterns => grid_templates(spec.classes, spec.dim, &mut rng)?,
    };
    let mut inputs = Vec::with_capacity(spec.classes * spec.per_class);
    let mut labels = Vec::with_capacity(spec.classes * spec.per_class);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            let x = center
                .iter()
                .map(|c| c + spec.noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            inputs.push(x);
            labels.push(class);
        }
    }
    Dataset::new(inputs, labels, spec.classes)
}

fn blob_centers(classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    // spread grows with the class count so rejection sampling stays cheap
    let spread = 2.0 * BLOB_SEPARATION * (classes as f64).powf(1.0 / dim as f64).max(1.0);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut attempts = 0usize;
    while centers.len() < classes {
        let c: Vec<f64> = (0..dim).map(|_| rng.random_range(-spread..spread)).collect();
        attempts += 1;
        let far = centers
            .iter()
            .all(|o| crate::linalg::norm2(&o.iter().zip(&c).map(|(a, b)| a - b).collect::<Vec<_>>()) >= BLOB_SEPARATION);
        if far || attempts > 10_000 {
            centers.push(c);
        }
    }
    centers
}

/// One binary template per class: the union of two seeded rectangles on a
/// `w × w` grid. Templates are redrawn until pairwise distinct.
fn grid_templates(classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let w = (dim as f64).sqrt().round() as usize;
    if w * w != dim {
        return Err(ModelError::BadSpec(format!("grid_patterns needs a square dim, got {dim}")));
    }
    let mut templates: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut attempts = 0usize;
    while templates.len() < classes {
        let mut t = vec![0.0; dim];
        for _ in 0..2 {
            let r0 = rng.random_range(0..w);
            let c0 = rng.random_range(0..w);
            let h = rng.random_range(1..=w.div_ceil(2));
            let wd = rng.random_range(1..=w.div_ceil(2));
            for r in r0..(r0 + h).min(w) {
                for c in c0..(c0 + wd).min(w) {
                    t[r * w + c] = 1.0;
                }
            }
        }
        attempts += 1;
        if !templates.contains(&t) || attempts > 10_000 {
            templates.push(t);
        }
    }
    Ok(templates)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.cols() {
            return Err(ModelError::DimensionMismatch {
                expected: weights.cols(),
                actual: bias.len(),
            });
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(Self { weights, bias })
    }

    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Matrix::zeros(inputs, outputs),
            bias: vec![0.0; outputs],
        }
    }

    fn xavier(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let data = (0..inputs * outputs).map(|_| rng.random_range(-limit..limit)).collect();
        Self {
            weights: Matrix::new(inputs, outputs, data).expect("finite init"),
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.weights.vec_mul(x).expect("caller validated dims");
        out.iter_mut().zip(&self.bias).for_each(|(o, b)| *o += b);
        out
    }

    /// Gradient with respect to the layer input, `δ · Wᵀ`.
    fn backward_input(&self, delta: &[f64]) -> Vec<f64> {
        self.weights.mul_vec(delta).expect("caller validated dims")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    Mlp1,
}

/// A linear-softmax or one-hidden-layer ReLU classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    hidden: Option<Dense>,
    output: Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: usize,
    pub distribution: Vec<f64>,
    pub logits: Vec<f64>,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let distribution = softmax(&logits);
        let label = argmax(&distribution);
        Self {
            label,
            distribution,
            logits,
        }
    }

    /// Class indices ordered by decreasing probability, ties by lower index.
    pub fn ranked(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.distribution.len()).collect();
        idx.sort_by(|&a, &b| self.distribution[b].total_cmp(&self.distribution[a]).then(a.cmp(&b)));
        idx
    }

    pub fn in_top_k(&self, class: usize, k: usize) -> bool {
        self.ranked().iter().take(k).any(|&c| c == class)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Total-variation distance between two distributions.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

impl Classifier {
    pub fn linear(output: Dense) -> Self {
        Self { hidden: None, output }
    }

    pub fn mlp1(hidden: Dense, output: Dense) -> Result<Self> {
        if hidden.outputs() != output.inputs() {
            return Err(ModelError::DimensionMismatch {
                expected: hidden.outputs(),
                actual: output.inputs(),
            });
        }
        Ok(Self {
            hidden: Some(hidden),
            output,
        })
    }

    /// Randomly initialized (untrained) model, mainly for experiments that
    /// only need some fixed deterministic `f`.
    pub fn random(arch: Architecture, dim: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |i, o| {
            let mut d = Dense::xavier(i, o, &mut rng);
            d.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
            d
        };
        match arch {
            Architecture::Linear => Self::linear(init(dim, classes)),
            Architecture::Mlp1 => Self {
                hidden: Some(init(dim, hidden)),
                output: init(hidden, classes),
            },
        }
    }

    pub fn architecture(&self) -> Architecture {
        if self.hidden.is_some() {
            Architecture::Mlp1
        } else {
            Architecture::Linear
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.as_ref().unwrap_or(&self.output).inputs()
    }

    pub fn classes(&self) -> usize {
        self.output.outputs()
    }

    pub fn hidden_width(&self) -> Option<usize> {
        self.hidden.as_ref().map(Dense::outputs)
    }

    pub fn has_gradients(&self) -> bool {
        true
    }

    pub fn hidden_layer(&self) -> Option<&Dense> {
        self.hidden.as_ref()
    }

    pub fn output_layer(&self) -> &Dense {
        &self.output
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(ModelError::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(())
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        self.check_input(x)?;
        let logits = match &self.hidden {
            Some(h) => {
                let z: Vec<f64> = h.forward(x).into_iter().map(relu).collect();
                self.output.forward(&z)
            }
            None => self.output.forward(x),
        };
        Ok(Prediction::from_logits(logits))
    }

    /// Post-activation hidden representation; the tap point for patching.
    pub fn hidden_activation(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let h = self.hidden.as_ref().ok_or(ModelError::NoHiddenTap)?;
        Ok(h.forward(x).into_iter().map(relu).collect())
    }

    /// Completes the forward pass from a supplied hidden activation.
    pub fn predict_from_hidden(&self, z: &[f64]) -> Result<Prediction> {
        let width = self.hidden_width().ok_or(ModelError::NoHiddenTap)?;
        if z.len() != width {
            return Err(ModelError::DimensionMismatch {
                expected: width,
                actual: z.len(),
            });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(Prediction::from_logits(self.output.forward(z)))
    }

    /// `∂ log p_target / ∂x` by backpropagation.
    pub fn input_gradient(&self, x: &[f64], target: usize) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if target >= self.classes() {
            return Err(ModelError::ClassOutOfRange {
                class: target,
                classes: self.classes(),
            });
        }
        let (pre, act) = match &self.hidden {
            Some(h) => {
                let pre = h.forward(x);
                let act: Vec<f64> = pre.iter().copied().map(relu).collect();
                (Some(pre), act)
            }
            None => (None, x.to_vec()),
        };
        let p = softmax(&self.output.forward(&act));
        let mut delta: Vec<f64> = p.iter().map(|pc| -pc).collect();
        delta[target] += 1.0;
        let mut grad = self.output.backward_input(&delta);
        if let (Some(h), Some(pre)) = (&self.hidden, pre) {
            grad.iter_mut().zip(&pre).for_each(|(g, z)| {
                if *z <= 0.0 {
                    *g = 0.0;
                }
            });
            grad = h.backward_input(&grad);
        }
        Ok(grad)
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let mut correct = 0usize;
        for (x, &y) in data.inputs().iter().zip(data.labels()) {
            if self.predict(x)?.label == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }

    fn is_finite(&self) -> bool {
        let dense_ok = |d: &Dense| d.weights.is_finite() && d.bias.iter().all(|b| b.is_finite());
        dense_ok(&self.output) && self.hidden.as_ref().map_or(true, dense_ok)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Mlp1,
            hidden: 16,
            epochs: 30,
            lr: 0.1,
            batch_size: 16,
            seed: 0,
        }
    }
}

struct Grads {
    hidden: Option<Dense>,
    output: Dense,
}

/// Mini-batch gradient descent on mean cross-entropy.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<Classifier> {
    if !(cfg.lr > 0.0) || !cfg.lr.is_finite() {
        return Err(ModelError::BadSpec("lr must be > 0".into()));
    }
    if cfg.batch_size == 0 || (cfg.architecture == Architecture::Mlp1 && cfg.hidden == 0) {
        return Err(ModelError::BadSpec("batch_size and hidden must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (d, b) = (data.dim(), data.classes());
    let mut model = match cfg.architecture {
        Architecture::Linear => Classifier::linear(Dense::xavier(d, b, &mut rng)),
        Architecture::Mlp1 => Classifier {
            hidden: Some(Dense::xavier(d, cfg.hidden, &mut rng)),
            output: Dense::xavier(cfg.hidden, b, &mut rng),
        },
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Grads {
                hidden: model.hidden.as_ref().map(|h| Dense::zeros(h.inputs(), h.outputs())),
                output: Dense::zeros(model.output.inputs(), model.output.outputs()),
            };
            for &i in batch {
                let (x, y) = data.sample(i);
                epoch_loss += accumulate(&model, x, y, &mut grads);
            }
            let step = cfg.lr / batch.len() as f64;
            apply(&mut model.output, &grads.output, step);
            if let (Some(h), Some(g)) = (model.hidden.as_mut(), grads.hidden.as_ref()) {
                apply(h, g, step);
            }
        }
        let loss = epoch_loss / data.len() as f64;
        if !loss.is_finite() || !model.is_finite() {
            return Err(ModelError::Diverged { epoch, loss });
        }
    }
    Ok(model)
}

/// Adds the cross-entropy gradient of one sample into `grads`, returns its
/// loss.
fn accumulate(model: &Classifier, x: &[f64], y: usize, grads: &mut Grads) -> f64 {
    let (pre, act) = match &model.hidden {
        Some(h) => {
            let pre = h.forward(x);
            let act: Vec<f64> = pre.iter().copied().map(relu).collect();
            (Some(pre), act)
        }
        None => (None, x.to_vec()),
    };
    let p = softmax(&model.output.forward(&act));
    let loss = -p[y].max(1e-300).ln();
    // dL/dlogits = p - onehot(y)
    let mut delta = p;
    delta[y] -= 1.0;
    outer_add(&mut grads.output, &act, &delta);
    if let (Some(gh), Some(pre)) = (grads.hidden.as_mut(), pre) {
        let mut dh = model.output.backward_input(&delta);
        dh.iter_mut().zip(&pre).for_each(|(g, z)| {
            if *z <= 0.0 {
                *g = 0.0;
            }
        });
        outer_add(gh, x, &dh);
    }
    loss
}

fn outer_add(g: &mut Dense, input: &[f64], delta: &[f64]) {
    for (r, &xi) in input.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (c, &dc) in delta.iter().enumerate() {
            let v = g.weights.get(r, c) + xi * dc;
            g.weights.set(r, c, v);
        }
    }
    g.bias.iter_mut().zip(delta).for_each(|(b, d)| *b += d);
}

fn apply(layer: &mut Dense, grad: &Dense, step: f64) {
    for r in 0..layer.inputs() {
        for c in 0..layer.outputs() {
            let v = layer.weights.get(r, c) - step * grad.weights.get(r, c);
            layer.weights.set(r, c, v);
        }
    }
    layer.bias.iter_mut().zip(&grad.bias).for_each(|(b, g)| *b -= step * g);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn blobs(classes: usize, noise: f64, seed: u64) -> Dataset {
        generate_synthetic(&SyntheticSpec {
            kind: SyntheticKind::Blobs,
            classes,
            dim: 2,
            per_class: 50,
            noise,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn zero_noise_blobs_sit_on_centers() {
        let d = blobs(2, 0.0, 1);
        for class in 0..2 {
            let members: Vec<_> = d.inputs().iter().zip(d.labels()).filter(|(_, &l)| l == class).collect();
            assert!(members.windows(2).all(|w| w[0].0 == w[1].0));
        }
    }

    #[test]
    fn grid_patterns_are_deterministic_and_need_square_dim() {
        let spec = SyntheticSpec {
            kind: SyntheticKind::GridPatterns,
            classes: 4,
            dim: 64,
            per_class: 5,
            noise: 0.1,
            seed: 3,
        };
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let bad = SyntheticSpec { dim: 60, ..spec };
        assert!(matches!(generate_synthetic(&bad), Err(ModelError::BadSpec(_))));
    }

    #[test]
    fn noisy_blobs_are_nearest_center_separable() {
        let d = blobs(3, 0.1, 5);
        let clean = blobs(3, 0.0, 5);
        // class centers recovered from the noise-free twin with the same seed
        let centers: Vec<Vec<f64>> = (0..3)
            .map(|c| clean.inputs()[clean.labels().iter().position(|&l| l == c).unwrap()].clone())
            .collect();
        let correct = d
            .inputs()
            .iter()
            .zip(d.labels())
            .filter(|(x, &y)| {
                let dists: Vec<f64> = centers
                    .iter()
                    .map(|c| -c.iter().zip(x.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                    .collect();
                argmax(&dists) == y
            })
            .count();
        assert!(correct as f64 / d.len() as f64 >= 0.99);
    }

    #[test]
    fn linear_model_fits_separable_blobs() {
        let d = blobs(3, 0.3, 8);
        let cfg = TrainConfig {
            architecture: Architecture::Linear,
            epochs: 50,
            lr: 0.1,
            ..TrainConfig::default()
        };
        let model = train(&d, &cfg).unwrap();
        assert!(model.accuracy(&d).unwrap() >= 0.95);
    }

    #[test]
    fn single_class_dataset_trains_to_full_accuracy() {
        let d = Dataset::new(vec![vec![1.0, 2.0], vec![0.5, -1.0], vec![3.0, 0.0]], vec![0, 0, 0], 1).unwrap();
        let model = train(&d, &TrainConfig::default()).unwrap();
        assert_eq!(model.accuracy(&d).unwrap(), 1.0);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let d = blobs(3, 0.5, 2);
        let cfg = TrainConfig { seed: 77, epochs: 5, ..TrainConfig::default() };
        assert_eq!(train(&d, &cfg).unwrap(), train(&d, &cfg).unwrap());
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let d = Dataset::new(vec![vec![1e150, -1e150], vec![-1e150, 1e150]], vec![0, 1], 2).unwrap();
        let cfg = TrainConfig {
            architecture: Architecture::Linear,
            lr: 1e200,
            epochs: 3,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&d, &cfg), Err(ModelError::Diverged { .. })));
    }

    #[test]
    fn zero_weight_model_is_uniform() {
        let model = Classifier::linear(Dense::zeros(3, 4));
        let p = model.predict(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(p.label, 0);
        assert!(p.distribution.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn hand_set_linear_model() {
        // logits = [x0 - x1, -(x0 - x1)]
        let w = Matrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let model = Classifier::linear(Dense::new(w, vec![0.0, 0.0]).unwrap());
        let p = model.predict(&[2.0, 0.0]).unwrap();
        assert_eq!(p.label, 0);
        let expected = 1.0 / (1.0 + (-4.0f64).exp());
        assert!((p.distribution[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn predict_rejects_bad_inputs() {
        let model = Classifier::random(Architecture::Linear, 3, 0, 2, 0);
        assert!(matches!(model.predict(&[1.0]), Err(ModelError::DimensionMismatch { .. })));
        assert_eq!(model.predict(&[1.0, f64::NAN, 0.0]).unwrap_err(), ModelError::NonFinite);
        assert_eq!(model.hidden_activation(&[1.0, 2.0, 3.0]).unwrap_err(), ModelError::NoHiddenTap);
    }

    #[test]
    fn linear_gradient_closed_form() {
        let model = Classifier::random(Architecture::Linear, 4, 0, 3, 11);
        let x = [0.3, -1.2, 2.0, 0.7];
        let p = model.predict(&x).unwrap().distribution;
        let w = &model.output_layer().weights;
        let g = model.input_gradient(&x, 1).unwrap();
        for i in 0..4 {
            let expected = w.get(i, 1) - (0..3).map(|c| p[c] * w.get(i, c)).sum::<f64>();
            assert!((g[i] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn tied_features_get_equal_gradients() {
        let w = Matrix::from_rows(&[vec![0.5, -0.2], vec![0.5, -0.2], vec![1.0, 3.0]]).unwrap();
        let model = Classifier::linear(Dense::new(w, vec![0.1, 0.0]).unwrap());
        let g = model.input_gradient(&[1.5, 1.5, -0.3], 0).unwrap();
        assert_eq!(g[0], g[1]);
    }

    #[test]
    fn dataset_csv_round_trip_and_bad_line() {
        let d = blobs(2, 0.2, 4);
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice(), Some(2)).unwrap();
        assert_eq!(back.inputs(), d.inputs());
        assert_eq!(back.labels(), d.labels());

        let text = "f0,f1,label\n1,2,0\n3,4,1\n5,oops,0\n";
        match Dataset::read_csv(text.as_bytes(), None) {
            Err(ModelError::Csv { line: 4, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let text = "f0,label\n1,0\n2,5\n";
        assert!(matches!(Dataset::read_csv(text.as_bytes(), Some(2)), Err(ModelError::Csv { line: 3, .. })));
    }

    fn finite_difference(model: &Classifier, x: &[f64], target: usize) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                let lp = model.predict(&xp).unwrap().distribution[target].ln();
                let lm = model.predict(&xm).unwrap().distribution[target].ln();
                (lp - lm) / (2.0 * h)
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn prediction_is_normalized(seed in 0u64..1000, xs in prop::collection::vec(-5.0f64..5.0, 6)) {
            let model = Classifier::random(Architecture::Mlp1, 6, 8, 4, seed);
            let p = model.predict(&xs).unwrap();
            prop_assert!((p.distribution.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(p.distribution.iter().all(|v| *v >= 0.0));
            prop_assert_eq!(p.label, argmax(&p.distribution));
        }

        #[test]
        fn gradient_matches_finite_differences(seed in 0u64..1000, xs in prop::collection::vec(-2.0f64..2.0, 5), target in 0usize..3) {
            let model = Classifier::random(Architecture::Mlp1, 5, 7, 3, seed);
            let g = model.input_gradient(&xs, target).unwrap();
            let fd = finite_difference(&model, &xs, target);
            let scale = g.iter().fold(1e-8f64, |m, v| m.max(v.abs()));
            let err = g.iter().zip(&fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale;
            prop_assert!(err <= 1e-4, "relative error {}", err);
        }
    }
}
