//! Experiment configuration: a single TOML file, fully validated before
//! anything runs.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use recurx::engine::{Property, PropertySuite};
use recurx::explain_feature::{Scorer, SelectionRule};
use recurx::explain_proto::Distance;
use recurx::explain_sae::Nonlinearity;
use recurx::models::{Architecture, SyntheticKind};

/// Only this variable is read from the environment; it overrides
/// `output.dir`.
pub const OUT_DIR_ENV: &str = "RECURX_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigError {
    Io { path: PathBuf, reason: String },
    ParseError { line: usize, key: String, message: String },
    ValidationError { key: String, reason: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io { path, reason } => write!(f, "cannot read {}: {reason}", path.display()),
            ConfigError::ParseError { line, key, message } => write!(f, "line {line}, key `{key}`: {message}"),
            ConfigError::ValidationError { key, reason } => write!(f, "invalid `{key}`: {reason}"),
        }
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    /// The offending key, when the error names one.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Io { .. } => None,
            ConfigError::ParseError { key, .. } | ConfigError::ValidationError { key, .. } => Some(key),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Feature,
    Proto,
    Sae,
    LinearMc,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Feature => "feature",
            ExperimentKind::Proto => "proto",
            ExperimentKind::Sae => "sae",
            ExperimentKind::LinearMc => "linear_mc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Label used in report rows; defaults to the generator kind or the
    /// file stem.
    pub tag: Option<String>,
    /// CSV file with header `f0,...,label`; replaces the generator.
    pub path: Option<PathBuf>,
    pub kind: SyntheticKind,
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub noise: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            tag: None,
            path: None,
            kind: SyntheticKind::GridPatterns,
            classes: 4,
            dim: 64,
            per_class: 50,
            noise: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// JSON classifier written by an earlier run; replaces training.
    pub path: Option<PathBuf>,
    pub architecture: Architecture,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            path: None,
            architecture: Architecture::Mlp1,
            hidden: 16,
            epochs: 30,
            lr: 0.1,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub scorer: Scorer,
    pub rule: SelectionRule,
    pub max_remove_fraction: f64,
    /// Test inputs to explain, from the start of the test split.
    pub inputs: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            scorer: Scorer::Occlusion,
            rule: SelectionRule::TopK(8),
            max_remove_fraction: 0.25,
            inputs: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtoConfig {
    /// Prototype CSV; replaces the generated sweep with one system.
    pub prototypes_path: Option<PathBuf>,
    pub n_prototypes: Vec<usize>,
    pub systems: usize,
    pub latent_dim: usize,
    pub ridge: f64,
    pub rounds: usize,
    pub jitter: f64,
    pub distance: Distance,
    /// Test inputs per system; `0` uses the whole test split.
    pub test_inputs: usize,
}

impl Default for ProtoConfig {
    fn default() -> Self {
        Self {
            prototypes_path: None,
            n_prototypes: vec![10, 20, 50, 100],
            systems: 20,
            latent_dim: 8,
            ridge: 0.5,
            rounds: 3,
            jitter: 1.0,
            distance: Distance::Euclidean,
            test_inputs: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaeConfig {
    /// `sae.json` manifest; replaces training.
    pub weights_path: Option<PathBuf>,
    pub h_dim: usize,
    pub k: usize,
    pub nonlinearity: Nonlinearity,
    pub epochs: usize,
    pub lr: f64,
    pub inputs: usize,
    pub zero_tol: f64,
    pub conv_tol: f64,
    pub diverge_tol: f64,
}

impl Default for SaeConfig {
    fn default() -> Self {
        Self {
            weights_path: None,
            h_dim: 32,
            k: 8,
            nonlinearity: Nonlinearity::TopK,
            epochs: 200,
            lr: 0.05,
            inputs: 50,
            zero_tol: 1e-8,
            conv_tol: 1e-9,
            diverge_tol: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearMcConfig {
    pub dim: usize,
    pub contractive: usize,
    pub expansive: usize,
    pub budget: usize,
}

impl Default for LinearMcConfig {
    fn default() -> Self {
        Self {
            dim: 10,
            contractive: 1000,
            expansive: 1000,
            budget: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write every trace to `traces.json`.
    pub traces: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            traces: true,
        }
    }
}

fn default_budget() -> usize {
    recurx::engine::DEFAULT_BUDGET
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Master seed; every other seed derives from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub feature: FeatureConfig,
    #[serde(default)]
    pub proto: ProtoConfig,
    #[serde(default)]
    pub sae: SaeConfig,
    #[serde(default)]
    pub linear_mc: LinearMcConfig,
    /// Property suite; omitted means the kind's default suite.
    #[serde(default)]
    pub properties: Option<Vec<Property>>,
    #[serde(default)]
    pub output: OutputConfig,
    /// SHA-256 of the source text.
    #[serde(skip)]
    pub source_sha256: String,
}

impl ExperimentConfig {
    pub fn suite(&self) -> PropertySuite {
        let properties = self.properties.clone().unwrap_or_else(|| match self.kind {
            ExperimentKind::Feature => vec![Property::LabelPreserved, Property::CorrectLabel { label: None }],
            ExperimentKind::Proto => vec![Property::LabelPreserved],
            ExperimentKind::Sae => vec![
                Property::CorrectLabel { label: None },
                Property::TopKAgreement { k: 3, label: None },
                Property::DistributionClose { tau: 0.05 },
            ],
            ExperimentKind::LinearMc => Vec::new(),
        });
        PropertySuite { properties }
    }

    pub fn dataset_tag(&self) -> String {
        if let Some(tag) = &self.dataset.tag {
            return tag.clone();
        }
        if let Some(path) = &self.dataset.path {
            return path.file_stem().map_or_else(|| "dataset".to_owned(), |s| s.to_string_lossy().into_owned());
        }
        match self.dataset.kind {
            SyntheticKind::Blobs => "blobs".into(),
            SyntheticKind::GridPatterns => "grid_patterns".into(),
        }
    }
}

/// Reads and validates `path`; relative paths inside the file resolve
/// against its directory.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.to_owned(),
        reason: e.to_string(),
    })?;
    parse_config_str(&text, path.parent().unwrap_or(Path::new("")))
}

pub fn parse_config_str(text: &str, base: &Path) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
    cfg.source_sha256 = hex::encode(Sha256::digest(text.as_bytes()));
    let resolve = |p: &mut Option<PathBuf>| {
        if let Some(path) = p.as_mut().filter(|p| p.is_relative()) {
            *path = base.join(&*path);
        }
    };
    resolve(&mut cfg.dataset.path);
    resolve(&mut cfg.model.path);
    resolve(&mut cfg.proto.prototypes_path);
    resolve(&mut cfg.sae.weights_path);
    if cfg.output.dir.is_relative() {
        cfg.output.dir = base.join(&cfg.output.dir);
    }
    validate(&cfg)?;
    Ok(cfg)
}

fn parse_error(text: &str, err: &toml::de::Error) -> ConfigError {
    let message = err.message().to_owned();
    let offset = err.span().map_or(0, |s| s.start.min(text.len()));
    let line = text[..offset].matches('\n').count() + 1;
    let quoted = |prefix: &str| {
        message
            .find(prefix)
            .and_then(|i| message[i + prefix.len()..].split('`').next())
            .map(str::to_owned)
    };
    let key = quoted("unknown field `")
        .or_else(|| quoted("missing field `"))
        .or_else(|| key_on_line(text.lines().nth(line - 1).unwrap_or("")))
        .unwrap_or_else(|| "<document>".to_owned());
    ConfigError::ParseError { line, key, message }
}

/// The key assigned on a TOML line, or the table named by a header.
fn key_on_line(line: &str) -> Option<String> {
    let t = line.trim();
    if let Some(header) = t.strip_prefix('[') {
        let name = header.trim_start_matches('[').split(']').next()?.trim();
        return (!name.is_empty()).then(|| name.to_owned());
    }
    let (key, _) = t.split_once('=')?;
    let key = key.trim().trim_matches('"');
    (!key.is_empty()).then(|| key.to_owned())
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::ValidationError {
        key: key.to_owned(),
        reason: reason.into(),
    }
}

fn require(cond: bool, key: &str, reason: &str) -> Result<(), ConfigError> {
    if cond {
        Ok(())
    } else {
        Err(invalid(key, reason))
    }
}

fn require_file(path: &Option<PathBuf>, key: &str) -> Result<(), ConfigError> {
    match path {
        Some(p) if !p.is_file() => Err(invalid(key, format!("file {} does not exist", p.display()))),
        _ => Ok(()),
    }
}

/// Checks every bound; the first failure names its key.
pub fn validate(cfg: &ExperimentConfig) -> Result<(), ConfigError> {
    require(cfg.budget >= 1, "budget", "budget must be >= 1")?;

    let d = &cfg.dataset;
    require_file(&d.path, "dataset.path")?;
    if d.path.is_none() {
        require(d.classes >= 1, "dataset.classes", "classes must be >= 1")?;
        require(d.dim >= 1, "dataset.dim", "dim must be >= 1")?;
        require(d.per_class >= 4, "dataset.per_class", "per_class must be >= 4 so every class reaches the test split")?;
        require(d.noise.is_finite() && d.noise >= 0.0, "dataset.noise", "noise must be finite and >= 0")?;
        if d.kind == SyntheticKind::GridPatterns {
            let w = (d.dim as f64).sqrt().round() as usize;
            require(w * w == d.dim, "dataset.dim", "grid_patterns needs a perfect-square dim")?;
        }
    }

    let m = &cfg.model;
    require_file(&m.path, "model.path")?;
    require(m.hidden >= 1, "model.hidden", "hidden must be >= 1")?;
    require(m.epochs >= 1, "model.epochs", "epochs must be >= 1")?;
    require(m.lr.is_finite() && m.lr > 0.0, "model.lr", "lr must be > 0")?;
    require(m.batch_size >= 1, "model.batch_size", "batch_size must be >= 1")?;

    let f = &cfg.feature;
    require(f.max_remove_fraction > 0.0, "feature.max_remove_fraction", "max_remove_fraction must be > 0")?;
    require(f.max_remove_fraction <= 1.0, "feature.max_remove_fraction", "max_remove_fraction must be <= 1")?;
    if let SelectionRule::Threshold(t) = f.rule {
        require(t.is_finite(), "feature.rule", "threshold must be finite")?;
    }
    require(f.inputs >= 1, "feature.inputs", "inputs must be >= 1")?;

    let p = &cfg.proto;
    require_file(&p.prototypes_path, "proto.prototypes_path")?;
    require(!p.n_prototypes.is_empty(), "proto.n_prototypes", "n_prototypes must list at least one size")?;
    require(p.n_prototypes.iter().all(|&n| n >= 2), "proto.n_prototypes", "every size must be >= 2")?;
    require(p.systems >= 1, "proto.systems", "systems must be >= 1")?;
    require(p.latent_dim >= 1, "proto.latent_dim", "latent_dim must be >= 1")?;
    require(p.ridge.is_finite() && p.ridge > 0.0, "proto.ridge", "ridge must be > 0")?;
    require(p.rounds >= 1, "proto.rounds", "rounds must be >= 1")?;
    require(p.jitter.is_finite() && p.jitter >= 0.0, "proto.jitter", "jitter must be finite and >= 0")?;

    let s = &cfg.sae;
    require_file(&s.weights_path, "sae.weights_path")?;
    require(s.h_dim >= 1, "sae.h_dim", "h_dim must be >= 1")?;
    if s.nonlinearity == Nonlinearity::TopK {
        require((1..=s.h_dim).contains(&s.k), "sae.k", "k must lie in [1, h_dim]")?;
    }
    require(s.lr.is_finite() && s.lr > 0.0, "sae.lr", "lr must be > 0")?;
    require(s.inputs >= 1, "sae.inputs", "inputs must be >= 1")?;
    require(s.zero_tol > 0.0, "sae.zero_tol", "zero_tol must be > 0")?;
    require(s.conv_tol > 0.0, "sae.conv_tol", "conv_tol must be > 0")?;
    require(s.diverge_tol > 1.0, "sae.diverge_tol", "diverge_tol must be > 1")?;
    if cfg.kind == ExperimentKind::Sae && m.path.is_none() {
        require(m.architecture == Architecture::Mlp1, "model.architecture", "sae experiments need the mlp1 hidden layer")?;
    }

    let mc = &cfg.linear_mc;
    require(mc.dim >= 1, "linear_mc.dim", "dim must be >= 1")?;
    require(mc.budget >= 1, "linear_mc.budget", "budget must be >= 1")?;

    for (i, prop) in cfg.suite().properties.iter().enumerate() {
        PropertySuite {
            properties: vec![prop.clone()],
        }
        .validate()
        .map_err(|e| invalid(&format!("properties[{i}]"), e.to_string()))?;
    }
    Ok(())
}
