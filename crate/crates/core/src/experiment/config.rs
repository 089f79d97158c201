//! Strict TOML experiment configuration.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lpnorm::{LpNormLayer, NormOrder, RadiusParam};
use crate::render::Bounds;
use crate::train::{Optimizer, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: unknown key `{key}`", path.display())]
    UnknownKey { path: PathBuf, key: String },

    #[error("{}: invalid value for `{key}`: {message}", path.display())]
    Invalid {
        path: PathBuf,
        key: String,
        message: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Boundary,
    BayesDim,
    PSweep,
    AlphaSweep,
    ProbeSilhouette,
    Projection,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Boundary => "boundary",
            Kind::BayesDim => "bayes-dim",
            Kind::PSweep => "p-sweep",
            Kind::AlphaSweep => "alpha-sweep",
            Kind::ProbeSilhouette => "probe-silhouette",
            Kind::Projection => "projection",
        }
    }
}

/// A norm order as written in a config: `"1"`, `"2"`, `"inf"`,
/// `"learnable"` or any number >= 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Scalar", into = "Scalar")]
pub enum PChoice {
    One,
    Two,
    Inf,
    Learnable,
    Value(f64),
}

/// `"learnable"` or a positive number.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Scalar", into = "Scalar")]
pub enum AlphaChoice {
    Learnable,
    Value(f64),
}

/// One sweep entry: `"none"` (no lp layer) or a [`PChoice`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Scalar", into = "Scalar")]
pub enum NormChoice {
    None,
    Lp(PChoice),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum Scalar {
    Text(String),
    Number(f64),
}

impl TryFrom<Scalar> for PChoice {
    type Error = String;

    fn try_from(s: Scalar) -> Result<Self, String> {
        let v = match s {
            Scalar::Number(v) => v,
            Scalar::Text(t) => match t.trim() {
                "1" => return Ok(PChoice::One),
                "2" => return Ok(PChoice::Two),
                "inf" | "infinity" => return Ok(PChoice::Inf),
                "learnable" => return Ok(PChoice::Learnable),
                other => other
                    .parse::<f64>()
                    .map_err(|_| format!("expected \"1\", \"2\", \"inf\", \"learnable\" or a number, got {other:?}"))?,
            },
        };
        if v == 1.0 {
            Ok(PChoice::One)
        } else if v == 2.0 {
            Ok(PChoice::Two)
        } else if v == f64::INFINITY {
            Ok(PChoice::Inf)
        } else if v > 1.0 && v.is_finite() {
            Ok(PChoice::Value(v))
        } else {
            Err(format!("norm order must be >= 1, got {v}"))
        }
    }
}

impl From<PChoice> for Scalar {
    fn from(p: PChoice) -> Self {
        match p {
            PChoice::Value(v) => Scalar::Number(v),
            other => Scalar::Text(other.to_string()),
        }
    }
}

impl fmt::Display for PChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PChoice::One => f.write_str("1"),
            PChoice::Two => f.write_str("2"),
            PChoice::Inf => f.write_str("inf"),
            PChoice::Learnable => f.write_str("learnable"),
            PChoice::Value(v) => write!(f, "{v}"),
        }
    }
}

impl PChoice {
    pub fn order(self) -> NormOrder {
        match self {
            PChoice::One => NormOrder::One,
            PChoice::Two => NormOrder::Two,
            PChoice::Inf => NormOrder::Inf,
            PChoice::Learnable => NormOrder::learnable(),
            PChoice::Value(v) => NormOrder::General(v),
        }
    }

    /// Short file-name friendly label: `p1`, `p2`, `pinf`, `learnable`, `p3.5`.
    pub fn label(self) -> String {
        match self {
            PChoice::Learnable => "learnable".into(),
            other => format!("p{other}"),
        }
    }
}

impl TryFrom<Scalar> for AlphaChoice {
    type Error = String;

    fn try_from(s: Scalar) -> Result<Self, String> {
        let v = match s {
            Scalar::Text(t) if t.trim() == "learnable" => return Ok(AlphaChoice::Learnable),
            Scalar::Text(t) => t
                .trim()
                .parse::<f64>()
                .map_err(|_| format!("expected \"learnable\" or a positive number, got {t:?}"))?,
            Scalar::Number(v) => v,
        };
        if v > 0.0 && v.is_finite() {
            Ok(AlphaChoice::Value(v))
        } else {
            Err(format!("alpha must be positive and finite, got {v}"))
        }
    }
}

impl From<AlphaChoice> for Scalar {
    fn from(a: AlphaChoice) -> Self {
        match a {
            AlphaChoice::Learnable => Scalar::Text("learnable".into()),
            AlphaChoice::Value(v) => Scalar::Number(v),
        }
    }
}

impl AlphaChoice {
    pub fn radius(self) -> RadiusParam {
        match self {
            AlphaChoice::Learnable => RadiusParam::learnable(),
            AlphaChoice::Value(v) => RadiusParam::Fixed(v),
        }
    }

    pub fn label(self) -> String {
        match self {
            AlphaChoice::Learnable => "alpha-learnable".into(),
            AlphaChoice::Value(v) => format!("alpha{v}"),
        }
    }
}

impl TryFrom<Scalar> for NormChoice {
    type Error = String;

    fn try_from(s: Scalar) -> Result<Self, String> {
        match s {
            Scalar::Text(t) if t.trim() == "none" => Ok(NormChoice::None),
            other => PChoice::try_from(other).map(NormChoice::Lp),
        }
    }
}

impl From<NormChoice> for Scalar {
    fn from(n: NormChoice) -> Self {
        match n {
            NormChoice::None => Scalar::Text("none".into()),
            NormChoice::Lp(p) => p.into(),
        }
    }
}

impl NormChoice {
    pub fn label(self) -> String {
        match self {
            NormChoice::None => "none".into(),
            NormChoice::Lp(p) => p.label(),
        }
    }

    pub fn layer(self, alpha: AlphaChoice) -> Option<LpNormLayer> {
        match self {
            NormChoice::None => None,
            NormChoice::Lp(p) => Some(LpNormLayer::new(p.order(), alpha.radius())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormSection {
    /// `false` removes the lp layer from every run.
    pub enabled: bool,
    pub p: PChoice,
    pub alpha: AlphaChoice,
    /// Norm settings compared by the boundary, bayes-dim and p-sweep kinds.
    pub settings: Option<Vec<NormChoice>>,
}

impl Default for NormSection {
    fn default() -> Self {
        NormSection {
            enabled: true,
            p: PChoice::Two,
            alpha: AlphaChoice::Value(1.0),
            settings: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    /// Width of the first hidden layer.
    pub hidden: usize,
    /// Penultimate width where a single one is used.
    pub penultimate: usize,
    /// Penultimate widths swept by the bayes-dim kind.
    pub dims: Vec<usize>,
    /// Hidden widths of the probe family.
    pub probe_hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: crate::models::POC_HIDDEN,
            penultimate: 2,
            dims: vec![2, 4, 8, 16],
            probe_hidden: vec![0, 128, 512, 2048, 4096],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    /// `0` trains full-batch.
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Defaults to the members of {100, 250, 500} not beyond `epochs`,
    /// or `[epochs]` if there are none.
    pub eval_epochs: Option<Vec<usize>>,
    /// Bayes deviation is also measured every this many epochs.
    pub eval_every: usize,
    pub shuffle: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 500,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eval_epochs: None,
            eval_every: 10,
            shuffle: true,
        }
    }
}

impl TrainSection {
    pub fn eval_epochs(&self) -> Vec<usize> {
        match &self.eval_epochs {
            Some(e) => e.clone(),
            None => {
                let e: Vec<usize> = [100, 250, 500].into_iter().filter(|&e| e <= self.epochs).collect();
                if e.is_empty() {
                    vec![self.epochs]
                } else {
                    e
                }
            }
        }
    }

    pub fn optimizer(&self) -> Optimizer {
        match self.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd { lr: self.lr },
            OptimizerKind::Adam => Optimizer::Adam {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: (self.batch_size > 0).then_some(self.batch_size),
            optimizer: self.optimizer(),
            seed,
            eval_epochs: self.eval_epochs(),
            shuffle: self.shuffle,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub n_per_class: usize,
    pub val_per_class: usize,
    pub deviation_samples: usize,
    /// Train on this CSV instead of sampling the synthetic mixture.
    pub train_csv: Option<PathBuf>,
    pub val_csv: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_per_class: 250,
            val_per_class: 250,
            deviation_samples: 100_000,
            train_csv: None,
            val_csv: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSection {
    pub resolution: usize,
    /// `[xmin, xmax, ymin, ymax]`.
    pub bounds: [f64; 4],
}

impl Default for RenderSection {
    fn default() -> Self {
        let b = Bounds::default();
        RenderSection {
            resolution: crate::render::DEFAULT_RESOLUTION,
            bounds: [b.xmin, b.xmax, b.ymin, b.ymax],
        }
    }
}

impl RenderSection {
    pub fn bounds(&self) -> Bounds {
        let [xmin, xmax, ymin, ymax] = self.bounds;
        Bounds { xmin, xmax, ymin, ymax }
    }
}

fn default_trials() -> usize {
    5
}

fn default_seed() -> u64 {
    42
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: Kind,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub norm: NormSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub render: RenderSection,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// First line of a toml error message, without the source excerpt.
fn bare_message(e: &toml::de::Error) -> String {
    e.message().lines().next().unwrap_or_default().to_string()
}

impl ExperimentConfig {
    /// Parses `text`; `origin` only labels error messages.
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let parse_error = |e: toml::de::Error| ConfigError::Parse {
            path: origin.to_path_buf(),
            line: e.span().map_or(1, |s| line_of(text, s.start)),
            message: bare_message(&e),
        };
        let de = toml::Deserializer::parse(text).map_err(parse_error)?;
        let mut unknown = Vec::new();
        let cfg: ExperimentConfig =
            serde_ignored::deserialize(de, |key| unknown.push(key.to_string())).map_err(parse_error)?;
        if let Some(key) = unknown.into_iter().next() {
            return Err(ConfigError::UnknownKey {
                path: origin.to_path_buf(),
                key,
            });
        }
        cfg.validate(origin)?;
        Ok(cfg)
    }

    pub fn validate(&self, origin: &Path) -> Result<(), ConfigError> {
        let invalid = |key: &str, message: String| ConfigError::Invalid {
            path: origin.to_path_buf(),
            key: key.into(),
            message,
        };
        if self.trials == 0 {
            return Err(invalid("trials", "must be >= 1".into()));
        }
        if self.model.hidden == 0 {
            return Err(invalid("model.hidden", "must be >= 1".into()));
        }
        if self.model.penultimate == 0 {
            return Err(invalid("model.penultimate", "must be >= 1".into()));
        }
        if self.model.dims.is_empty() || self.model.dims.contains(&0) {
            return Err(invalid("model.dims", "must be a non-empty list of widths >= 1".into()));
        }
        if self.model.probe_hidden.is_empty() {
            return Err(invalid("model.probe_hidden", "must not be empty".into()));
        }
        if let Some(s) = &self.norm.settings {
            if s.is_empty() {
                return Err(invalid("norm.settings", "must not be empty".into()));
            }
        }
        let t = &self.train;
        if t.epochs == 0 {
            return Err(invalid("train.epochs", "must be >= 1".into()));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(invalid("train.lr", format!("must be positive and finite, got {}", t.lr)));
        }
        for (key, b) in [("train.beta1", t.beta1), ("train.beta2", t.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(key, format!("must lie in [0, 1), got {b}")));
            }
        }
        if !(t.eps > 0.0) {
            return Err(invalid("train.eps", "must be positive".into()));
        }
        if let Some(&e) = t.eval_epochs().iter().find(|&&e| e == 0 || e > t.epochs) {
            return Err(invalid("train.eval_epochs", format!("epoch {e} outside 1..={}", t.epochs)));
        }
        if t.eval_every == 0 {
            return Err(invalid("train.eval_every", "must be >= 1".into()));
        }
        let d = &self.data;
        if d.n_per_class == 0 || d.val_per_class == 0 {
            return Err(invalid("data.n_per_class", "class sizes must be >= 1".into()));
        }
        if d.deviation_samples < crate::data::MIN_DEVIATION_SAMPLES {
            return Err(invalid(
                "data.deviation_samples",
                format!("must be >= {}", crate::data::MIN_DEVIATION_SAMPLES),
            ));
        }
        if self.render.resolution < 2 {
            return Err(invalid("render.resolution", "must be >= 2".into()));
        }
        let b = self.render.bounds;
        if !(b.iter().all(|v| v.is_finite()) && b[1] > b[0] && b[3] > b[2]) {
            return Err(invalid("render.bounds", "need finite xmin < xmax, ymin < ymax".into()));
        }
        if self.kind == Kind::AlphaSweep && !self.norm.enabled {
            return Err(invalid("norm.enabled", "alpha-sweep needs the lp layer".into()));
        }
        Ok(())
    }

    /// Norm settings compared by the sweep kinds.
    pub fn settings(&self) -> Vec<NormChoice> {
        if !self.norm.enabled {
            return vec![NormChoice::None];
        }
        if let Some(s) = &self.norm.settings {
            return s.clone();
        }
        let lp = [PChoice::One, PChoice::Two, PChoice::Inf, PChoice::Learnable].map(NormChoice::Lp);
        match self.kind {
            Kind::PSweep => lp.to_vec(),
            Kind::Projection => lp[..3].to_vec(),
            _ => std::iter::once(NormChoice::None).chain(lp).collect(),
        }
    }

    /// The single lp layer used by kinds that take one, or `None` when
    /// disabled.
    pub fn single_layer(&self) -> Option<LpNormLayer> {
        self.norm
            .enabled
            .then(|| LpNormLayer::new(self.norm.p.order(), self.norm.alpha.radius()))
    }

    /// Stable digest of the fully defaulted configuration.
    pub fn hash(&self) -> String {
        super::digest(&serde_json::to_string(self).expect("config serialises"))
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    ExperimentConfig::from_toml_str(&text, path)
}
