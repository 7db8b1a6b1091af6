//! Training configuration and its flat `key = value` form.

use std::fmt;
use std::str::FromStr;

use crate::engine::{SparsitySchedule, Variant};
use crate::error::DgcError;
use crate::kv::{parse_kv, ConfigError, KvEntry};
use crate::sparsify::{SelectionMethod, SparsityConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    QuadraticBowl,
    LogisticRegression,
    TinyMlp,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::QuadraticBowl => "quadratic",
            ModelKind::LogisticRegression => "logistic",
            ModelKind::TinyMlp => "mlp",
        }
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [
            ModelKind::QuadraticBowl,
            ModelKind::LogisticRegression,
            ModelKind::TinyMlp,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| format!("unknown model `{s}` (quadratic, logistic, mlp)"))
    }
}

/// Model and synthetic dataset parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Feature count (logistic) or parameter count (quadratic).
    pub dimension: usize,
    /// Hidden widths of the MLP.
    pub hidden: Vec<usize>,
    pub samples: usize,
    /// Logistic: features that carry class signal.
    pub informative: usize,
    /// Logistic: norm of each class mean; the two means sit at plus and minus.
    pub separation: f64,
    /// Standard deviation of the per-feature (or per-point) noise.
    pub noise: f64,
    /// Probability of flipping a label.
    pub label_noise: f64,
    pub l2: f64,
    pub quad_rank: usize,
    pub quad_ridge: f64,
    /// Quadratic: number of equal layout segments.
    pub layers: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            kind: ModelKind::LogisticRegression,
            dimension: 1000,
            hidden: vec![32, 32],
            samples: 4096,
            informative: 20,
            separation: 2.0,
            noise: 1.0,
            label_noise: 0.0,
            l2: 1e-4,
            quad_rank: 10,
            quad_ridge: 0.1,
            layers: 1,
        }
    }
}

/// What the nodes exchange and where momentum is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    /// Dense all-reduce, momentum SGD on the aggregate.
    Dense,
    /// Dense all-reduce, Nesterov momentum on the aggregate.
    DenseNesterov,
    Sparse(Variant),
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Dense => "dense",
            Algorithm::DenseNesterov => "dense_nesterov",
            Algorithm::Sparse(v) => v.name(),
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            Algorithm::Sparse(v) => Some(v),
            _ => None,
        }
    }

    /// The dense arm with the same momentum flavour.
    pub fn dense_counterpart(self) -> Algorithm {
        match self {
            Algorithm::DenseNesterov => Algorithm::DenseNesterov,
            Algorithm::Sparse(v) if v.is_nesterov() => Algorithm::DenseNesterov,
            _ => Algorithm::Dense,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dense" => Ok(Algorithm::Dense),
            "dense_nesterov" => Ok(Algorithm::DenseNesterov),
            _ => s
                .parse::<Variant>()
                .map(Algorithm::Sparse)
                .map_err(|_| format!("unknown algorithm `{s}`")),
        }
    }
}

/// Step decay: the rate is multiplied by `decay` at each listed epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub decay: f64,
    pub decay_epochs: Vec<usize>,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self {
            base,
            decay: 1.0,
            decay_epochs: Vec::new(),
        }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        let steps = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.base * self.decay.powi(steps as i32)
    }
}

/// Constants for the wall-clock estimate in the trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingModel {
    pub t_compute: f64,
    /// Bits per second.
    pub bandwidth: f64,
    pub latency: f64,
}

impl Default for TimingModel {
    fn default() -> Self {
        Self {
            t_compute: 0.1,
            bandwidth: 1e9,
            latency: 50e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub nodes: usize,
    /// Per-node batch size.
    pub batch: usize,
    pub momentum: f32,
    pub lr: LrSchedule,
    pub epochs: usize,
    /// `None` derives one pass over the data per epoch.
    pub iterations_per_epoch: Option<usize>,
    pub algorithm: Algorithm,
    pub momentum_masking: bool,
    pub schedule: SparsitySchedule,
    /// Selection settings; the target sparsity comes from `schedule`.
    pub selection: SparsityConfig,
    /// Global gradient-norm threshold for local clipping.
    pub clip_threshold: Option<f64>,
    pub seed: u64,
    pub timing: TimingModel,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            nodes: 4,
            batch: 32,
            momentum: 0.9,
            lr: LrSchedule {
                base: 0.1,
                decay: 0.1,
                decay_epochs: Vec::new(),
            },
            epochs: 10,
            iterations_per_epoch: None,
            algorithm: Algorithm::Sparse(Variant::VanillaCorrected),
            momentum_masking: true,
            schedule: SparsitySchedule::exponential_warmup(),
            selection: SparsityConfig::default(),
            clip_threshold: None,
            seed: 0,
            timing: TimingModel::default(),
        }
    }
}

/// Sparse runs at or above this sparsity need enough coordinates that every
/// scope keeps at least one.
const MIN_PARAMS_AT_HIGH_SPARSITY: usize = 1000;

impl TrainConfig {
    pub fn iterations_per_epoch(&self) -> usize {
        self.iterations_per_epoch
            .unwrap_or_else(|| (self.model.samples / (self.nodes * self.batch)).max(1))
    }

    pub fn total_iterations(&self) -> usize {
        self.epochs * self.iterations_per_epoch()
    }

    pub fn validate(&self) -> Result<(), DgcError> {
        let bad = |m: String| Err(DgcError::InvalidParameter(m));
        if self.nodes == 0 {
            return bad("nodes must be >= 1".into());
        }
        if self.batch == 0 {
            return bad("batch must be >= 1".into());
        }
        if !(self.lr.base > 0.0 && self.lr.base.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr.base));
        }
        if !(self.lr.decay > 0.0 && self.lr.decay.is_finite()) {
            return bad(format!("lr_decay {} must be positive", self.lr.decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.model.samples == 0 {
            return bad("samples must be >= 1".into());
        }
        if self.model.dimension == 0 {
            return bad("dimension must be >= 1".into());
        }
        if self.iterations_per_epoch == Some(0) {
            return bad("iterations_per_epoch must be >= 1".into());
        }
        if let Some(t) = self.clip_threshold {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("clip_threshold {t} must be positive"));
            }
        }
        let t = &self.timing;
        if !(t.t_compute >= 0.0 && t.bandwidth > 0.0 && t.latency >= 0.0) {
            return bad("timing constants must be non-negative with positive bandwidth".into());
        }
        self.selection.validate()
    }

    /// Checks the parameter-count floor once the model's size is known.
    pub fn validate_size(&self, params: usize) -> Result<(), DgcError> {
        if self.algorithm.variant().is_some()
            && self.schedule.final_sparsity() >= 0.999
            && params < MIN_PARAMS_AT_HIGH_SPARSITY
        {
            return Err(DgcError::InvalidParameter(format!(
                "{params} parameters is too few for sparsity {}; need at least {MIN_PARAMS_AT_HIGH_SPARSITY}",
                self.schedule.final_sparsity()
            )));
        }
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = TrainConfig::default();
        let mut warmup = c.schedule.warmup().to_vec();
        let mut sparsity = c.schedule.final_sparsity();
        let mut sparsity_line = None;
        for e in parse_kv(text)? {
            apply(&mut c, &e, &mut warmup, &mut sparsity)?;
            if matches!(e.key.as_str(), "sparsity" | "warmup") {
                sparsity_line.get_or_insert(e.line);
            }
        }
        c.schedule =
            SparsitySchedule::new(warmup, sparsity).map_err(|err| match sparsity_line {
                Some(line) => ConfigError::InvalidValue {
                    line,
                    key: "sparsity".into(),
                    message: err.to_string(),
                },
                None => ConfigError::Invalid(err.to_string()),
            })?;
        c.selection.target_sparsity = c.schedule.final_sparsity();
        c.validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(c)
    }

    /// Canonical text that parses back to an equal config.
    pub fn to_kv_text(&self) -> String {
        let m = &self.model;
        let list = |v: &[String]| v.join(", ");
        let nums = |v: &[usize]| list(&v.iter().map(ToString::to_string).collect::<Vec<_>>());
        let floats = |v: &[f64]| list(&v.iter().map(ToString::to_string).collect::<Vec<_>>());
        let lines = [
            ("model", m.kind.name().to_string()),
            ("dimension", m.dimension.to_string()),
            ("hidden", nums(&m.hidden)),
            ("samples", m.samples.to_string()),
            ("informative", m.informative.to_string()),
            ("separation", m.separation.to_string()),
            ("noise", m.noise.to_string()),
            ("label_noise", m.label_noise.to_string()),
            ("l2", m.l2.to_string()),
            ("quad_rank", m.quad_rank.to_string()),
            ("quad_ridge", m.quad_ridge.to_string()),
            ("layers", m.layers.to_string()),
            ("nodes", self.nodes.to_string()),
            ("batch", self.batch.to_string()),
            ("momentum", self.momentum.to_string()),
            ("lr", self.lr.base.to_string()),
            ("lr_decay", self.lr.decay.to_string()),
            ("lr_decay_epochs", nums(&self.lr.decay_epochs)),
            ("epochs", self.epochs.to_string()),
            (
                "iterations_per_epoch",
                self.iterations_per_epoch
                    .map_or_else(|| "auto".to_string(), |n| n.to_string()),
            ),
            ("algorithm", self.algorithm.name().to_string()),
            ("momentum_masking", self.momentum_masking.to_string()),
            ("sparsity", self.schedule.final_sparsity().to_string()),
            ("warmup", floats(self.schedule.warmup())),
            ("per_layer", self.selection.per_layer.to_string()),
            (
                "selection",
                match self.selection.method {
                    SelectionMethod::Exact => "exact",
                    SelectionMethod::Sampled => "sampled",
                }
                .to_string(),
            ),
            (
                "sample_fraction",
                self.selection.sample_fraction.to_string(),
            ),
            (
                "overflow_factor",
                self.selection.overflow_factor.to_string(),
            ),
            (
                "clip_threshold",
                self.clip_threshold
                    .map_or_else(|| "none".to_string(), |t| t.to_string()),
            ),
            ("seed", self.seed.to_string()),
            ("t_compute", self.timing.t_compute.to_string()),
            ("bandwidth", self.timing.bandwidth.to_string()),
            ("latency", self.timing.latency.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn apply(
    c: &mut TrainConfig,
    e: &KvEntry,
    warmup: &mut Vec<f64>,
    sparsity: &mut f64,
) -> Result<(), ConfigError> {
    let m = &mut c.model;
    match e.key.as_str() {
        "model" => m.kind = e.parse()?,
        "dimension" => m.dimension = e.parse()?,
        "hidden" => m.hidden = e.parse_list()?,
        "samples" => m.samples = e.parse()?,
        "informative" => m.informative = e.parse()?,
        "separation" => m.separation = e.parse()?,
        "noise" => m.noise = e.parse()?,
        "label_noise" => m.label_noise = e.parse()?,
        "l2" => m.l2 = e.parse()?,
        "quad_rank" => m.quad_rank = e.parse()?,
        "quad_ridge" => m.quad_ridge = e.parse()?,
        "layers" => m.layers = e.parse()?,
        "nodes" => c.nodes = e.parse()?,
        "batch" => c.batch = e.parse()?,
        "momentum" => c.momentum = e.parse()?,
        "lr" => c.lr.base = e.parse()?,
        "lr_decay" => c.lr.decay = e.parse()?,
        "lr_decay_epochs" => c.lr.decay_epochs = e.parse_list()?,
        "epochs" => c.epochs = e.parse()?,
        "iterations_per_epoch" => {
            c.iterations_per_epoch = match e.value.as_str() {
                "auto" => None,
                _ => Some(e.parse()?),
            }
        }
        "algorithm" => c.algorithm = e.parse()?,
        "momentum_masking" => c.momentum_masking = e.parse_bool()?,
        "sparsity" => *sparsity = e.parse()?,
        "warmup" => *warmup = e.parse_list()?,
        "per_layer" => c.selection.per_layer = e.parse_bool()?,
        "selection" => {
            c.selection.method = match e.value.as_str() {
                "exact" => SelectionMethod::Exact,
                "sampled" => SelectionMethod::Sampled,
                other => return Err(e.invalid(format!("`{other}` is not exact or sampled"))),
            }
        }
        "sample_fraction" => c.selection.sample_fraction = e.parse()?,
        "overflow_factor" => c.selection.overflow_factor = e.parse()?,
        "clip_threshold" => {
            c.clip_threshold = match e.value.as_str() {
                "none" => None,
                _ => Some(e.parse()?),
            }
        }
        "seed" => c.seed = e.parse()?,
        "t_compute" => c.timing.t_compute = e.parse()?,
        "bandwidth" => c.timing.bandwidth = e.parse()?,
        "latency" => c.timing.latency = e.parse()?,
        _ => return Err(e.unknown()),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut c = TrainConfig {
            clip_threshold: Some(0.5),
            iterations_per_epoch: Some(7),
            algorithm: Algorithm::DenseNesterov,
            ..TrainConfig::default()
        };
        c.lr.decay_epochs = vec![3, 6];
        c.model.label_noise = 0.05;
        let text = c.to_kv_text();
        assert_eq!(TrainConfig::from_kv_text(&text).unwrap(), c);
        let d = TrainConfig::default();
        assert_eq!(TrainConfig::from_kv_text(&d.to_kv_text()).unwrap(), d);
    }

    #[test]
    fn unknown_key_names_line_and_key() {
        let err = TrainConfig::from_kv_text("nodes = 2\n\nbogus = 1\n").unwrap_err();
        assert_eq!(
            err,
            ConfigError::UnknownKey {
                line: 3,
                key: "bogus".into()
            }
        );
    }

    #[test]
    fn bad_values_are_rejected() {
        let err = TrainConfig::from_kv_text("algorithm = adam\n").unwrap_err();
        assert!(matches!(err, ConfigError::InvalidValue { line: 1, .. }));
        assert!(TrainConfig::from_kv_text("nodes = 0\n").is_err());
        assert!(TrainConfig::from_kv_text("momentum = 1.0\n").is_err());
        let err = TrainConfig::from_kv_text("x = 1\nsparsity = 1.5\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { line: 1, .. }));
        let err = TrainConfig::from_kv_text("sparsity = 1.5\n").unwrap_err();
        assert!(matches!(err, ConfigError::InvalidValue { line: 1, .. }));
    }

    #[test]
    fn lr_step_decay() {
        let lr = LrSchedule {
            base: 1.0,
            decay: 0.5,
            decay_epochs: vec![2, 4],
        };
        assert_eq!(
            [0, 1, 2, 3, 4, 9].map(|e| lr.at(e)),
            [1.0, 1.0, 0.5, 0.5, 0.25, 0.25]
        );
    }

    #[test]
    fn derived_iterations_per_epoch() {
        let c = TrainConfig::default();
        assert_eq!(c.iterations_per_epoch(), 4096 / (4 * 32));
        assert_eq!(c.total_iterations(), 320);
    }

    #[test]
    fn size_floor_applies_to_sparse_runs_only() {
        let mut c = TrainConfig::default();
        assert!(c.validate_size(999).is_err());
        assert!(c.validate_size(1000).is_ok());
        c.algorithm = Algorithm::Dense;
        assert!(c.validate_size(10).is_ok());
    }
}
