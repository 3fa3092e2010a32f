//! Run configuration: a flat `key=value` file plus command-line overrides.
//!
//! Keys are flat with dotted prefixes (`layer1.m=64`, `dynamics.max_iters=
//! 500`). Every key is validated against the schema before any compute;
//! an unknown key is an error, not a warning. Values use `.` as the decimal
//! separator regardless of locale.
//!
//! The full schema (defaults in parentheses):
//!
//! ```text
//! seed (0)                 u64 master seed
//! threads (hardware)       worker cap; the SIMATCH_THREADS env var wins
//! output_dir (.)           all outputs go under this directory
//!
//! data.format              idx | cifar10
//! data.train_images        IDX image file (idx format)
//! data.train_labels        IDX label file (idx format)
//! data.test_images         IDX image file
//! data.test_labels         IDX label file
//! data.train_batches       comma-separated CIFAR batch files
//! data.test_batches        comma-separated CIFAR batch files
//! data.train_limit (0)     keep only the first N training samples (0 = all)
//! data.test_limit (0)      likewise for the test set
//! data.labeled_fraction (1) fraction of training samples that keep labels
//! data.pixel_scale (1/255) multiplier applied to raw bytes
//!
//! layers (0)               number of stack layers
//! layerK.m                 output dimension (required per layer)
//! layerK.alpha (0)         label weight
//! layerK.kind (dense)      dense | conv
//! layerK.epochs (10)
//! layerK.batch (32)
//! layerK.schedule (inverse_time)  inverse_time | constant
//! layerK.eta0 (0.05)
//! layerK.decay (0.001)     inverse-time decay rate
//! layerK.seed              optional per-layer seed override
//! layerK.patch (5)         conv patch side
//! layerK.stride (1)        conv stride
//! layerK.pooling (quadrant) quadrant | global
//! layerK.patch_count (20000) training patches sampled across the dataset
//! layerK.standardize (true) per-patch standardization
//! layerK.zca (false)       ZCA-whiten patches
//! layerK.zca_epsilon (1e-6)
//!
//! dynamics.max_iters (500)
//! dynamics.tolerance (1e-6)
//! dynamics.step (inverse_lipschitz)  inverse_lipschitz | fixed
//! dynamics.step_size (0.1) step for the fixed rule
//! dynamics.warm_start (false)
//!
//! eval.checkpoint          checkpoint path for cmd_eval
//! readout.lr (0.1)         logistic-regression settings
//! readout.epochs (300)
//! readout.l2 (0.0001)
//!
//! pretrain.alphas (0)      comma-separated label weights
//! pretrain.seeds (0)       comma-separated seeds
//! pretrain.nsm_epochs (10)
//! pretrain.nsm_batch (64)
//! pretrain.patch_count (20000)
//! pretrain.finetune_epochs (3)
//! pretrain.finetune_lr (0.05)
//! pretrain.finetune_batch (32)
//! pretrain.trace_every (10)
//!
//! bench.images (100)       images pushed through the benchmark layer
//! bench.m (64)             benchmark layer filters
//! bench.patch (5)
//! bench.stride (2)
//! bench.h (32)             synthetic image geometry
//! bench.w (32)
//! bench.channels (3)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::conv::Pooling;
use crate::data::DEFAULT_PIXEL_SCALE;
use crate::dynamics::{DynamicsConfig, StepRule};
use crate::error::{Error, Result};
use crate::layer::LearningRateSchedule;
use crate::linalg;
use crate::readout;

/// Raw parsed key-value pairs, before schema validation. Kept sorted so the
/// configuration hash is stable.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    map: BTreeMap<String, String>,
}

impl RawConfig {
    /// Parse a flat config file. Blank lines and lines starting with `#`
    /// are ignored; every other line must be `key=value`. Duplicate keys in
    /// one file are errors (overrides are the mechanism for replacement).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut map = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key=value, got {line:?}",
                    path.display(),
                    idx + 1
                ))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!(
                    "{}:{}: empty key",
                    path.display(),
                    idx + 1
                )));
            }
            if map.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!(
                    "{}:{}: duplicate key {key:?}",
                    path.display(),
                    idx + 1
                )));
            }
        }
        Ok(Self { map })
    }

    /// Apply `key=value` command-line overrides (replacing file values).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let (key, value) = item.split_once('=').ok_or_else(|| {
                Error::Config(format!("override {item:?} is not key=value"))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("override {item:?} has an empty key")));
            }
            self.map.insert(key.to_string(), value.trim().to_string());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.map.insert(key.to_string(), value.to_string());
    }

    /// Hash of the canonical `key=value` serialization; stored in
    /// checkpoints so evaluation can detect configuration drift.
    pub fn hash(&self) -> u64 {
        let mut canonical = String::new();
        for (k, v) in &self.map {
            canonical.push_str(k);
            canonical.push('=');
            canonical.push_str(v);
            canonical.push('\n');
        }
        linalg::fnv1a64(canonical.as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Idx,
    Cifar10,
}

#[derive(Debug, Clone)]
pub struct DataConfig {
    pub format: Option<DataFormat>,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub train_batches: Vec<PathBuf>,
    pub test_batches: Vec<PathBuf>,
    pub train_limit: usize,
    pub test_limit: usize,
    pub labeled_fraction: f64,
    pub pixel_scale: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            format: None,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_batches: Vec::new(),
            test_batches: Vec::new(),
            train_limit: 0,
            test_limit: 0,
            labeled_fraction: 1.0,
            pixel_scale: DEFAULT_PIXEL_SCALE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKindSpec {
    Dense,
    Conv,
}

/// One stack layer as configured; geometry-dependent pieces are resolved
/// against the dataset when the command runs.
#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub m: usize,
    pub alpha: f64,
    pub kind: LayerKindSpec,
    pub epochs: usize,
    pub batch: usize,
    pub schedule: LearningRateSchedule,
    pub seed: Option<u64>,
    pub patch: usize,
    pub stride: usize,
    pub pooling: Pooling,
    pub patch_count: usize,
    pub standardize: bool,
    pub zca: bool,
    pub zca_epsilon: f64,
}

impl Default for LayerSpec {
    fn default() -> Self {
        Self {
            m: 0,
            alpha: 0.0,
            kind: LayerKindSpec::Dense,
            epochs: 10,
            batch: 32,
            schedule: LearningRateSchedule::default(),
            seed: None,
            patch: 5,
            stride: 1,
            pooling: Pooling::QuadrantAverage,
            patch_count: 20_000,
            standardize: true,
            zca: false,
            zca_epsilon: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    pub logreg_lr: f64,
    pub logreg_epochs: usize,
    pub logreg_l2: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            logreg_lr: readout::DEFAULT_LOGREG_LR,
            logreg_epochs: readout::DEFAULT_LOGREG_EPOCHS,
            logreg_l2: readout::DEFAULT_LOGREG_L2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainSettings {
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub nsm_epochs: usize,
    pub nsm_batch: usize,
    pub patch_count: usize,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_batch: usize,
    pub trace_every: usize,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self {
            alphas: vec![0.0],
            seeds: vec![0],
            nsm_epochs: 10,
            nsm_batch: 64,
            patch_count: 20_000,
            finetune_epochs: 3,
            finetune_lr: 0.05,
            finetune_batch: 32,
            trace_every: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchSettings {
    pub images: usize,
    pub m: usize,
    pub patch: usize,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self { images: 100, m: 64, patch: 5, stride: 2, h: 32, w: 32, channels: 3 }
    }
}

/// Fully validated run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker cap; `None` means use the hardware default.
    pub threads: Option<usize>,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub layers: Vec<LayerSpec>,
    pub dynamics: DynamicsConfig,
    pub eval: EvalConfig,
    pub pretrain: PretrainSettings,
    pub bench: BenchSettings,
    /// Hash of the raw configuration this was parsed from.
    pub config_hash: u64,
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: {value:?} is not a nonnegative integer")))
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: {value:?} is not a nonnegative integer")))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    let parsed: f64 = value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: {value:?} is not a number")))?;
    if !parsed.is_finite() {
        return Err(Error::Config(format!("{key}: {value:?} is not finite")));
    }
    Ok(parsed)
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: {value:?} is not a boolean"))),
    }
}

fn parse_paths(value: &str) -> Vec<PathBuf> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(PathBuf::from)
        .collect()
}

fn parse_f64_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_f64(key, s))
        .collect()
}

fn parse_u64_list(key: &str, value: &str) -> Result<Vec<u64>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_u64(key, s))
        .collect()
}

impl RunConfig {
    /// Validate every key against the schema and build the typed config.
    pub fn parse(raw: &RawConfig) -> Result<Self> {
        let mut config = RunConfig {
            seed: 0,
            threads: None,
            output_dir: PathBuf::from("."),
            data: DataConfig::default(),
            layers: Vec::new(),
            dynamics: DynamicsConfig::default(),
            eval: EvalConfig::default(),
            pretrain: PretrainSettings::default(),
            bench: BenchSettings::default(),
            config_hash: raw.hash(),
        };

        let layer_count = match raw.map.get("layers") {
            Some(v) => parse_usize("layers", v)?,
            None => 0,
        };
        config.layers = vec![LayerSpec::default(); layer_count];

        for (key, value) in &raw.map {
            config.apply(key, value, layer_count)?;
        }

        if let Ok(env_threads) = std::env::var("SIMATCH_THREADS") {
            let parsed = parse_usize("SIMATCH_THREADS", env_threads.trim())?;
            if parsed == 0 {
                return Err(Error::Config("SIMATCH_THREADS must be positive".into()));
            }
            config.threads = Some(parsed);
        }

        for (i, layer) in config.layers.iter().enumerate() {
            if layer.m == 0 {
                return Err(Error::Config(format!("layer{}.m is required", i + 1)));
            }
        }
        if !(config.data.labeled_fraction > 0.0 && config.data.labeled_fraction <= 1.0) {
            return Err(Error::Config("data.labeled_fraction must be in (0, 1]".into()));
        }
        config.dynamics.validate()?;
        Ok(config)
    }

    fn apply(&mut self, key: &str, value: &str, layer_count: usize) -> Result<()> {
        if let Some(rest) = key.strip_prefix("layer") {
            if let Some((index_text, field)) = rest.split_once('.') {
                if let Ok(index) = index_text.parse::<usize>() {
                    if index == 0 || index > layer_count {
                        return Err(Error::Config(format!(
                            "{key}: layer index out of range (layers={layer_count})"
                        )));
                    }
                    return self.apply_layer_key(index - 1, field, key, value);
                }
            }
        }

        match key {
            "seed" => self.seed = parse_u64(key, value)?,
            "threads" => {
                let parsed = parse_usize(key, value)?;
                if parsed == 0 {
                    return Err(Error::Config("threads must be positive".into()));
                }
                self.threads = Some(parsed);
            }
            "output_dir" => self.output_dir = PathBuf::from(value),
            "layers" => {} // consumed up front

            "data.format" => {
                self.data.format = Some(match value {
                    "idx" => DataFormat::Idx,
                    "cifar10" => DataFormat::Cifar10,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected idx or cifar10, got {value:?}"
                        )));
                    }
                });
            }
            "data.train_images" => self.data.train_images = Some(PathBuf::from(value)),
            "data.train_labels" => self.data.train_labels = Some(PathBuf::from(value)),
            "data.test_images" => self.data.test_images = Some(PathBuf::from(value)),
            "data.test_labels" => self.data.test_labels = Some(PathBuf::from(value)),
            "data.train_batches" => self.data.train_batches = parse_paths(value),
            "data.test_batches" => self.data.test_batches = parse_paths(value),
            "data.train_limit" => self.data.train_limit = parse_usize(key, value)?,
            "data.test_limit" => self.data.test_limit = parse_usize(key, value)?,
            "data.labeled_fraction" => self.data.labeled_fraction = parse_f64(key, value)?,
            "data.pixel_scale" => self.data.pixel_scale = parse_f64(key, value)?,

            "dynamics.max_iters" => self.dynamics.max_iters = parse_usize(key, value)?,
            "dynamics.tolerance" => self.dynamics.kkt_tolerance = parse_f64(key, value)?,
            "dynamics.step" => {
                self.dynamics.step_rule = match value {
                    "inverse_lipschitz" => StepRule::InverseLipschitz,
                    "fixed" => match self.dynamics.step_rule {
                        StepRule::Fixed(s) => StepRule::Fixed(s),
                        _ => StepRule::Fixed(0.1),
                    },
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected inverse_lipschitz or fixed, got {value:?}"
                        )));
                    }
                };
            }
            "dynamics.step_size" => {
                let size = parse_f64(key, value)?;
                self.dynamics.step_rule = StepRule::Fixed(size);
            }
            "dynamics.warm_start" => self.dynamics.warm_start = parse_bool(key, value)?,

            "eval.checkpoint" => self.eval.checkpoint = Some(PathBuf::from(value)),
            "readout.lr" => self.eval.logreg_lr = parse_f64(key, value)?,
            "readout.epochs" => self.eval.logreg_epochs = parse_usize(key, value)?,
            "readout.l2" => self.eval.logreg_l2 = parse_f64(key, value)?,

            "pretrain.alphas" => self.pretrain.alphas = parse_f64_list(key, value)?,
            "pretrain.seeds" => self.pretrain.seeds = parse_u64_list(key, value)?,
            "pretrain.nsm_epochs" => self.pretrain.nsm_epochs = parse_usize(key, value)?,
            "pretrain.nsm_batch" => self.pretrain.nsm_batch = parse_usize(key, value)?,
            "pretrain.patch_count" => self.pretrain.patch_count = parse_usize(key, value)?,
            "pretrain.finetune_epochs" => {
                self.pretrain.finetune_epochs = parse_usize(key, value)?;
            }
            "pretrain.finetune_lr" => self.pretrain.finetune_lr = parse_f64(key, value)?,
            "pretrain.finetune_batch" => {
                self.pretrain.finetune_batch = parse_usize(key, value)?;
            }
            "pretrain.trace_every" => self.pretrain.trace_every = parse_usize(key, value)?,

            "bench.images" => self.bench.images = parse_usize(key, value)?,
            "bench.m" => self.bench.m = parse_usize(key, value)?,
            "bench.patch" => self.bench.patch = parse_usize(key, value)?,
            "bench.stride" => self.bench.stride = parse_usize(key, value)?,
            "bench.h" => self.bench.h = parse_usize(key, value)?,
            "bench.w" => self.bench.w = parse_usize(key, value)?,
            "bench.channels" => self.bench.channels = parse_usize(key, value)?,

            _ => {
                return Err(Error::Config(format!("unknown key {key:?}")));
            }
        }
        Ok(())
    }

    fn apply_layer_key(
        &mut self,
        index: usize,
        field: &str,
        key: &str,
        value: &str,
    ) -> Result<()> {
        let layer = &mut self.layers[index];
        match field {
            "m" => layer.m = parse_usize(key, value)?,
            "alpha" => layer.alpha = parse_f64(key, value)?,
            "kind" => {
                layer.kind = match value {
                    "dense" => LayerKindSpec::Dense,
                    "conv" => LayerKindSpec::Conv,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected dense or conv, got {value:?}"
                        )));
                    }
                };
            }
            "epochs" => layer.epochs = parse_usize(key, value)?,
            "batch" => layer.batch = parse_usize(key, value)?,
            "schedule" => {
                layer.schedule = match (value, &layer.schedule) {
                    ("constant", LearningRateSchedule::Constant { eta0 }) => {
                        LearningRateSchedule::Constant { eta0: *eta0 }
                    }
                    ("constant", LearningRateSchedule::InverseTime { eta0, .. }) => {
                        LearningRateSchedule::Constant { eta0: *eta0 }
                    }
                    ("inverse_time", LearningRateSchedule::Constant { eta0 }) => {
                        LearningRateSchedule::InverseTime { eta0: *eta0, decay: 1e-3 }
                    }
                    ("inverse_time", s @ LearningRateSchedule::InverseTime { .. }) => s.clone(),
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected constant or inverse_time, got {value:?}"
                        )));
                    }
                };
            }
            "eta0" => {
                let eta0 = parse_f64(key, value)?;
                layer.schedule = match &layer.schedule {
                    LearningRateSchedule::Constant { .. } => {
                        LearningRateSchedule::Constant { eta0 }
                    }
                    LearningRateSchedule::InverseTime { decay, .. } => {
                        LearningRateSchedule::InverseTime { eta0, decay: *decay }
                    }
                };
            }
            "decay" => {
                let decay = parse_f64(key, value)?;
                layer.schedule = match &layer.schedule {
                    LearningRateSchedule::Constant { eta0 }
                    | LearningRateSchedule::InverseTime { eta0, .. } => {
                        LearningRateSchedule::InverseTime { eta0: *eta0, decay }
                    }
                };
            }
            "seed" => layer.seed = Some(parse_u64(key, value)?),
            "patch" => layer.patch = parse_usize(key, value)?,
            "stride" => layer.stride = parse_usize(key, value)?,
            "pooling" => {
                layer.pooling = match value {
                    "quadrant" => Pooling::QuadrantAverage,
                    "global" => Pooling::GlobalAverage,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected quadrant or global, got {value:?}"
                        )));
                    }
                };
            }
            "patch_count" => layer.patch_count = parse_usize(key, value)?,
            "standardize" => layer.standardize = parse_bool(key, value)?,
            "zca" => layer.zca = parse_bool(key, value)?,
            "zca_epsilon" => layer.zca_epsilon = parse_f64(key, value)?,
            _ => {
                return Err(Error::Config(format!("unknown key {key:?}")));
            }
        }
        Ok(())
    }
}
