//! Flat `key=value` configuration with dotted keys.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys, repeated
//! keys and malformed values are errors naming the key. Lists are
//! comma-separated. [`TrainConfig::to_text`] writes every key in a fixed
//! order, and parsing that text reproduces the configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::decoder::DecodingStrategy;
use crate::encoder::BackboneSpec;
use crate::error::{CodError, Result};
use crate::harness::augment::AugmentFlags;
use crate::harness::synthetic::SyntheticSpec;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct LrDecay {
    /// Fractions of the total epoch count at which the rate is multiplied.
    pub milestones: Vec<f64>,
    pub factor: f64,
}

impl LrDecay {
    /// Learning-rate multiplier during `epoch` of `epochs`.
    pub fn multiplier(&self, epoch: usize, epochs: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| epoch as f64 >= (m * epochs as f64).round())
            .count();
        self.factor.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Folder with `Image/` and `GT/`; synthetic scenes are used when unset.
    pub root: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub betas: (f64, f64),
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_decay: LrDecay,
    pub lambda_max: f64,
    pub val_fraction: f64,
    pub seed: u64,
    /// Worker threads for evaluation; 1 is the strict single-thread mode.
    pub threads: usize,
    pub augment: AugmentFlags,
    pub data: DataConfig,
    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr: 1e-4,
            betas: (0.9, 0.999),
            batch_size: 8,
            epochs: 150,
            lr_decay: LrDecay {
                milestones: vec![0.6, 0.85],
                factor: 0.1,
            },
            lambda_max: 1.0,
            val_fraction: 0.1,
            seed: 0,
            threads: 1,
            augment: AugmentFlags {
                flip: true,
                rotate: true,
                color_jitter: true,
            },
            data: DataConfig {
                root: None,
                synthetic: SyntheticSpec::default(),
            },
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| CodError::config(key, format!("cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CodError::config(key, format!("expected true or false, got `{v}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(key, s)).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Every accepted key, in output order.
pub const KEYS: &[&str] = &[
    "model.input_size",
    "model.scales",
    "model.c_common",
    "model.allow_downscale",
    "model.min_input_side",
    "backbone.name",
    "backbone.stage_channels",
    "backbone.depths",
    "backbone.pretrained",
    "backbone.weights",
    "decoder.strategy",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.batch_size",
    "train.epochs",
    "train.lr_milestones",
    "train.lr_factor",
    "train.lambda_max",
    "train.val_fraction",
    "train.seed",
    "train.threads",
    "augment.flip",
    "augment.rotate",
    "augment.color_jitter",
    "data.root",
    "data.synthetic.count",
    "data.synthetic.size",
    "data.synthetic.n_objects",
    "data.synthetic.object_scale",
    "data.synthetic.contrast",
    "data.synthetic.tiny_scenes",
    "output.dir",
];

impl TrainConfig {
    /// Apply one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        match key {
            "model.input_size" => m.input_size = parse(key, v)?,
            "model.scales" => m.scales = parse_list(key, v)?,
            "model.c_common" => m.c_common = parse(key, v)?,
            "model.allow_downscale" => m.allow_downscale = parse_bool(key, v)?,
            "model.min_input_side" => m.min_input_side = parse(key, v)?,
            "backbone.name" => {
                let b = &m.backbone;
                let mut spec = BackboneSpec::by_name(v, &b.stage_channels, &b.depths)
                    .or_else(|_| match v {
                        "toy" | "pvt_desk" => Ok(BackboneSpec {
                            name: v.to_string(),
                            ..b.clone()
                        }),
                        _ => Err(CodError::config(key, format!("unknown backbone `{v}`"))),
                    })?;
                spec.pretrained = b.pretrained;
                spec.weights = b.weights.clone();
                m.backbone = spec;
            }
            "backbone.stage_channels" => m.backbone.stage_channels = parse_list(key, v)?,
            "backbone.depths" => m.backbone.depths = parse_list(key, v)?,
            "backbone.pretrained" => m.backbone.pretrained = parse_bool(key, v)?,
            "backbone.weights" => m.backbone.weights = (!v.is_empty()).then(|| PathBuf::from(v)),
            "decoder.strategy" => {
                m.strategy = v
                    .parse::<DecodingStrategy>()
                    .map_err(|e| CodError::config(key, e.to_string()))?
            }
            "train.lr" => self.lr = parse(key, v)?,
            "train.beta1" => self.betas.0 = parse(key, v)?,
            "train.beta2" => self.betas.1 = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.lr_milestones" => self.lr_decay.milestones = parse_list(key, v)?,
            "train.lr_factor" => self.lr_decay.factor = parse(key, v)?,
            "train.lambda_max" => self.lambda_max = parse(key, v)?,
            "train.val_fraction" => self.val_fraction = parse(key, v)?,
            "train.seed" => self.seed = parse(key, v)?,
            "train.threads" => self.threads = parse(key, v)?,
            "augment.flip" => self.augment.flip = parse_bool(key, v)?,
            "augment.rotate" => self.augment.rotate = parse_bool(key, v)?,
            "augment.color_jitter" => self.augment.color_jitter = parse_bool(key, v)?,
            "data.root" => self.data.root = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.synthetic.count" => self.data.synthetic.count = parse(key, v)?,
            "data.synthetic.size" => self.data.synthetic.size = parse(key, v)?,
            "data.synthetic.n_objects" => self.data.synthetic.n_objects = parse(key, v)?,
            "data.synthetic.object_scale" => self.data.synthetic.object_scale = parse(key, v)?,
            "data.synthetic.contrast" => self.data.synthetic.contrast = parse(key, v)?,
            "data.synthetic.tiny_scenes" => self.data.synthetic.tiny_scenes = parse(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(CodError::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Parse configuration text on top of the defaults.
    pub fn parse_text(text: &str) -> Result<Self> {
        Self::parse_onto(Self::default(), text)
    }

    /// Parse configuration text on top of `base`.
    pub fn parse_onto(mut base: Self, text: &str) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CodError::config(format!("line {}", no + 1), format!("expected key=value, got `{line}`"))
            })?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(CodError::config(k, "given more than once"));
            }
            base.set(k, v)?;
        }
        base.validate()?;
        Ok(base)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CodError::io(path, e))?;
        Self::parse_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| CodError::config("model", e.to_string()))?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CodError::config("train.lr", "must be positive"));
        }
        for (k, b) in [("train.beta1", self.betas.0), ("train.beta2", self.betas.1)] {
            if !(0.0..1.0).contains(&b) {
                return Err(CodError::config(k, "must lie in [0, 1)"));
            }
        }
        if self.batch_size == 0 {
            return Err(CodError::config("train.batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(CodError::config("train.val_fraction", "must lie in [0, 1)"));
        }
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return Err(CodError::config("train.lambda_max", "must be >= 0"));
        }
        if self.lr_decay.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(CodError::config("train.lr_milestones", "fractions must lie in [0, 1]"));
        }
        if self.model.backbone.pretrained && self.model.backbone.weights.is_none() {
            return Err(CodError::config("backbone.weights", "required when backbone.pretrained=true"));
        }
        self.data
            .synthetic
            .validate()
            .map_err(|e| CodError::config("data.synthetic", e.to_string()))?;
        Ok(())
    }

    /// Canonical text listing every key.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let s = &self.data.synthetic;
        let values: Vec<String> = vec![
            m.input_size.to_string(),
            join(&m.scales),
            m.c_common.to_string(),
            m.allow_downscale.to_string(),
            m.min_input_side.to_string(),
            m.backbone.name.clone(),
            join(&m.backbone.stage_channels),
            join(&m.backbone.depths),
            m.backbone.pretrained.to_string(),
            path(&m.backbone.weights),
            m.strategy.to_string(),
            self.lr.to_string(),
            self.betas.0.to_string(),
            self.betas.1.to_string(),
            self.batch_size.to_string(),
            self.epochs.to_string(),
            join(&self.lr_decay.milestones),
            self.lr_decay.factor.to_string(),
            self.lambda_max.to_string(),
            self.val_fraction.to_string(),
            self.seed.to_string(),
            self.threads.to_string(),
            self.augment.flip.to_string(),
            self.augment.rotate.to_string(),
            self.augment.color_jitter.to_string(),
            path(&self.data.root),
            s.count.to_string(),
            s.size.to_string(),
            s.n_objects.to_string(),
            s.object_scale.to_string(),
            s.contrast.to_string(),
            s.tiny_scenes.to_string(),
            self.output_dir.display().to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}
