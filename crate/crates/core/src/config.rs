//! `key = value` run configuration covering the model, training schedule,
//! merge schedule, augmentation and synthetic data.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::dataio::{SplitMode, SynthSpec};
use crate::error::{Error, Result};
use crate::idl::{AugmentationSpec, Reduction};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub preset: String,
    pub groups: Option<usize>,
    pub embedding_dim: Option<usize>,
    pub height: usize,
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { preset: "tiny".into(), groups: None, embedding_dim: None, height: 32, width: 16 }
    }
}

impl ModelConfig {
    pub fn backbone(&self) -> Result<BackboneConfig> {
        BackboneConfig::preset(&self.preset, self.groups, self.embedding_dim)
    }
}

/// Balancing weight of the merge distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Lambda {
    /// Derived from the initial embeddings, see [`crate::acl::auto_lambda`].
    Auto,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_init: f64,
    /// Global epoch from which the reduced rate applies.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub epochs_per_stage: usize,
    pub stages: usize,
    pub seed: u64,
    pub bank_mixing: f64,
    pub idl_reduction: Reduction,
    pub acl_reduction: Reduction,
    /// Fraction of the instance count merged per stage; 0 disables merging.
    pub merge_fraction: f64,
    pub lambda: Lambda,
    /// Cluster count below which no merges happen; `None` means `ceil(0.1 n)`.
    pub min_clusters: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr_init: 0.1,
            lr_drop_epoch: 25,
            lr_drop_factor: 10.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            temperature: 0.1,
            epochs_per_stage: 2,
            stages: 15,
            seed: 0,
            bank_mixing: 0.5,
            idl_reduction: Reduction::Mean,
            acl_reduction: Reduction::Mean,
            merge_fraction: 0.04,
            lambda: Lambda::Auto,
            min_clusters: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.lr_init", self.lr_init),
            ("train.lr_drop_factor", self.lr_drop_factor),
            ("train.temperature", self.temperature),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{k} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum must lie in [0,1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.bank_mixing) {
            return Err(Error::config("train.bank_mixing must lie in [0,1]"));
        }
        if !(0.0..1.0).contains(&self.merge_fraction) {
            return Err(Error::config("merge.fraction must lie in [0,1)"));
        }
        if let Lambda::Fixed(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::config("merge.lambda must be >= 0"));
            }
        }
        Ok(())
    }

    /// Learning rate at a global epoch.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch < self.lr_drop_epoch {
            self.lr_init
        } else {
            self.lr_init / self.lr_drop_factor
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub aug: AugmentationSpec,
    pub synth: SynthSpec,
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("model.preset", "backbone preset: resnet50-baseline, resnet50-gam or tiny"),
    ("model.groups", "filter groups in the bottleneck convolutions (auto = preset default)"),
    ("model.embedding_dim", "embedding size D (auto = preset default)"),
    ("data.height", "input image height"),
    ("data.width", "input image width"),
    ("train.batch_size", "instances per step"),
    ("train.lr_init", "initial learning rate"),
    ("train.lr_drop_epoch", "global epoch at which the learning rate drops"),
    ("train.lr_drop_factor", "divisor applied at the drop epoch"),
    ("train.momentum", "SGD momentum"),
    ("train.weight_decay", "L2 weight decay added to the gradient"),
    ("train.temperature", "softmax temperature for both losses"),
    ("train.epochs_per_stage", "epochs between merge steps"),
    ("train.stages", "number of train/merge stages"),
    ("train.seed", "seed for initialisation and batch order"),
    ("train.bank_mixing", "weight kept by an instance-bank row on update"),
    ("train.idl_reduction", "instance loss reduction: mean or sum"),
    ("train.acl_reduction", "cluster loss reduction: mean or sum"),
    ("merge.fraction", "pair merges per stage as a fraction of the instance count (0 disables)"),
    ("merge.lambda", "cluster-size balancing weight (auto or a number)"),
    ("merge.min_clusters", "cluster count at which merging stops (auto = ceil(0.1 n))"),
    ("aug.flip_prob", "horizontal flip probability"),
    ("aug.crop_min", "smallest crop side fraction"),
    ("aug.crop_max", "largest crop side fraction"),
    ("aug.zoom_min", "smallest zoom factor"),
    ("aug.zoom_max", "largest zoom factor"),
    ("aug.contrast_min", "smallest contrast factor"),
    ("aug.contrast_max", "largest contrast factor"),
    ("aug.gain_min", "smallest per-channel gain"),
    ("aug.gain_max", "largest per-channel gain"),
    ("aug.occlusion_prob", "probability of pasting an occluding rectangle"),
    ("aug.occlusion_min", "smallest occluder side fraction"),
    ("aug.occlusion_max", "largest occluder side fraction"),
    ("aug.seed", "augmentation seed"),
    ("synth.identities", "synthetic identities"),
    ("synth.views", "views per identity"),
    ("synth.height", "synthetic image height"),
    ("synth.width", "synthetic image width"),
    ("synth.cameras", "synthetic cameras"),
    ("synth.noise", "pixel noise standard deviation"),
    ("synth.camera_tint", "strength of per-camera colour casts"),
    ("synth.camera_shift", "largest per-camera translation in pixels"),
    ("synth.split", "identity split: disjoint or shared"),
    ("synth.seed", "synthetic data seed"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_auto<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "model.preset" => self.model.preset = v.to_string(),
            "model.groups" => self.model.groups = parse_auto(key, v)?,
            "model.embedding_dim" => self.model.embedding_dim = parse_auto(key, v)?,
            "data.height" => self.model.height = parse(key, v)?,
            "data.width" => self.model.width = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.lr_init" => self.train.lr_init = parse(key, v)?,
            "train.lr_drop_epoch" => self.train.lr_drop_epoch = parse(key, v)?,
            "train.lr_drop_factor" => self.train.lr_drop_factor = parse(key, v)?,
            "train.momentum" => self.train.momentum = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.temperature" => self.train.temperature = parse(key, v)?,
            "train.epochs_per_stage" => self.train.epochs_per_stage = parse(key, v)?,
            "train.stages" => self.train.stages = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.bank_mixing" => self.train.bank_mixing = parse(key, v)?,
            "train.idl_reduction" => self.train.idl_reduction = v.parse()?,
            "train.acl_reduction" => self.train.acl_reduction = v.parse()?,
            "merge.fraction" => self.train.merge_fraction = parse(key, v)?,
            "merge.lambda" => {
                self.train.lambda = parse_auto(key, v)?.map_or(Lambda::Auto, Lambda::Fixed);
            }
            "merge.min_clusters" => self.train.min_clusters = parse_auto(key, v)?,
            "aug.flip_prob" => self.aug.flip_prob = parse(key, v)?,
            "aug.crop_min" => self.aug.crop.0 = parse(key, v)?,
            "aug.crop_max" => self.aug.crop.1 = parse(key, v)?,
            "aug.zoom_min" => self.aug.zoom.0 = parse(key, v)?,
            "aug.zoom_max" => self.aug.zoom.1 = parse(key, v)?,
            "aug.contrast_min" => self.aug.contrast.0 = parse(key, v)?,
            "aug.contrast_max" => self.aug.contrast.1 = parse(key, v)?,
            "aug.gain_min" => self.aug.channel_gain.0 = parse(key, v)?,
            "aug.gain_max" => self.aug.channel_gain.1 = parse(key, v)?,
            "aug.occlusion_prob" => self.aug.occlusion_prob = parse(key, v)?,
            "aug.occlusion_min" => self.aug.occlusion_size.0 = parse(key, v)?,
            "aug.occlusion_max" => self.aug.occlusion_size.1 = parse(key, v)?,
            "aug.seed" => self.aug.seed = parse(key, v)?,
            "synth.identities" => self.synth.num_identities = parse(key, v)?,
            "synth.views" => self.synth.views_per_identity = parse(key, v)?,
            "synth.height" => self.synth.height = parse(key, v)?,
            "synth.width" => self.synth.width = parse(key, v)?,
            "synth.cameras" => self.synth.num_cameras = parse(key, v)?,
            "synth.noise" => self.synth.noise = parse(key, v)?,
            "synth.camera_tint" => self.synth.camera_tint = parse(key, v)?,
            "synth.camera_shift" => self.synth.camera_shift = parse(key, v)?,
            "synth.split" => self.synth.split_mode = v.parse::<SplitMode>()?,
            "synth.seed" => self.synth.seed = parse(key, v)?,
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Current value of every key, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, t, a, s) = (&self.model, &self.train, &self.aug, &self.synth);
        let values = [
            m.preset.clone(),
            show_auto(&m.groups),
            show_auto(&m.embedding_dim),
            m.height.to_string(),
            m.width.to_string(),
            t.batch_size.to_string(),
            t.lr_init.to_string(),
            t.lr_drop_epoch.to_string(),
            t.lr_drop_factor.to_string(),
            t.momentum.to_string(),
            t.weight_decay.to_string(),
            t.temperature.to_string(),
            t.epochs_per_stage.to_string(),
            t.stages.to_string(),
            t.seed.to_string(),
            t.bank_mixing.to_string(),
            t.idl_reduction.to_string(),
            t.acl_reduction.to_string(),
            t.merge_fraction.to_string(),
            match t.lambda {
                Lambda::Auto => "auto".into(),
                Lambda::Fixed(l) => l.to_string(),
            },
            show_auto(&t.min_clusters),
            a.flip_prob.to_string(),
            a.crop.0.to_string(),
            a.crop.1.to_string(),
            a.zoom.0.to_string(),
            a.zoom.1.to_string(),
            a.contrast.0.to_string(),
            a.contrast.1.to_string(),
            a.channel_gain.0.to_string(),
            a.channel_gain.1.to_string(),
            a.occlusion_prob.to_string(),
            a.occlusion_size.0.to_string(),
            a.occlusion_size.1.to_string(),
            a.seed.to_string(),
            s.num_identities.to_string(),
            s.views_per_identity.to_string(),
            s.height.to_string(),
            s.width.to_string(),
            s.num_cameras.to_string(),
            s.noise.to_string(),
            s.camera_tint.to_string(),
            s.camera_shift.to_string(),
            s.split_mode.to_string(),
            s.seed.to_string(),
        ];
        KEYS.iter().map(|(k, _)| *k).zip(values).collect()
    }

    /// Parse `key = value` lines over the defaults. Blank lines and `#`
    /// comments are ignored; unknown or repeated keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::config(format!("config key `{k}` given twice")));
            }
            cfg.set(k, v.trim())?;
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Fully resolved configuration, one `key = value` line per key.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.backbone()?.validate()?;
        if self.model.height == 0 || self.model.width == 0 {
            return Err(Error::config("data.height and data.width must be positive"));
        }
        self.train.validate()?;
        self.aug.validate()?;
        self.synth.validate()
    }

    /// Help text listing every key with its default.
    pub fn help_text() -> String {
        let defaults = RunConfig::default().entries();
        let mut s = String::from("Config keys (`key = value`, defaults shown):\n");
        for ((k, doc), (_, d)) in KEYS.iter().zip(defaults) {
            let _ = writeln!(s, "  {k:<22} {doc} [default: {d}]");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("merge.lambda", "0.005").unwrap();
        cfg.set("model.groups", "2").unwrap();
        cfg.set("synth.split", "shared").unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(RunConfig::default().entries().len(), KEYS.len());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_text("train.lr = 0.1").unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("train.lr")));
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = RunConfig::from_text("# run\n\ntrain.batch_size = 8   # small\n").unwrap();
        assert_eq!(cfg.train.batch_size, 8);
    }

    #[test]
    fn learning_rate_drops_once() {
        let t = TrainConfig::default();
        assert_eq!(t.learning_rate(0), 0.1);
        assert_eq!(t.learning_rate(24), 0.1);
        assert!((t.learning_rate(25) - 0.01).abs() < 1e-18);
        assert!((t.learning_rate(100) - 0.01).abs() < 1e-18);
    }
}
