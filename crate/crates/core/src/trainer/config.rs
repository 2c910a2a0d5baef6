use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{EncoderArch, EncoderConfig, RelationPlan, RestrainerConfig};
use crate::dataset::{AugmentConfig, BatchSpec};
use crate::decouple::DecoupleConfig;
use crate::losses::{LossConfig, LossTerm, PerTerm, Reduction, TripletMining};
use crate::model::ModelConfig;
use crate::{Error, Result};

/// Learning-rate policy over epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
    /// Multiply by `gamma` at the start of each listed epoch (1-based).
    Step { milestones: Vec<usize>, gamma: f64 },
}

impl LrSchedule {
    /// Rate for 1-based `epoch`.
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        match self {
            Self::Constant => base,
            Self::Step { milestones, gamma } => {
                let passed = milestones.iter().filter(|&&m| epoch > m).count();
                base * gamma.powi(passed as i32)
            }
        }
    }
}

/// Everything a training run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub batch: BatchSpec,
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
    pub plan: RelationPlan,
    pub restrainer: RestrainerConfig,
    /// Learning-rate multiplier of the restrainer scalars.
    pub restrainer_lr_scale: f64,
    pub decouple: DecoupleConfig,
    pub loss: LossConfig,
    /// Running-statistics momentum of every BN layer.
    pub bn_momentum: f64,
    /// Write an extra checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Evaluate single-shot IR2RGB every this many epochs; 0 disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_schedule: LrSchedule::Step { milestones: vec![40, 70], gamma: 0.1 },
            seed: 0,
            batch: BatchSpec::default(),
            augment: AugmentConfig::default(),
            encoder: EncoderConfig::default(),
            plan: RelationPlan::default(),
            restrainer: RestrainerConfig::default(),
            restrainer_lr_scale: 1.0,
            decouple: DecoupleConfig::default(),
            loss: LossConfig::default(),
            bn_momentum: 0.1,
            checkpoint_every: 0,
            eval_every: 0,
        }
    }
}

/// Named starting points for a config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Full-scale recipe: 100 epochs, 256x180 images, ResNet-50 layout.
    Paper,
    /// CPU-sized run on 64x48 synthetic images with the small encoder.
    Desk,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected paper or desk)"))),
        }
    }
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => Self { encoder: EncoderConfig { arch: EncoderArch::Resnet50, dim: 2048 }, ..Self::default() },
            Preset::Desk => {
                let mut cfg = Self {
                    epochs: 30,
                    lr: 0.05,
                    lr_schedule: LrSchedule::Step { milestones: vec![20, 26], gamma: 0.1 },
                    batch: BatchSpec { ids_per_batch: 8, images_per_id_per_modality: 2, image_height: 64, image_width: 48 },
                    augment: AugmentConfig { flip: true, crop_padding: 3, erase_prob: 0.0 },
                    restrainer_lr_scale: 0.001,
                    ..Self::default()
                };
                cfg.loss.reduction = Reduction::Mean;
                cfg.loss.triplet_mining = TripletMining::Hard;
                // A strong centroid pull collapses small-image features onto the margin.
                cfg.loss.weights.centroid = 0.01;
                cfg
            }
        }
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder,
            plan: self.plan.clone(),
            restrainer: self.restrainer,
            decouple: self.decouple,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be a finite value > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be a finite value >= 0, got {}", self.weight_decay)));
        }
        if !(self.restrainer_lr_scale >= 0.0 && self.restrainer_lr_scale.is_finite()) {
            return Err(Error::Config(format!("restrainer.lr_scale must be a finite value >= 0, got {}", self.restrainer_lr_scale)));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config(format!("bn_momentum must lie in (0, 1], got {}", self.bn_momentum)));
        }
        if let LrSchedule::Step { gamma, .. } = &self.lr_schedule {
            if !(*gamma > 0.0 && gamma.is_finite()) {
                return Err(Error::Config(format!("lr.gamma must be a finite value > 0, got {gamma}")));
            }
        }
        if !(0.0..=1.0).contains(&self.augment.erase_prob) {
            return Err(Error::Config(format!("augment.erase_prob must lie in [0, 1], got {}", self.augment.erase_prob)));
        }
        self.batch.validate()?;
        self.decouple.validate()?;
        self.loss.validate()
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: &dyn Display| out.push((k.to_string(), v.to_string()));
        put("epochs", &self.epochs);
        put("lr", &self.lr);
        put("momentum", &self.momentum);
        put("weight_decay", &self.weight_decay);
        match &self.lr_schedule {
            LrSchedule::Constant => {
                put("lr.schedule", &"constant");
                put("lr.milestones", &"");
                put("lr.gamma", &0.1);
            }
            LrSchedule::Step { milestones, gamma } => {
                put("lr.schedule", &"step");
                put("lr.milestones", &join(milestones));
                put("lr.gamma", gamma);
            }
        }
        put("seed", &self.seed);
        put("bn_momentum", &self.bn_momentum);
        put("checkpoint_every", &self.checkpoint_every);
        put("eval_every", &self.eval_every);
        put("batch.ids", &self.batch.ids_per_batch);
        put("batch.per_id", &self.batch.images_per_id_per_modality);
        put("batch.height", &self.batch.image_height);
        put("batch.width", &self.batch.image_width);
        put("augment.flip", &self.augment.flip);
        put("augment.crop_padding", &self.augment.crop_padding);
        put("augment.erase_prob", &self.augment.erase_prob);
        put("encoder.arch", &self.encoder.arch);
        put("encoder.dim", &self.encoder.dim);
        put("plan.stage", &self.plan);
        put("restrainer.init_a", &self.restrainer.init_a);
        put("restrainer.init_b", &self.restrainer.init_b);
        put("restrainer.granularity", &self.restrainer.granularity);
        put("restrainer.lr_scale", &self.restrainer_lr_scale);
        put("decouple.variant", &self.decouple.variant);
        put("decouple.split_fraction", &self.decouple.split_fraction);
        put("decouple.mlp_hidden", &self.decouple.mlp_hidden.map(|h| h.to_string()).unwrap_or_default());
        put("loss.margin", &self.loss.margin);
        put("loss.centroid_mode", &self.loss.centroid_mode);
        put("loss.similarity", &self.loss.similarity);
        put("loss.reduction", &self.loss.reduction);
        put("loss.triplet_input", &self.loss.triplet_input);
        put("loss.triplet_mining", &self.loss.triplet_mining);
        for t in LossTerm::ALL {
            put(&format!("loss.enable.{t}"), &self.loss.enable.get(t));
        }
        for t in LossTerm::ALL {
            put(&format!("loss.weight.{t}"), &self.loss.weights.get(t));
        }
        out
    }

    /// Every accepted key.
    pub fn keys() -> Vec<String> {
        Self::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// Sets one key. Unknown keys and unparsable values are config errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "lr.schedule" => {
                self.lr_schedule = match value {
                    "constant" => LrSchedule::Constant,
                    "step" => match &self.lr_schedule {
                        LrSchedule::Step { .. } => self.lr_schedule.clone(),
                        LrSchedule::Constant => LrSchedule::Step { milestones: Vec::new(), gamma: 0.1 },
                    },
                    other => return Err(Error::Config(format!("lr.schedule: expected step or constant, got `{other}`"))),
                }
            }
            "lr.milestones" => {
                let parsed = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|m| parse::<usize>(key, m.trim())).collect::<Result<Vec<_>>>()?
                };
                if let LrSchedule::Step { milestones, .. } = &mut self.lr_schedule {
                    *milestones = parsed;
                }
            }
            "lr.gamma" => {
                let g: f64 = parse(key, value)?;
                if let LrSchedule::Step { gamma, .. } = &mut self.lr_schedule {
                    *gamma = g;
                }
            }
            "seed" => self.seed = parse(key, value)?,
            "bn_momentum" => self.bn_momentum = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "batch.ids" => self.batch.ids_per_batch = parse(key, value)?,
            "batch.per_id" => self.batch.images_per_id_per_modality = parse(key, value)?,
            "batch.height" => self.batch.image_height = parse(key, value)?,
            "batch.width" => self.batch.image_width = parse(key, value)?,
            "augment.flip" => self.augment.flip = parse(key, value)?,
            "augment.crop_padding" => self.augment.crop_padding = parse(key, value)?,
            "augment.erase_prob" => self.augment.erase_prob = parse(key, value)?,
            "encoder.arch" => self.encoder.arch = parse(key, value)?,
            "encoder.dim" => self.encoder.dim = parse(key, value)?,
            "plan.stage" => self.plan = parse(key, value)?,
            "restrainer.init_a" => self.restrainer.init_a = parse(key, value)?,
            "restrainer.init_b" => self.restrainer.init_b = parse(key, value)?,
            "restrainer.granularity" => self.restrainer.granularity = parse(key, value)?,
            "restrainer.lr_scale" => self.restrainer_lr_scale = parse(key, value)?,
            "decouple.variant" => self.decouple.variant = parse(key, value)?,
            "decouple.split_fraction" => self.decouple.split_fraction = parse(key, value)?,
            "decouple.mlp_hidden" => self.decouple.mlp_hidden = if value.is_empty() { None } else { Some(parse(key, value)?) },
            "loss.margin" => self.loss.margin = parse(key, value)?,
            "loss.centroid_mode" => self.loss.centroid_mode = parse(key, value)?,
            "loss.similarity" => self.loss.similarity = parse(key, value)?,
            "loss.reduction" => self.loss.reduction = parse(key, value)?,
            "loss.triplet_input" => self.loss.triplet_input = parse(key, value)?,
            "loss.triplet_mining" => self.loss.triplet_mining = parse(key, value)?,
            _ => {
                if let Some((t, field)) = term_key(key) {
                    match field {
                        "enable" => self.loss.enable.set(t, parse(key, value)?),
                        _ => self.loss.weights.set(t, parse(key, value)?),
                    }
                } else {
                    return Err(Error::Config(format!("unknown config key `{key}`")));
                }
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| Error::Parse { path: path.into(), reason: e.to_string() })
    }

    /// Whether a change from `self` to `other` keeps a checkpoint usable:
    /// everything that shapes parameters must match.
    pub fn same_architecture(&self, other: &Self) -> bool {
        self.encoder == other.encoder && self.plan == other.plan && self.restrainer.granularity == other.restrainer.granularity && self.decouple == other.decouple
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(",")
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

fn term_key(key: &str) -> Option<(LossTerm, &str)> {
    let rest = key.strip_prefix("loss.")?;
    let (field, term) = rest.split_once('.')?;
    if field != "enable" && field != "weight" {
        return None;
    }
    Some((term.parse().ok()?, field))
}

/// The enable-flag rows of the component ablation, in table order.
pub fn ablation_grid() -> Vec<(&'static str, PerTerm<bool>)> {
    let row = |wr, orient, centroid| PerTerm { wr, id: true, tri: true, orient, centroid };
    vec![
        ("baseline", row(false, false, false)),
        ("+wr", row(true, false, false)),
        ("+R", row(false, true, false)),
        ("+C'", row(false, false, true)),
        ("+R+C'", row(false, true, true)),
        ("full", row(true, true, true)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        for p in [Preset::Paper, Preset::Desk] {
            let cfg = TrainConfig::preset(p);
            assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        }
        let mut cfg = TrainConfig::default();
        cfg.lr_schedule = LrSchedule::Constant;
        cfg.decouple.mlp_hidden = Some(32);
        assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn set_and_reject() {
        let mut cfg = TrainConfig::default();
        cfg.apply_text("# comment\nlr = 0.5\nloss.enable.wr = false\nloss.weight.orient=2\nplan.stage = s3\n").unwrap();
        assert_eq!(cfg.lr, 0.5);
        assert!(!cfg.loss.enable.wr);
        assert_eq!(cfg.loss.weights.orient, 2.0);
        assert_eq!(cfg.plan.related_count(), 3);
        assert!(cfg.set("nope", "1").unwrap_err().is_validation());
        assert!(cfg.set("epochs", "x").is_err());
        assert!(cfg.apply_text("epochs").is_err());
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn step_schedule() {
        let s = LrSchedule::Step { milestones: vec![40, 70], gamma: 0.1 };
        assert_eq!(s.rate(0.01, 1), 0.01);
        assert_eq!(s.rate(0.01, 40), 0.01);
        assert!((s.rate(0.01, 41) - 0.001).abs() < 1e-15);
        assert!((s.rate(0.01, 71) - 0.0001).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.rate(0.01, 99), 0.01);
    }

    #[test]
    fn grid_has_six_rows_from_baseline_to_full() {
        let g = ablation_grid();
        assert_eq!(g.len(), 6);
        assert_eq!(g[0].1, LossConfig::baseline().enable);
        assert_eq!(g[5].1, PerTerm::splat(true));
    }
}
