use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossFlags, LossWeights};
use crate::network::{ArchFlags, Preset};

pub const TINY_LAMBDA: f64 = 0.1;

/// Everything that shapes one training run.
///
/// Config files are flat `key = value` lines (TOML syntax, so strings are
/// quoted); every field is optional and falls back to the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: Preset,
    /// Identities per batch.
    pub d: usize,
    /// Images per identity and modality.
    pub k: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub beta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub rho: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub enable_pose_branch: bool,
    pub enable_pose_loss: bool,
    pub enable_hfc: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        TrainConfig {
            preset: Preset::Paper,
            d: 8,
            k: 4,
            epochs: 100,
            lr0: 0.01,
            decay_factor: 0.5,
            decay_every: 20,
            weight_decay: 5e-4,
            momentum: 0.9,
            beta: w.beta,
            lambda: w.lambda,
            gamma: w.gamma,
            rho: w.rho,
            grad_clip: 0.0,
            enable_pose_branch: true,
            enable_pose_loss: true,
            enable_hfc: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults for the given preset. The tiny preset keeps the paper's
    /// sampler and the other loss weights but trains for 60 epochs with a
    /// faster schedule. Its pose weight is far below the paper's: the pose
    /// loss sums over pixels, and at this learning rate larger weights
    /// diverge.
    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => TrainConfig::default(),
            Preset::Tiny => TrainConfig {
                preset,
                epochs: 60,
                lr0: 0.02,
                decay_every: 20,
                lambda: TINY_LAMBDA,
                grad_clip: 20.0,
                ..TrainConfig::default()
            },
        }
    }

    /// Parses config text. Keys it leaves out take the defaults of the
    /// preset it names (the paper preset when none is named).
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        let preset = match table.get("preset") {
            Some(v) => v
                .as_str()
                .ok_or_else(|| Error::Parse("`preset` must be a string".into()))?
                .parse()?,
            None => Preset::Paper,
        };
        let mut merged = toml::Table::try_from(TrainConfig::for_preset(preset)).map_err(|e| Error::Parse(e.to_string()))?;
        merged.extend(table);
        let cfg: TrainConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
        TrainConfig::parse(&text).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.d < 2 || self.k < 1 {
            return bad("a batch needs d >= 2 identities and k >= 1 images per modality");
        }
        if !(self.lr0 > 0.0) {
            return bad("lr0 must be positive");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) || self.decay_every == 0 {
            return bad("decay_factor must lie in (0, 1] and decay_every must be positive");
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("momentum", self.momentum),
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("rho", self.rho),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and non-negative")));
            }
        }
        if self.enable_hfc && !self.enable_pose_branch {
            return bad("the hierarchical feature constraint needs the pose branch");
        }
        Ok(())
    }

    pub fn arch(&self) -> ArchFlags {
        ArchFlags {
            pose_branch: self.enable_pose_branch,
            teacher: self.enable_hfc,
        }
    }

    pub fn loss_flags(&self) -> LossFlags {
        LossFlags {
            pose_loss: self.enable_pose_loss,
            kd: self.enable_hfc,
        }
    }

    /// Loss weights with disabled terms zeroed.
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            beta: self.beta,
            lambda: if self.enable_pose_branch && self.enable_pose_loss { self.lambda } else { 0.0 },
            gamma: if self.enable_hfc { self.gamma } else { 0.0 },
            rho: self.rho,
        }
    }
}

/// Learning rate in effect during `epoch` (0-based).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

/// Sampled batches per epoch: enough to show every training image once in
/// expectation.
pub fn iterations_per_epoch(num_train_images: usize, cfg: &TrainConfig) -> usize {
    num_train_images.div_ceil(2 * cfg.d * cfg.k).max(1)
}
