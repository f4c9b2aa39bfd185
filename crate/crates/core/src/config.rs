//! Experiment configuration. Every section has defaults, so `{}` is a valid config.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bev::BackboneConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::head::{AnchorConfig, DecodeConfig, LossWeights};
use crate::irb::IrbConfig;
use crate::pillarize::GridConfig;
use crate::salc::SalcConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub irb: IrbConfig,
    pub radar_backbone: BackboneConfig,
    pub lidar_backbone: BackboneConfig,
    pub salc: SalcConfig,
    /// Weight of the shape loss in the final objective.
    pub alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            irb: IrbConfig::default(),
            radar_backbone: BackboneConfig::default(),
            lidar_backbone: BackboneConfig::default(),
            salc: SalcConfig::default(),
            alpha: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Frames whose gradients are summed per step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Linear ramp from zero over this many steps.
    pub warmup_steps: usize,
    /// Cosine decay after warmup down to `learning_rate * final_lr_fraction`.
    pub final_lr_fraction: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
    pub log_every: usize,
    /// Dataset split used for training.
    pub split: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 2,
            learning_rate: 0.01,
            momentum: 0.9,
            warmup_steps: 50,
            final_lr_fraction: 0.05,
            grad_clip: 10.0,
            seed: 0,
            log_every: 50,
            split: "train".into(),
        }
    }
}

/// Module switches; each off switch removes that module from the forward pass and the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub irb_rr: bool,
    pub irb_rl: bool,
    pub salc: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self { irb_rr: true, irb_rl: true, salc: true }
    }
}

impl Toggles {
    pub const BASELINE: Toggles = Toggles { irb_rr: false, irb_rl: false, salc: false };
}

/// Which radar indicative channels the model may see.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndicativeMask {
    pub v_r: bool,
    pub v_a: bool,
    pub rcs: bool,
}

impl Default for IndicativeMask {
    fn default() -> Self {
        Self { v_r: true, v_a: true, rcs: true }
    }
}

impl IndicativeMask {
    pub fn as_array(&self) -> [bool; 3] {
        [self.v_r, self.v_a, self.rcs]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub grid: GridConfig,
    pub model: ModelConfig,
    pub anchors: AnchorConfig,
    pub loss: LossWeights,
    pub decode: DecodeConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub toggles: Toggles,
    pub indicative: IndicativeMask,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.anchors.validate()?;
        self.decode.validate()?;
        self.eval.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        let tau = self.model.salc.tau;
        if !(tau > 0.0 && tau < 1.0) {
            return bad(format!("model.salc.tau {tau} must lie in (0, 1)"));
        }
        if !(self.model.alpha >= 0.0) || !self.model.alpha.is_finite() {
            return bad(format!("model.alpha {} must be finite and >= 0", self.model.alpha));
        }
        if self.model.irb.d == 0 || self.model.salc.hidden == 0 {
            return bad("model widths must be positive".into());
        }
        for (name, b) in [("radar_backbone", &self.model.radar_backbone), ("lidar_backbone", &self.model.lidar_backbone)] {
            if b.block1 == 0 || b.block2 == 0 {
                return bad(format!("model.{name} widths must be positive"));
            }
        }
        if self.grid.rows() % 4 != 0 || self.grid.cols() % 4 != 0 {
            return bad(format!("grid {}x{} must be divisible by 4", self.grid.rows(), self.grid.cols()));
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return bad("train.batch_size must be >= 1".into());
        }
        if !(t.learning_rate > 0.0) || !(0.0..1.0).contains(&t.momentum) {
            return bad("train.learning_rate must be > 0 and momentum in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&t.final_lr_fraction) || !(t.grad_clip >= 0.0) {
            return bad("train.final_lr_fraction must lie in [0, 1] and grad_clip >= 0".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// Full config with every default filled in.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}
