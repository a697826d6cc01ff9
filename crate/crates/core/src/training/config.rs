//! Training hyperparameters.

use serde::{Deserialize, Serialize};

use crate::augment::{StrongAugConfig, WeakAugConfig};
use crate::detector::sgd::SgdConfig;
use crate::detector::{ArchConfig, HeadConfig};
use crate::error::{Error, Result};

/// EMA coefficient for long runs; the default is shorter to match the desk-scale schedule.
pub const FULL_SCALE_EMA_ALPHA: f64 = 0.9996;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_unsup: f64,
    pub lambda_dis: f64,
    /// Pseudo-label confidence threshold δ.
    pub confidence_threshold: f64,
    pub ema_alpha: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub burn_in_iterations: u64,
    pub adapt_iterations: u64,
    pub batch_source: usize,
    pub batch_target: usize,
    /// Per-class NMS threshold for pseudo labels.
    pub nms_iou: f64,
    pub grl_coefficient: f64,
    pub seed: u64,
    pub disable_dis: bool,
    pub disable_ws_aug: bool,
    pub disable_mutual: bool,
    /// Evaluate both models every this many adaptation iterations (0 disables).
    pub eval_every: u64,
    /// Write a checkpoint every this many adaptation iterations (0 disables).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_unsup: 1.0,
            lambda_dis: 0.1,
            confidence_threshold: 0.8,
            ema_alpha: 0.996,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            burn_in_iterations: 500,
            adapt_iterations: 2000,
            batch_source: 8,
            batch_target: 8,
            nms_iou: 0.5,
            grl_coefficient: 1.0,
            seed: 0,
            disable_dis: false,
            disable_ws_aug: false,
            disable_mutual: false,
            eval_every: 100,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (name, v) in [("lambda_unsup", self.lambda_unsup), ("lambda_dis", self.lambda_dis), ("grl_coefficient", self.grl_coefficient), ("lr", self.lr), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and ≥ 0, got {v}"));
            }
        }
        for (name, v) in [("confidence_threshold", self.confidence_threshold), ("ema_alpha", self.ema_alpha), ("nms_iou", self.nms_iou), ("momentum", self.momentum)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.batch_source == 0 || self.batch_target == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig { lr: self.lr, momentum: self.momentum, weight_decay: self.weight_decay }
    }

    /// Whether the discriminator takes part at all. A zero weight is treated like the
    /// ablation flag so the two runs coincide exactly.
    pub fn adversary_active(&self) -> bool {
        !self.disable_dis && self.lambda_dis > 0.0
    }
}

/// Everything a training run needs besides data.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Recipe {
    pub train: TrainConfig,
    pub arch: ArchConfig,
    pub head: HeadConfig,
    pub weak: WeakAugConfig,
    pub strong: StrongAugConfig,
}

impl Recipe {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.arch.validate()?;
        self.weak.validate()?;
        self.strong.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        Recipe::default().validate().unwrap();
        let t = TrainConfig::default();
        assert_eq!((t.lambda_unsup, t.lambda_dis, t.confidence_threshold), (1.0, 0.1, 0.8));
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(TrainConfig { ema_alpha: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lambda_dis: -0.1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_target: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn zero_weight_disables_adversary() {
        assert!(TrainConfig::default().adversary_active());
        assert!(!TrainConfig { lambda_dis: 0.0, ..Default::default() }.adversary_active());
        assert!(!TrainConfig { disable_dis: true, ..Default::default() }.adversary_active());
    }
}
