//! Experiment configuration: one TOML file describing data, model, training and ablations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{StrongAugConfig, WeakAugConfig};
use crate::data::{build_experiment, ExperimentData, SceneSpec, ShiftKind};
use crate::detector::{ArchConfig, HeadConfig};
use crate::error::{Error, Result};
use crate::eval::{default_grid, Variant};
use crate::training::{Recipe, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Split sizes and the optional unseen test domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub n_source: usize,
    pub n_target: usize,
    pub n_test: usize,
    pub unseen_kind: Option<ShiftKind>,
    pub unseen_severity: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { n_source: 200, n_target: 200, n_test: 100, unseen_kind: None, unseen_severity: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub lambda_sweep: Vec<f64>,
    /// Explicit variant list; empty means the full default grid.
    pub variants: Vec<Variant>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { lambda_sweep: vec![0.0, 0.05, 0.1], variants: Vec::new() }
    }
}

impl AblationConfig {
    pub fn grid(&self) -> Vec<Variant> {
        if self.variants.is_empty() {
            default_grid(&self.lambda_sweep)
        } else {
            self.variants.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub scene: SceneSpec,
    pub splits: SplitConfig,
    pub train: TrainConfig,
    pub arch: ArchConfig,
    pub head: HeadConfig,
    pub weak: WeakAugConfig,
    pub strong: StrongAugConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::reference_fog()
    }
}

impl ExperimentConfig {
    /// 64×64 scenes, 3 classes, clean source and fogged target.
    pub fn reference_fog() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            scene: SceneSpec { shift_kind: ShiftKind::Fog, shift_severity: REFERENCE_FOG_SEVERITY, ..Default::default() },
            splits: SplitConfig::default(),
            train: TrainConfig::default(),
            arch: ArchConfig::default(),
            head: HeadConfig::default(),
            weak: WeakAugConfig::default(),
            strong: StrongAugConfig::default(),
            ablation: AblationConfig::default(),
        }
    }

    /// Same scenes with a large palette shift on the target.
    pub fn reference_palette() -> Self {
        let mut c = Self::reference_fog();
        c.scene.shift_kind = ShiftKind::Palette;
        c.scene.shift_severity = REFERENCE_PALETTE_SEVERITY;
        c
    }

    /// Sets both the scene seed and the training seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scene.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version)));
        }
        self.scene.validate().map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if self.scene.image_size != self.arch.image_size || self.scene.num_classes != self.arch.num_classes {
            return Err(Error::InvalidConfig("scene and arch disagree on image_size or num_classes".into()));
        }
        if self.splits.n_source == 0 || self.splits.n_target == 0 || self.splits.n_test == 0 {
            return Err(Error::InvalidConfig("split sizes must be at least 1".into()));
        }
        if self.splits.unseen_kind == Some(self.scene.shift_kind) {
            return Err(Error::InvalidConfig("unseen_kind must differ from the target shift".into()));
        }
        if self.ablation.lambda_sweep.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::InvalidConfig("lambda_sweep values must be finite and ≥ 0".into()));
        }
        self.recipe().validate()
    }

    pub fn recipe(&self) -> Recipe {
        Recipe { train: self.train.clone(), arch: self.arch.clone(), head: self.head.clone(), weak: self.weak.clone(), strong: self.strong.clone() }
    }

    pub fn build_data(&self) -> Result<ExperimentData> {
        let unseen = self.splits.unseen_kind.map(|k| (k, self.splits.unseen_severity));
        build_experiment(&self.scene, self.splits.n_source, self.splits.n_target, self.splits.n_test, unseen)
    }
}

pub const REFERENCE_FOG_SEVERITY: f64 = 2.0;
pub const REFERENCE_PALETTE_SEVERITY: f64 = 7.0;
