use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{Conv2d, Linear};
use super::params::{ParamSet, TensorRef};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

/// Total downsampling of the encoder.
pub const STRIDE: usize = 8;

/// Layer widths and anchor layout. Everything here determines parameter shapes and is
/// covered by the checkpoint fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub image_size: usize,
    pub num_classes: usize,
    /// Output channels of the four encoder blocks (strides 1, 2, 2, 2).
    pub encoder_channels: [usize; 4],
    pub rpn_hidden: usize,
    /// Square anchor side lengths in pixels, one anchor per scale per feature cell.
    pub anchor_scales: Vec<f64>,
    pub roi_pool: usize,
    pub roi_hidden: usize,
    pub discriminator_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 3,
            encoder_channels: [8, 16, 32, 64],
            rpn_hidden: 32,
            anchor_scales: vec![8.0, 16.0, 32.0],
            roi_pool: 4,
            roi_hidden: 64,
            discriminator_hidden: 16,
        }
    }
}

impl ArchConfig {
    /// A tiny network for gradient checks (well under 5k parameters).
    pub fn micro() -> Self {
        Self {
            image_size: 32,
            num_classes: 3,
            encoder_channels: [2, 3, 4, 4],
            rpn_hidden: 4,
            anchor_scales: vec![8.0, 16.0],
            roi_pool: 2,
            roi_hidden: 4,
            discriminator_hidden: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % STRIDE != 0 {
            return Err(Error::InvalidConfig(format!("image_size must be a positive multiple of {STRIDE}")));
        }
        if self.num_classes == 0 || self.anchor_scales.is_empty() || self.roi_pool == 0 {
            return Err(Error::InvalidConfig("num_classes, anchor_scales and roi_pool must be nonempty".into()));
        }
        if self.encoder_channels.contains(&0) || self.rpn_hidden == 0 || self.roi_hidden == 0 || self.discriminator_hidden == 0 {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / STRIDE
    }

    pub fn feature_channels(&self) -> usize {
        self.encoder_channels[3]
    }

    pub fn num_anchors_per_cell(&self) -> usize {
        self.anchor_scales.len()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("serializable");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Assignment, sampling and proposal constants of the two detection stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub rpn_positive_iou: f64,
    pub rpn_negative_iou: f64,
    pub rpn_nms_iou: f64,
    pub train_proposals: usize,
    pub test_proposals: usize,
    pub roi_positive_iou: f64,
    pub roi_batch: usize,
    pub roi_positive_fraction: f64,
    pub min_box_size: f64,
    pub max_detections: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            rpn_positive_iou: 0.7,
            rpn_negative_iou: 0.3,
            rpn_nms_iou: 0.7,
            train_proposals: 64,
            test_proposals: 50,
            roi_positive_iou: 0.5,
            roi_batch: 32,
            roi_positive_fraction: 0.5,
            min_box_size: 1.0,
            max_detections: 100,
        }
    }
}

/// Weights of encoder, region proposal network and ROI head.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub arch: ArchConfig,
    pub encoder: [Conv2d; 4],
    pub rpn_conv: Conv2d,
    pub rpn_objectness: Conv2d,
    pub rpn_deltas: Conv2d,
    pub roi_fc: Linear,
    pub roi_cls: Linear,
    pub roi_reg: Linear,
}

impl DetectorParams {
    pub fn zeros(arch: &ArchConfig) -> Self {
        let ch = arch.encoder_channels;
        let a = arch.num_anchors_per_cell();
        let pooled = arch.feature_channels() * arch.roi_pool * arch.roi_pool;
        Self {
            arch: arch.clone(),
            encoder: [
                Conv2d::zeros(ch[0], 3, 3, 1, 1),
                Conv2d::zeros(ch[1], ch[0], 3, 2, 1),
                Conv2d::zeros(ch[2], ch[1], 3, 2, 1),
                Conv2d::zeros(ch[3], ch[2], 3, 2, 1),
            ],
            rpn_conv: Conv2d::zeros(arch.rpn_hidden, ch[3], 3, 1, 1),
            rpn_objectness: Conv2d::zeros(a, arch.rpn_hidden, 1, 1, 0),
            rpn_deltas: Conv2d::zeros(4 * a, arch.rpn_hidden, 1, 1, 0),
            roi_fc: Linear::zeros(arch.roi_hidden, pooled),
            roi_cls: Linear::zeros(arch.num_classes, arch.roi_hidden),
            roi_reg: Linear::zeros(4, arch.roi_hidden),
        }
    }

    /// He-initialised trunk, small-normal prediction layers; deterministic in `seed`.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_for(seed, stream::INIT, 0);
        Ok(Self::init_with(arch, &mut rng))
    }

    fn init_with<R: Rng>(arch: &ArchConfig, rng: &mut R) -> Self {
        let ch = arch.encoder_channels;
        let a = arch.num_anchors_per_cell();
        let pooled = arch.feature_channels() * arch.roi_pool * arch.roi_pool;
        let mut p = Self {
            arch: arch.clone(),
            encoder: [
                Conv2d::he(ch[0], 3, 3, 1, 1, rng),
                Conv2d::he(ch[1], ch[0], 3, 2, 1, rng),
                Conv2d::he(ch[2], ch[1], 3, 2, 1, rng),
                Conv2d::he(ch[3], ch[2], 3, 2, 1, rng),
            ],
            rpn_conv: Conv2d::he(arch.rpn_hidden, ch[3], 3, 1, 1, rng),
            rpn_objectness: Conv2d::normal(a, arch.rpn_hidden, 1, 1, 0, 0.01, rng),
            rpn_deltas: Conv2d::normal(4 * a, arch.rpn_hidden, 1, 1, 0, 0.01, rng),
            roi_fc: Linear::he(arch.roi_hidden, pooled, rng),
            roi_cls: Linear::normal(arch.num_classes, arch.roi_hidden, 0.01, rng),
            roi_reg: Linear::normal(4, arch.roi_hidden, 0.001, rng),
        };
        // Start the classifiers at a low foreground prior so early pseudo labels are rare.
        p.roi_cls.bias.fill(-2.0);
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.arch)
    }

    pub fn is_regression_tensor(name: &str) -> bool {
        name.starts_with("rpn/deltas") || name.starts_with("roi/reg")
    }
}

impl ParamSet for DetectorParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::with_capacity(16);
        for (i, c) in self.encoder.iter().enumerate() {
            c.push_tensors(&format!("encoder/conv{}", i + 1), &mut out);
        }
        self.rpn_conv.push_tensors("rpn/conv", &mut out);
        self.rpn_objectness.push_tensors("rpn/objectness", &mut out);
        self.rpn_deltas.push_tensors("rpn/deltas", &mut out);
        self.roi_fc.push_tensors("roi/fc", &mut out);
        self.roi_cls.push_tensors("roi/cls", &mut out);
        self.roi_reg.push_tensors("roi/reg", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(16);
        for c in self.encoder.iter_mut() {
            c.push_tensors_mut(&mut out);
        }
        self.rpn_conv.push_tensors_mut(&mut out);
        self.rpn_objectness.push_tensors_mut(&mut out);
        self.rpn_deltas.push_tensors_mut(&mut out);
        self.roi_fc.push_tensors_mut(&mut out);
        self.roi_cls.push_tensors_mut(&mut out);
        self.roi_reg.push_tensors_mut(&mut out);
        out
    }
}
