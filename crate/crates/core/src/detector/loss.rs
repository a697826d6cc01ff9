//! Detection losses and their backward pass.
//!
//! Classification terms are sigmoid cross-entropy, regression terms are L1 over the four box
//! deltas. Every term is a per-image mean; batch losses average the per-image values.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::arch::{DetectorParams, HeadConfig};
use super::boxes::{anchors, encode};
use super::gradcheck::Signature;
use super::inference::proposals_from_rpn;
use super::layers::{bce_with_logit, sigmoid};
use super::model::{encode_backward, encode_forward, image_tensor, roi_backward, roi_forward, rpn_backward, rpn_forward};
use super::model::{EncoderCache, RoiCache, RoiOutput, RpnCache, RpnOutput};
use super::targets::{assign_anchors, sample_rois, AnchorLabel, Proposal, RoiSample};
use crate::data::{Annotation, AnnotatedImage, BoundingBox};
use crate::error::Result;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub roi_cls: f64,
    pub roi_reg: f64,
}

impl LossComponents {
    pub fn total(&self) -> f64 {
        self.rpn_cls + self.rpn_reg + self.roi_cls + self.roi_reg
    }

    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        self.rpn_cls += scale * other.rpn_cls;
        self.rpn_reg += scale * other.rpn_reg;
        self.roi_cls += scale * other.roi_cls;
        self.roi_reg += scale * other.roi_reg;
    }

    pub fn is_finite(&self) -> bool {
        [self.rpn_cls, self.rpn_reg, self.roi_cls, self.roi_reg].iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Classification and regression terms.
    Supervised,
    /// Classification terms only. An image without boxes keeps its RPN background term and
    /// skips the ROI term.
    ClassificationOnly,
}

/// RPN loss terms and their gradients with respect to the raw outputs.
pub struct RpnTerms {
    pub cls: f64,
    pub reg: f64,
    pub d_objectness: Vec<f64>,
    pub d_deltas: Option<Vec<[f64; 4]>>,
}

pub fn rpn_terms(out: &RpnOutput, anchor_boxes: &[BoundingBox], labels: &[AnchorLabel], gts: &[BoundingBox], mode: LossMode) -> RpnTerms {
    let n = anchor_boxes.len();
    let used = labels.iter().filter(|l| **l != AnchorLabel::Ignore).count();
    let mut cls = 0.0;
    let mut d_objectness = vec![0.0; n];
    if used > 0 {
        let inv = 1.0 / used as f64;
        for i in 0..n {
            let t = match labels[i] {
                AnchorLabel::Positive(_) => 1.0,
                AnchorLabel::Negative => 0.0,
                AnchorLabel::Ignore => continue,
            };
            let z = out.objectness[i];
            cls += bce_with_logit(z, t) * inv;
            d_objectness[i] = (sigmoid(z) - t) * inv;
        }
    }
    let mut reg = 0.0;
    let d_deltas = (mode == LossMode::Supervised).then(|| {
        let mut d = vec![[0.0; 4]; n];
        let positives = labels.iter().filter(|l| matches!(l, AnchorLabel::Positive(_))).count();
        if positives > 0 {
            let inv = 1.0 / positives as f64;
            for i in 0..n {
                if let AnchorLabel::Positive(g) = labels[i] {
                    let t = encode(&anchor_boxes[i], &gts[g]);
                    for j in 0..4 {
                        let e = out.deltas[i][j] - t[j];
                        reg += e.abs() * inv;
                        d[i][j] = sign(e) * inv;
                    }
                }
            }
        }
        d
    });
    RpnTerms { cls, reg, d_objectness, d_deltas }
}

/// ROI loss terms and gradients with respect to the head outputs.
pub struct RoiTerms {
    pub cls: f64,
    pub reg: f64,
    pub d_cls: Array2<f64>,
    pub d_deltas: Option<Array2<f64>>,
}

pub fn roi_terms(out: &RoiOutput, samples: &[RoiSample], gts: &[Annotation], mode: LossMode) -> RoiTerms {
    let (n, k) = out.cls_logits.dim();
    let mut cls = 0.0;
    let mut d_cls = Array2::<f64>::zeros((n, k));
    if n > 0 {
        let inv = 1.0 / n as f64;
        for (i, s) in samples.iter().enumerate() {
            let label = s.gt.map(|g| gts[g].label.0);
            for c in 0..k {
                let t = if label == Some(c) { 1.0 } else { 0.0 };
                let z = out.cls_logits[[i, c]];
                cls += bce_with_logit(z, t) * inv;
                d_cls[[i, c]] = (sigmoid(z) - t) * inv;
            }
        }
    }
    let mut reg = 0.0;
    let d_deltas = (mode == LossMode::Supervised).then(|| {
        let mut d = Array2::<f64>::zeros((n, 4));
        let positives = samples.iter().filter(|s| s.gt.is_some()).count();
        if positives > 0 {
            let inv = 1.0 / positives as f64;
            for (i, s) in samples.iter().enumerate() {
                if let Some(g) = s.gt {
                    let t = encode(&s.bbox, &gts[g].bbox);
                    for j in 0..4 {
                        let e = out.deltas[[i, j]] - t[j];
                        reg += e.abs() * inv;
                        d[[i, j]] = sign(e) * inv;
                    }
                }
            }
        }
        d
    });
    RoiTerms { cls, reg, d_cls, d_deltas }
}

#[inline]
fn sign(e: f64) -> f64 {
    if e > 0.0 {
        1.0
    } else if e < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One image's forward pass with everything needed for its backward pass.
pub struct TrainPass {
    pub losses: LossComponents,
    pub features: Array3<f64>,
    pub proposals: Vec<Proposal>,
    enc: EncoderCache,
    rpn: RpnCache,
    rpn_terms: RpnTerms,
    roi: Option<(RoiCache, RoiTerms)>,
}

/// Forward pass and losses for one image tensor against `gts`. Proposals come from the
/// network's own RPN unless `fixed_proposals` is given; either way they carry no gradient.
pub fn train_forward(
    params: &DetectorParams,
    head: &HeadConfig,
    x: &Array3<f64>,
    gts: &[Annotation],
    mode: LossMode,
    fixed_proposals: Option<&[Proposal]>,
) -> Result<TrainPass> {
    let (features, enc) = encode_forward(params, x)?;
    let (rpn_out, rpn) = rpn_forward(params, &features);
    let anchor_boxes = anchors(&params.arch);
    let gt_boxes: Vec<BoundingBox> = gts.iter().map(|g| g.bbox).collect();
    let labels = assign_anchors(&anchor_boxes, &gt_boxes, head);
    let rpn_terms = rpn_terms(&rpn_out, &anchor_boxes, &labels, &gt_boxes, mode);
    let proposals = match fixed_proposals {
        Some(p) => p.to_vec(),
        None => proposals_from_rpn(
            &rpn_out,
            &anchor_boxes,
            params.arch.image_size,
            head.train_proposals,
            head.rpn_nms_iou,
            head.min_box_size,
        ),
    };
    let mut losses = LossComponents { rpn_cls: rpn_terms.cls, rpn_reg: rpn_terms.reg, ..Default::default() };
    let skip_roi = mode == LossMode::ClassificationOnly && gts.is_empty();
    let samples = if skip_roi { Vec::new() } else { sample_rois(&proposals, gts, head) };
    let roi = if samples.is_empty() {
        None
    } else {
        let boxes: Vec<BoundingBox> = samples.iter().map(|s| s.bbox).collect();
        let (out, cache) = roi_forward(params, &features, &boxes);
        let terms = roi_terms(&out, &samples, gts, mode);
        losses.roi_cls = terms.cls;
        losses.roi_reg = terms.reg;
        Some((cache, terms))
    };
    Ok(TrainPass { losses, features, proposals, enc, rpn, rpn_terms, roi })
}

impl TrainPass {
    /// Signature of every ReLU and L1 branch taken in this pass.
    pub fn signature(&self) -> u64 {
        let mut s = Signature::default();
        for a in self.enc.activations() {
            s.push_signs(a.iter());
        }
        s.push_signs(self.rpn.hidden().iter());
        if let Some(d) = &self.rpn_terms.d_deltas {
            s.push_signs(d.iter().flatten());
        }
        if let Some((cache, terms)) = &self.roi {
            s.push_signs(cache.hidden().iter());
            if let Some(d) = &terms.d_deltas {
                s.push_signs(d.iter());
            }
        }
        s.finish()
    }
}

/// Accumulates `scale · ∂loss/∂θ` into `grads`. `extra_feature_grad` is added to the feature
/// gradient before it enters the encoder; it is taken as already scaled.
pub fn train_backward(
    params: &DetectorParams,
    pass: &TrainPass,
    scale: f64,
    grads: &mut DetectorParams,
    extra_feature_grad: Option<&Array3<f64>>,
) {
    let t = &pass.rpn_terms;
    let d_obj: Vec<f64> = t.d_objectness.iter().map(|v| v * scale).collect();
    let d_del: Option<Vec<[f64; 4]>> = t.d_deltas.as_ref().map(|d| d.iter().map(|r| r.map(|v| v * scale)).collect());
    let mut dfeat = rpn_backward(params, &pass.rpn, &d_obj, d_del.as_deref(), grads);
    if let Some((cache, terms)) = &pass.roi {
        let d_cls = &terms.d_cls * scale;
        let d_deltas = terms.d_deltas.as_ref().map(|d| d * scale);
        roi_backward(params, cache, &d_cls, d_deltas.as_ref(), grads, &mut dfeat);
    }
    if let Some(extra) = extra_feature_grad {
        dfeat += extra;
    }
    encode_backward(params, &pass.enc, dfeat, grads);
}

/// Batch-mean supervised loss, no gradients.
pub fn supervised_loss(params: &DetectorParams, head: &HeadConfig, batch: &[AnnotatedImage]) -> Result<LossComponents> {
    let mut total = LossComponents::default();
    let inv = 1.0 / batch.len().max(1) as f64;
    for img in batch {
        let pass = train_forward(params, head, &image_tensor(img), &img.annotations, LossMode::Supervised, None)?;
        total.add_scaled(&pass.losses, inv);
    }
    Ok(total)
}

/// Batch-mean loss and its gradient.
pub fn loss_and_grad(params: &DetectorParams, head: &HeadConfig, batch: &[AnnotatedImage], mode: LossMode) -> Result<(LossComponents, DetectorParams)> {
    let mut total = LossComponents::default();
    let mut grads = params.zeros_like();
    let inv = 1.0 / batch.len().max(1) as f64;
    for img in batch {
        let pass = train_forward(params, head, &image_tensor(img), &img.annotations, mode, None)?;
        total.add_scaled(&pass.losses, inv);
        train_backward(params, &pass, inv, &mut grads, None);
    }
    Ok((total, grads))
}
