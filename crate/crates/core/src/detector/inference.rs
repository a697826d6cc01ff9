//! Inference path: proposals, box-head postprocessing and end-to-end detection.

use ndarray::Array3;

use super::arch::{DetectorParams, HeadConfig};
use super::boxes::{anchors, decode};
use super::layers::sigmoid;
use super::model::{encode, image_tensor, roi_forward, rpn_forward, RoiOutput, RpnOutput};
use super::nms::{nms, per_class_nms};
use super::targets::Proposal;
use crate::data::{AnnotatedImage, BoundingBox, ClassLabel, Detection};
use crate::error::Result;

/// Decodes every anchor, clips to the image, drops boxes thinner than `min_size`, applies
/// class-agnostic NMS and keeps the `top_n` highest-scoring survivors.
pub fn proposals_from_rpn(
    rpn: &RpnOutput,
    anchor_boxes: &[BoundingBox],
    image_size: usize,
    top_n: usize,
    nms_iou: f64,
    min_size: f64,
) -> Vec<Proposal> {
    if top_n == 0 {
        return Vec::new();
    }
    let side = image_size as f64;
    let mut boxes = Vec::with_capacity(anchor_boxes.len());
    let mut scores = Vec::with_capacity(anchor_boxes.len());
    for (i, a) in anchor_boxes.iter().enumerate() {
        let b = decode(a, &rpn.deltas[i]).clip(side, side);
        if b.width() >= min_size && b.height() >= min_size && b.is_valid() {
            boxes.push(b);
            scores.push(sigmoid(rpn.objectness[i]));
        }
    }
    nms(&boxes, &scores, nms_iou)
        .into_iter()
        .take(top_n)
        .map(|i| Proposal { bbox: boxes[i], score: scores[i] })
        .collect()
}

pub fn rpn_propose(params: &DetectorParams, features: &Array3<f64>, top_n: usize, nms_iou: f64, min_size: f64) -> Vec<Proposal> {
    let (rpn, _) = rpn_forward(params, features);
    proposals_from_rpn(&rpn, &anchors(&params.arch), params.arch.image_size, top_n, nms_iou, min_size)
}

/// Per-class scores and refined boxes for each proposal, thresholded, suppressed per class
/// and capped at `max_detections`.
pub fn postprocess(
    proposals: &[Proposal],
    roi: &RoiOutput,
    image_size: usize,
    score_threshold: f64,
    nms_iou: f64,
    max_detections: usize,
) -> Vec<Detection> {
    let side = image_size as f64;
    let mut raw = Vec::new();
    for (i, p) in proposals.iter().enumerate() {
        let d = [roi.deltas[[i, 0]], roi.deltas[[i, 1]], roi.deltas[[i, 2]], roi.deltas[[i, 3]]];
        let b = decode(&p.bbox, &d).clip(side, side);
        if !b.is_valid() {
            continue;
        }
        for k in 0..roi.cls_logits.ncols() {
            let score = sigmoid(roi.cls_logits[[i, k]]);
            if score >= score_threshold {
                raw.push(Detection { bbox: b, label: ClassLabel(k), score });
            }
        }
    }
    let mut out = per_class_nms(&raw, nms_iou);
    out.truncate(max_detections);
    out
}

/// Detections above `score_threshold` after per-class NMS at `nms_iou`.
pub fn detect(params: &DetectorParams, head: &HeadConfig, image: &AnnotatedImage, score_threshold: f64, nms_iou: f64) -> Result<Vec<Detection>> {
    let feat = encode(params, &image_tensor(image))?;
    let props = rpn_propose(params, &feat, head.test_proposals, head.rpn_nms_iou, head.min_box_size);
    let boxes: Vec<BoundingBox> = props.iter().map(|p| p.bbox).collect();
    let (roi, _) = roi_forward(params, &feat, &boxes);
    Ok(postprocess(&props, &roi, params.arch.image_size, score_threshold, nms_iou, head.max_detections))
}
