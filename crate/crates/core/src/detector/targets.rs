//! Training-target assignment for anchors and ROI samples.

use std::cmp::Ordering;

use super::arch::HeadConfig;
use crate::data::{box_iou, Annotation, BoundingBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Foreground, matched to the ground-truth box at this index.
    Positive(usize),
    Negative,
    Ignore,
}

/// Labels every anchor by its best IoU with `gts`. Each ground-truth box additionally claims
/// the anchors tied for its highest overlap so that no object is left without a positive.
pub fn assign_anchors(anchors: &[BoundingBox], gts: &[BoundingBox], head: &HeadConfig) -> Vec<AnchorLabel> {
    if gts.is_empty() {
        return vec![AnchorLabel::Negative; anchors.len()];
    }
    let ious: Vec<Vec<f64>> = anchors.iter().map(|a| gts.iter().map(|g| box_iou(a, g)).collect()).collect();
    let mut labels: Vec<AnchorLabel> = ious
        .iter()
        .map(|row| {
            let (best, iou) = argmax(row);
            if iou >= head.rpn_positive_iou {
                AnchorLabel::Positive(best)
            } else if iou < head.rpn_negative_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    for g in 0..gts.len() {
        let best = ious.iter().map(|row| row[g]).fold(0.0f64, f64::max);
        if best <= 0.0 {
            continue;
        }
        for (a, row) in ious.iter().enumerate() {
            if row[g] == best {
                labels[a] = AnchorLabel::Positive(g);
            }
        }
    }
    labels
}

fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in row.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// A region fed to the ROI head, with its objectness score (1 for appended ground truth).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BoundingBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiSample {
    pub bbox: BoundingBox,
    /// Matched ground-truth index for foreground samples.
    pub gt: Option<usize>,
}

/// Appends the ground-truth boxes to `proposals` and draws up to `roi_batch` samples, at most
/// `roi_positive_fraction` of them foreground. Foreground is taken by descending IoU, background
/// by descending objectness, index breaking ties in both.
pub fn sample_rois(proposals: &[Proposal], gts: &[Annotation], head: &HeadConfig) -> Vec<RoiSample> {
    let mut pool: Vec<Proposal> = proposals.to_vec();
    pool.extend(gts.iter().map(|g| Proposal { bbox: g.bbox, score: 1.0 }));
    let mut pos: Vec<(usize, usize, f64)> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, p) in pool.iter().enumerate() {
        let best = gts.iter().enumerate().map(|(g, a)| (g, box_iou(&p.bbox, &a.bbox))).fold((0, f64::NEG_INFINITY), |acc, x| {
            if x.1 > acc.1 {
                x
            } else {
                acc
            }
        });
        if !gts.is_empty() && best.1 >= head.roi_positive_iou {
            pos.push((i, best.0, best.1));
        } else {
            neg.push(i);
        }
    }
    pos.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    neg.sort_by(|&a, &b| pool[b].score.partial_cmp(&pool[a].score).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let max_pos = (head.roi_batch as f64 * head.roi_positive_fraction).floor() as usize;
    let n_pos = pos.len().min(max_pos);
    let n_neg = neg.len().min(head.roi_batch - n_pos);
    pos.iter()
        .take(n_pos)
        .map(|&(i, g, _)| RoiSample { bbox: pool[i].bbox, gt: Some(g) })
        .chain(neg.iter().take(n_neg).map(|&i| RoiSample { bbox: pool[i].bbox, gt: None }))
        .collect()
}
