//! False-positive ratio of pseudo labels against held-out ground truth.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::ap::Tagged;
use crate::data::{box_iou, Annotation, Detection};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpRatio {
    pub ratio: f64,
    pub unmatched: usize,
    pub total: usize,
    /// Set when there were no pseudo boxes; `ratio` is then 0 by convention.
    pub empty: bool,
}

/// Fraction of `pseudo` boxes left without a same-class ground-truth partner at IoU ≥
/// `iou_threshold`, matching one-to-one in descending score order.
pub fn false_positive_ratio(pseudo: &[Tagged<Detection>], gts: &[Tagged<Annotation>], iou_threshold: f64) -> FpRatio {
    if pseudo.is_empty() {
        return FpRatio { ratio: 0.0, unmatched: 0, total: 0, empty: true };
    }
    let mut order: Vec<&Tagged<Detection>> = pseudo.iter().collect();
    order.sort_by(|a, b| {
        b.1.score
            .partial_cmp(&a.1.score)
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
            .then(a.1.label.cmp(&b.1.label))
            .then(a.1.bbox.x1.total_cmp(&b.1.bbox.x1))
            .then(a.1.bbox.y1.total_cmp(&b.1.bbox.y1))
            .then(a.1.bbox.x2.total_cmp(&b.1.bbox.x2))
            .then(a.1.bbox.y2.total_cmp(&b.1.bbox.y2))
    });
    let mut taken = vec![false; gts.len()];
    let mut unmatched = 0;
    for (img, d) in order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gimg, g)) in gts.iter().enumerate() {
            if taken[gi] || gimg != img || g.label != d.label {
                continue;
            }
            let iou = box_iou(&d.bbox, &g.bbox);
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => taken[gi] = true,
            None => unmatched += 1,
        }
    }
    FpRatio { ratio: unmatched as f64 / pseudo.len() as f64, unmatched, total: pseudo.len(), empty: false }
}
