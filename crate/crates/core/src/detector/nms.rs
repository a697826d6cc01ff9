//! Greedy non-maximum suppression.

use std::cmp::Ordering;

use crate::data::{box_iou, BoundingBox, Detection};

/// Indices ordered by descending score; ties by ascending index.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    order
}

/// Class-agnostic NMS. Returns kept indices in descending score order. A box is removed when
/// its IoU with an already kept box exceeds `iou_threshold`.
pub fn nms(boxes: &[BoundingBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for i in score_order(scores) {
        if keep.iter().all(|&k| box_iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

/// NMS run independently per class. Output sorted by descending score.
pub fn per_class_nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut classes: Vec<usize> = dets.iter().map(|d| d.label.0).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut out = Vec::with_capacity(dets.len());
    for c in classes {
        let group: Vec<&Detection> = dets.iter().filter(|d| d.label.0 == c).collect();
        let boxes: Vec<BoundingBox> = group.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = group.iter().map(|d| d.score).collect();
        out.extend(nms(&boxes, &scores, iou_threshold).into_iter().map(|i| *group[i]));
    }
    sort_detections(&mut out);
    out
}

/// Descending score, then box coordinates and class for a total order.
pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then(a.label.cmp(&b.label))
            .then(a.bbox.x1.total_cmp(&b.bbox.x1))
            .then(a.bbox.y1.total_cmp(&b.bbox.y1))
            .then(a.bbox.x2.total_cmp(&b.bbox.x2))
            .then(a.bbox.y2.total_cmp(&b.bbox.y2))
    });
}
