//! All-point VOC average precision with greedy score-ordered matching.

use std::cmp::Ordering;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{box_iou, Annotation, Detection};

/// A detection or ground-truth box tagged with the image it belongs to.
pub type Tagged<T> = (usize, T);

/// Matching outcome for one class.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMatch {
    pub num_gt: usize,
    pub num_detections: usize,
    pub true_positives: usize,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
}

fn ranking(a: &Tagged<Detection>, b: &Tagged<Detection>) -> Ordering {
    b.1.score
        .partial_cmp(&a.1.score)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
        .then(a.1.bbox.x1.total_cmp(&b.1.bbox.x1))
        .then(a.1.bbox.y1.total_cmp(&b.1.bbox.y1))
        .then(a.1.bbox.x2.total_cmp(&b.1.bbox.x2))
        .then(a.1.bbox.y2.total_cmp(&b.1.bbox.y2))
}

/// Flags each detection of `class` as true positive or not, in descending score order. A
/// detection matches the unclaimed ground truth it overlaps most; if its best overlap is
/// already claimed it counts as a false positive.
pub fn match_class(dets: &[Tagged<Detection>], gts: &[Tagged<Annotation>], class: usize, iou_threshold: f64) -> (Vec<bool>, usize) {
    let mut ds: Vec<&Tagged<Detection>> = dets.iter().filter(|d| d.1.label.0 == class).collect();
    ds.sort_by(|a, b| ranking(a, b));
    let gs: Vec<&Tagged<Annotation>> = gts.iter().filter(|g| g.1.label.0 == class).collect();
    let mut taken = vec![false; gs.len()];
    let flags = ds
        .iter()
        .map(|(img, d)| {
            let mut best: Option<(usize, f64)> = None;
            for (gi, (gimg, g)) in gs.iter().enumerate() {
                if gimg != img {
                    continue;
                }
                let iou = box_iou(&d.bbox, &g.bbox);
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            match best {
                Some((gi, iou)) if iou >= iou_threshold && !taken[gi] => {
                    taken[gi] = true;
                    true
                }
                _ => false,
            }
        })
        .collect();
    (flags, gs.len())
}

/// Area under the precision envelope of a ranked true-positive sequence.
pub fn ap_from_flags(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = vec![0.0];
    let mut precision = vec![1.0];
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len()).map(|i| (recall[i] - recall[i - 1]) * precision[i]).sum()
}

pub fn class_match(dets: &[Tagged<Detection>], gts: &[Tagged<Annotation>], class: usize, iou_threshold: f64) -> ClassMatch {
    let (flags, num_gt) = match_class(dets, gts, class, iou_threshold);
    ClassMatch {
        num_gt,
        num_detections: flags.len(),
        true_positives: flags.iter().filter(|&&f| f).count(),
        ap: (num_gt > 0).then(|| ap_from_flags(&flags, num_gt)),
    }
}

/// AP of `class`; `None` when the class has no ground truth.
pub fn average_precision(dets: &[Tagged<Detection>], gts: &[Tagged<Annotation>], class: usize, iou_threshold: f64) -> Option<f64> {
    class_match(dets, gts, class, iou_threshold).ap
}

/// Mean over classes with a defined AP. Undefined classes are skipped with a warning.
pub fn mean_ap(per_class: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let skipped = per_class.len() - defined.len();
    if skipped > 0 {
        warn!("{skipped} class(es) without ground truth excluded from mAP");
    }
    if defined.is_empty() {
        return None;
    }
    Some(defined.iter().sum::<f64>() / defined.len() as f64)
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Brute-force reference: precision and recall at every cut-off of the ranked list, and for
    //! each recall step the best precision reachable at that recall or beyond.

    pub fn ap(flags: &[bool], num_gt: usize) -> f64 {
        let n = flags.len();
        let mut pts = Vec::with_capacity(n);
        for k in 1..=n {
            let tp = flags[..k].iter().filter(|&&f| f).count();
            pts.push((tp as f64 / num_gt as f64, tp as f64 / k as f64));
        }
        let mut total = 0.0;
        let mut prev_recall = 0.0;
        for k in 0..n {
            let r = pts[k].0;
            if r > prev_recall {
                let best = pts.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
                total += (r - prev_recall) * best;
                prev_recall = r;
            }
        }
        total
    }
}
