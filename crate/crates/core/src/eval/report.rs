//! Model evaluation over a dataset split.

use serde::{Deserialize, Serialize};

use super::ap::{class_match, mean_ap, ClassMatch, Tagged};
use crate::data::{Annotation, Detection, SplitView};
use crate::detector::inference::detect;
use crate::detector::{DetectorParams, HeadConfig};
use crate::error::Result;

/// Detections below this score are not ranked during evaluation.
pub const EVAL_SCORE_THRESHOLD: f64 = 0.01;
pub const EVAL_NMS_IOU: f64 = 0.5;
pub const EVAL_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_class: Vec<ClassMatch>,
    /// Mean over classes with ground truth; `None` when no class has any.
    pub map: Option<f64>,
    pub num_images: usize,
    pub split_fingerprint: Option<String>,
}

impl EvalResult {
    pub fn from_detections(dets: &[Tagged<Detection>], gts: &[Tagged<Annotation>], num_classes: usize, num_images: usize) -> Self {
        let per_class: Vec<ClassMatch> = (0..num_classes).map(|c| class_match(dets, gts, c, EVAL_MATCH_IOU)).collect();
        let map = mean_ap(&per_class.iter().map(|c| c.ap).collect::<Vec<_>>());
        Self { per_class, map, num_images, split_fingerprint: None }
    }

    /// mAP with an empty class set read as 0.
    pub fn map_or_zero(&self) -> f64 {
        self.map.unwrap_or(0.0)
    }
}

/// Runs `params` over every image of `view` and scores it against the split's annotations.
pub fn evaluate_detector(params: &DetectorParams, head: &HeadConfig, view: &SplitView<'_>) -> Result<EvalResult> {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for i in 0..view.len() {
        let img = view.get(i);
        dets.extend(detect(params, head, img, EVAL_SCORE_THRESHOLD, EVAL_NMS_IOU)?.into_iter().map(|d| (i, d)));
        gts.extend(img.annotations.iter().map(|a| (i, *a)));
    }
    let mut result = EvalResult::from_detections(&dets, &gts, params.arch.num_classes, view.len());
    result.split_fingerprint = Some(view.fingerprint());
    Ok(result)
}
