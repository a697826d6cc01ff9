//! Teacher pseudo labels.

use crate::augment::WeakTransform;
use crate::data::{Annotation, AnnotatedImage, Detection};
use crate::detector::inference::detect;
use crate::detector::nms::per_class_nms;
use crate::detector::{DetectorParams, HeadConfig};
use crate::error::Result;

/// Per-image retained teacher detections, together with the geometric frame they are
/// expressed in.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub images: Vec<Vec<Detection>>,
    pub frames: Vec<WeakTransform>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn box_count(&self) -> usize {
        self.images.iter().map(Vec::len).sum()
    }

    /// Maps every box back through its weak transform into original-image coordinates.
    pub fn into_original_frame(self) -> Self {
        let images = self
            .images
            .iter()
            .zip(&self.frames)
            .map(|(dets, t)| dets.iter().map(|d| Detection { bbox: t.inverse_box(&d.bbox), ..*d }).collect())
            .collect();
        let frames = self.frames.iter().map(|t| WeakTransform::identity(t.width as usize, t.height as usize)).collect();
        Self { images, frames }
    }

    pub fn is_original_frame(&self) -> bool {
        self.frames.iter().all(WeakTransform::is_identity)
    }

    /// Dummy ground truth for image `i`.
    pub fn annotations(&self, i: usize) -> Vec<Annotation> {
        self.images[i].iter().map(|d| Annotation { bbox: d.bbox, label: d.label }).collect()
    }
}

/// Per-class NMS at `nms_iou`, then the confidence cut `score ≥ δ`.
pub fn filter_pseudo_labels(raw: &[Detection], delta: f64, nms_iou: f64) -> Vec<Detection> {
    per_class_nms(raw, nms_iou).into_iter().filter(|d| d.score >= delta).collect()
}

/// Teacher inference on weakly augmented target images. The confidence cut is applied before
/// suppression, which retains the same set because a box is only ever suppressed by a
/// higher-scoring one.
pub fn generate_pseudo_labels(
    teacher: &DetectorParams,
    head: &HeadConfig,
    weak_images: &[AnnotatedImage],
    frames: &[WeakTransform],
    delta: f64,
    nms_iou: f64,
) -> Result<PseudoLabelSet> {
    let images = weak_images.iter().map(|img| detect(teacher, head, img, delta, nms_iou)).collect::<Result<Vec<_>>>()?;
    Ok(PseudoLabelSet { images, frames: frames.to_vec() })
}
