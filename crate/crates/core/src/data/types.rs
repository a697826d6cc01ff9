use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel units, origin at the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox { x1, y1, x2, y2 })
        }
    }

    /// Constructs without validation; used for decoded boxes that may be degenerate.
    pub const fn raw(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    /// Mirror across the vertical axis of an image of the given width.
    pub fn flip_horizontal(&self, image_width: f64) -> Self {
        Self {
            x1: image_width - self.x2,
            y1: self.y1,
            x2: image_width - self.x1,
            y2: self.y2,
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn iou(&self, other: &Self) -> f64 {
        box_iou(self, other)
    }
}

/// Intersection over union. Zero for disjoint or degenerate boxes.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Foreground class index in `[0, K)`. Background is never a `ClassLabel`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassLabel(pub usize);

impl ClassLabel {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Domain tag: 0 for source, 1 for target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum DomainTag {
    Source,
    Target,
}

impl DomainTag {
    pub fn as_label(self) -> f64 {
        match self {
            DomainTag::Source => 0.0,
            DomainTag::Target => 1.0,
        }
    }
}

impl From<DomainTag> for u8 {
    fn from(d: DomainTag) -> u8 {
        match d {
            DomainTag::Source => 0,
            DomainTag::Target => 1,
        }
    }
}

impl TryFrom<u8> for DomainTag {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(DomainTag::Source),
            1 => Ok(DomainTag::Target),
            other => Err(format!("domain must be 0 or 1, got {other}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BoundingBox,
    pub label: ClassLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub label: ClassLabel,
    pub score: f64,
}

/// RGB image (row-major, interleaved channels, values in `[0, 1]`) with its annotations.
///
/// Pixel values are stored as 8-bit levels `k / 255` so that the on-disk raster round-trips
/// exactly. Augmented views produced in memory may hold arbitrary values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
    pub annotations: Vec<Annotation>,
    pub domain: DomainTag,
    pub depth: Option<Vec<f32>>,
}

impl AnnotatedImage {
    pub fn blank(width: usize, height: usize, domain: DomainTag) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height * 3],
            annotations: Vec::new(),
            domain,
            depth: None,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn mean_intensity(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }

    pub fn boxes_within_bounds(&self) -> bool {
        let (w, h) = (self.width as f64, self.height as f64);
        self.annotations.iter().all(|a| {
            a.bbox.is_valid() && a.bbox.x1 >= 0.0 && a.bbox.y1 >= 0.0 && a.bbox.x2 <= w && a.bbox.y2 <= h
        })
    }
}

/// Snap a value to the nearest 8-bit level.
#[inline]
pub fn quantize(v: f64) -> f32 {
    let level = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    level as f32 / 255.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<AnnotatedImage>,
    pub split: Split,
    pub domain: DomainTag,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn check_invariants(&self) -> Result<()> {
        for (i, item) in self.items.iter().enumerate() {
            if item.domain != self.domain {
                return Err(Error::InvalidSpec(format!("item {i} has domain {:?}, dataset {:?}", item.domain, self.domain)));
            }
            if !item.boxes_within_bounds() {
                return Err(Error::InvalidSpec(format!("item {i} has an annotation outside the image")));
            }
            if item.pixels.len() != item.width * item.height * 3 {
                return Err(Error::ShapeMismatch(format!("item {i} pixel buffer length")));
            }
        }
        Ok(())
    }

    /// Removes annotations, returning them as a sidecar (same order as `items`).
    pub fn split_off_labels(&mut self) -> Vec<Vec<Annotation>> {
        self.items.iter_mut().map(|it| std::mem::take(&mut it.annotations)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Counts sub-unit grid cells covered by both boxes; independent of the analytic formula.
    fn grid_iou(a: &BoundingBox, b: &BoundingBox, cells_per_unit: usize) -> f64 {
        let step = 1.0 / cells_per_unit as f64;
        let (mut inter, mut union) = (0usize, 0usize);
        let lo_x = a.x1.min(b.x1);
        let lo_y = a.y1.min(b.y1);
        let nx = ((a.x2.max(b.x2) - lo_x) / step).round() as usize;
        let ny = ((a.y2.max(b.y2) - lo_y) / step).round() as usize;
        for iy in 0..ny {
            for ix in 0..nx {
                let cx = lo_x + (ix as f64 + 0.5) * step;
                let cy = lo_y + (iy as f64 + 0.5) * step;
                let ina = a.contains_point(cx, cy);
                let inb = b.contains_point(cx, cy);
                inter += (ina && inb) as usize;
                union += (ina || inb) as usize;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = BoundingBox::raw(3.0, 4.0, 9.5, 12.0);
        assert_eq!(box_iou(&a, &a), 1.0);
        let b = BoundingBox::raw(0.0, 0.0, 10.0, 10.0);
        let c = BoundingBox::raw(20.0, 20.0, 30.0, 30.0);
        assert_eq!(box_iou(&b, &c), 0.0);
    }

    #[test]
    fn iou_partial_overlap_matches_grid_count() {
        let a = BoundingBox::raw(0.0, 0.0, 2.0, 2.0);
        let b = BoundingBox::raw(1.0, 1.0, 3.0, 3.0);
        let oracle = grid_iou(&a, &b, 50);
        assert!((oracle - 1.0 / 7.0).abs() < 1e-12);
        assert!((box_iou(&a, &b) - oracle).abs() < 1e-12);
    }

    #[test]
    fn degenerate_boxes_have_zero_iou() {
        let a = BoundingBox::raw(1.0, 1.0, 1.0, 5.0);
        assert_eq!(box_iou(&a, &a), 0.0);
    }

    #[test]
    fn new_rejects_inverted_boxes() {
        assert!(BoundingBox::new(5.0, 0.0, 5.0, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 2.0, 1.0, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 1.0, 1.0).is_ok());
    }

    #[test]
    fn domain_tag_serializes_as_integer() {
        assert_eq!(serde_json::to_string(&DomainTag::Target).unwrap(), "1");
        assert_eq!(serde_json::from_str::<DomainTag>("0").unwrap(), DomainTag::Source);
        assert!(serde_json::from_str::<DomainTag>("2").is_err());
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..60.0f64, 0.0..60.0f64, 0.5..40.0f64, 0.5..40.0f64)
            .prop_map(|(x, y, w, h)| BoundingBox::raw(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(box_iou(&a, &b), box_iou(&b, &a));
        }

        #[test]
        fn iou_self_is_one(a in arb_box()) {
            prop_assert!((box_iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn iou_in_unit_interval(a in arb_box(), b in arb_box()) {
            let v = box_iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
