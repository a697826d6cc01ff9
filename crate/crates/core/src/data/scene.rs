//! Procedural "shape world" scenes: textured backgrounds with circles, squares and triangles.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::color::hsv_to_rgb;
use super::types::{quantize, AnnotatedImage, Annotation, BoundingBox, ClassLabel, DomainTag};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

pub const SHAPE_NAMES: [&str; 3] = ["circle", "square", "triangle"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftKind {
    Fog,
    Palette,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackgroundSpec {
    /// Range of the mean background level.
    pub level: (f64, f64),
    /// Amplitude of the low-frequency sinusoidal texture.
    pub texture_amplitude: f64,
    /// Per-pixel uniform noise half-range.
    pub noise: f64,
}

impl Default for BackgroundSpec {
    fn default() -> Self {
        Self {
            level: (0.15, 0.45),
            texture_amplitude: 0.12,
            noise: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub image_size: usize,
    pub num_classes: usize,
    /// Inclusive range.
    pub objects_per_image: (usize, usize),
    /// Side length (or diameter) range in pixels.
    pub object_scale: (f64, f64),
    pub background: BackgroundSpec,
    pub shift_kind: ShiftKind,
    pub shift_severity: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 3,
            objects_per_image: (1, 4),
            object_scale: (10.0, 28.0),
            background: BackgroundSpec::default(),
            shift_kind: ShiftKind::Fog,
            shift_severity: 2.5,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.image_size < 32 {
            return bad("image_size must be at least 32");
        }
        if self.num_classes == 0 || self.num_classes > SHAPE_NAMES.len() {
            return bad("num_classes must be in 1..=3");
        }
        if self.objects_per_image.0 > self.objects_per_image.1 {
            return bad("objects_per_image range is empty");
        }
        let (lo, hi) = self.object_scale;
        if !(lo > 0.0 && lo <= hi) {
            return bad("object_scale range is empty");
        }
        if hi > self.image_size as f64 - 2.0 {
            return bad("object_scale exceeds image_size");
        }
        if !(self.shift_severity >= 0.0) {
            return bad("shift_severity must be nonnegative");
        }
        let (bl, bh) = self.background.level;
        if !(0.0..=1.0).contains(&bl) || !(0.0..=1.0).contains(&bh) || bl > bh {
            return bad("background level range must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Binary mask of one rendered shape, row-major `image_size²`.
pub type ShapeMask = Vec<bool>;

#[derive(Debug, Clone, Copy)]
struct Placement {
    class: usize,
    cx: f64,
    cy: f64,
    size: f64,
}

impl Placement {
    fn covers(&self, px: f64, py: f64) -> bool {
        let h = 0.5 * self.size;
        let (dx, dy) = (px - self.cx, py - self.cy);
        match self.class {
            0 => dx * dx + dy * dy <= h * h,
            1 => dx.abs() <= h && dy.abs() <= h,
            _ => {
                // Upright isosceles triangle: apex at top centre, base along the bottom edge.
                if dy < -h || dy > h {
                    return false;
                }
                let t = (dy + h) / (2.0 * h);
                dx.abs() <= t * h
            }
        }
    }

    fn extent(&self) -> BoundingBox {
        let h = 0.5 * self.size;
        BoundingBox::raw(self.cx - h, self.cy - h, self.cx + h, self.cy + h)
    }
}

/// Renders scene `index` and also returns the per-object masks (same order as annotations).
pub fn render_scene(spec: &SceneSpec, index: u64) -> Result<(AnnotatedImage, Vec<ShapeMask>)> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, stream::SCENE, index);
    let n = spec.image_size;
    let nf = n as f64;
    let mut img = AnnotatedImage::blank(n, n, DomainTag::Source);

    let level = rng.random_range(spec.background.level.0..=spec.background.level.1);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let freq = rng.random_range(0.05..0.25);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = spec.background.texture_amplitude * rng.random_range(0.5..1.0);
            (theta, freq, phase, amp)
        })
        .collect();

    let mut canvas = vec![[0.0f64; 3]; n * n];
    let mut depth = vec![0.0f32; n * n];
    for y in 0..n {
        for x in 0..n {
            let mut v = level;
            for &(theta, freq, phase, amp) in &waves {
                let u = x as f64 * theta.cos() + y as f64 * theta.sin();
                v += amp * (u * freq + phase).sin();
            }
            let noise = spec.background.noise;
            canvas[y * n + x] = std::array::from_fn(|c| {
                let eps = if noise > 0.0 { rng.random_range(-noise..noise) } else { 0.0 };
                v + tint[c] + eps
            });
            // Far at the top, near at the bottom.
            depth[y * n + x] = (1.0 - 0.6 * (y as f64 + 0.5) / nf) as f32;
        }
    }

    let count = rng.random_range(spec.objects_per_image.0..=spec.objects_per_image.1);
    let mut placed: Vec<Placement> = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(count);
    let mut depths = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(0..spec.num_classes);
        let size = rng.random_range(spec.object_scale.0..=spec.object_scale.1);
        let color = hsv_to_rgb([rng.random_range(0.0..1.0), rng.random_range(0.4..0.9), rng.random_range(0.65..1.0)]);
        let obj_depth = rng.random_range(0.2..0.9);
        let lo = 0.5 * size + 1.0;
        let hi = nf - 0.5 * size - 1.0;
        let mut found = None;
        for _attempt in 0..40 {
            let p = Placement {
                class,
                cx: rng.random_range(lo..=hi),
                cy: rng.random_range(lo..=hi),
                size,
            };
            let e = p.extent();
            let clear = placed.iter().all(|q| {
                let f = q.extent();
                e.x2 + 1.0 < f.x1 || f.x2 + 1.0 < e.x1 || e.y2 + 1.0 < f.y1 || f.y2 + 1.0 < e.y1
            });
            if clear {
                found = Some(p);
                break;
            }
        }
        if let Some(p) = found {
            placed.push(p);
            colors.push(color);
            depths.push(obj_depth);
        }
    }
    // Guarantee the lower bound of the count range when random placement fails.
    while placed.len() < spec.objects_per_image.0 {
        let class = rng.random_range(0..spec.num_classes);
        let size = spec.object_scale.0;
        let slot = placed.len();
        let cols = ((nf - 2.0) / (size + 2.0)).floor().max(1.0) as usize;
        let cx = 1.0 + (slot % cols) as f64 * (size + 2.0) + 0.5 * size;
        let cy = 1.0 + (slot / cols) as f64 * (size + 2.0) + 0.5 * size;
        placed.push(Placement { class, cx, cy, size });
        colors.push([0.9, 0.9, 0.2]);
        depths.push(0.5);
    }

    let mut masks = Vec::with_capacity(placed.len());
    for ((p, color), &d) in placed.iter().zip(&colors).zip(&depths) {
        let mut mask = vec![false; n * n];
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0usize, 0usize);
        for y in 0..n {
            for x in 0..n {
                if p.covers(x as f64 + 0.5, y as f64 + 0.5) {
                    mask[y * n + x] = true;
                    canvas[y * n + x] = *color;
                    depth[y * n + x] = d as f32;
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x);
                    y2 = y2.max(y);
                }
            }
        }
        if x1 == usize::MAX {
            continue;
        }
        img.annotations.push(Annotation {
            bbox: BoundingBox::raw(x1 as f64, y1 as f64, (x2 + 1) as f64, (y2 + 1) as f64),
            label: ClassLabel(p.class),
        });
        masks.push(mask);
    }

    for (i, px) in canvas.iter().enumerate() {
        let (x, y) = (i % n, i / n);
        img.set_pixel(x, y, [quantize(px[0]), quantize(px[1]), quantize(px[2])]);
    }
    img.depth = Some(depth);
    Ok((img, masks))
}

/// Deterministic clean (source-style) scene for `(spec.seed, index)`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<AnnotatedImage> {
    render_scene(spec, index).map(|(img, _)| img)
}
