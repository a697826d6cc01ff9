//! Weak (geometric, teacher-side) and strong (photometric + occlusion, student-side) views.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AnnotatedImage, Annotation, BoundingBox};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeakAugConfig {
    pub flip_probability: f64,
    pub crop_enabled: bool,
    /// Side length of the crop window as a fraction of the image side.
    pub crop_fraction: f64,
}

impl Default for WeakAugConfig {
    fn default() -> Self {
        Self { flip_probability: 0.5, crop_enabled: false, crop_fraction: 0.85 }
    }
}

impl WeakAugConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::InvalidConfig("weak.flip_probability must be in [0, 1]".into()));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::InvalidConfig("weak.crop_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrongAugConfig {
    pub jitter_probability: f64,
    /// Half-range of the brightness, contrast and saturation factors around 1.
    pub jitter_magnitude: f64,
    pub grayscale_probability: f64,
    pub blur_probability: f64,
    pub blur_sigma: (f64, f64),
    /// Maximum number of cutout patches; the count is drawn from `1..=cutout_count`.
    pub cutout_count: usize,
    pub cutout_size: (usize, usize),
    pub fill_value: f64,
}

impl Default for StrongAugConfig {
    fn default() -> Self {
        Self {
            jitter_probability: 0.8,
            jitter_magnitude: 0.4,
            grayscale_probability: 0.2,
            blur_probability: 0.5,
            blur_sigma: (0.1, 2.0),
            cutout_count: 3,
            cutout_size: (4, 12),
            fill_value: 0.5,
        }
    }
}

impl StrongAugConfig {
    /// A configuration under which `strong_augment` is the identity.
    pub fn disabled() -> Self {
        Self {
            jitter_probability: 0.0,
            jitter_magnitude: 0.0,
            grayscale_probability: 0.0,
            blur_probability: 0.0,
            blur_sigma: (0.0, 0.0),
            cutout_count: 0,
            cutout_size: (0, 0),
            fill_value: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64, name: &str| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("strong.{name} must be in [0, 1]")))
            }
        };
        prob(self.jitter_probability, "jitter_probability")?;
        prob(self.grayscale_probability, "grayscale_probability")?;
        prob(self.blur_probability, "blur_probability")?;
        prob(self.fill_value, "fill_value")?;
        if !(0.0..1.0).contains(&self.jitter_magnitude) {
            return Err(Error::InvalidConfig("strong.jitter_magnitude must be in [0, 1)".into()));
        }
        if self.blur_sigma.0 > self.blur_sigma.1 || self.blur_sigma.0 < 0.0 {
            return Err(Error::InvalidConfig("strong.blur_sigma range is invalid".into()));
        }
        if self.cutout_size.0 > self.cutout_size.1 {
            return Err(Error::InvalidConfig("strong.cutout_size range is empty".into()));
        }
        Ok(())
    }
}

/// Crop window in source-image pixels; the window is resized back to the full image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropWindow {
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
}

/// Geometry applied by a weak view: crop (then resize), then horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WeakTransform {
    pub flipped: bool,
    pub crop: Option<CropWindow>,
    pub width: f64,
    pub height: f64,
}

impl WeakTransform {
    pub fn identity(width: usize, height: usize) -> Self {
        Self { flipped: false, crop: None, width: width as f64, height: height as f64 }
    }

    pub fn is_identity(&self) -> bool {
        !self.flipped && self.crop.is_none()
    }

    /// Maps a box from the original image into the weak view. `None` when cropped away.
    pub fn forward_box(&self, b: &BoundingBox) -> Option<BoundingBox> {
        let mut out = *b;
        if let Some(c) = self.crop {
            let (sx, sy) = (self.width / c.w, self.height / c.h);
            out = BoundingBox::raw((b.x1 - c.x0) * sx, (b.y1 - c.y0) * sy, (b.x2 - c.x0) * sx, (b.y2 - c.y0) * sy)
                .clip(self.width, self.height);
            if out.width() < 2.0 || out.height() < 2.0 {
                return None;
            }
        }
        if self.flipped {
            out = out.flip_horizontal(self.width);
        }
        Some(out)
    }

    /// Maps a box predicted on the weak view back to original-image coordinates.
    pub fn inverse_box(&self, b: &BoundingBox) -> BoundingBox {
        let mut out = if self.flipped { b.flip_horizontal(self.width) } else { *b };
        if let Some(c) = self.crop {
            let (sx, sy) = (c.w / self.width, c.h / self.height);
            out = BoundingBox::raw(out.x1 * sx + c.x0, out.y1 * sy + c.y0, out.x2 * sx + c.x0, out.y2 * sy + c.y0);
        }
        out
    }
}

fn flip_buffer<T: Copy>(buf: &mut [T], width: usize, height: usize, channels: usize) {
    for y in 0..height {
        let row = &mut buf[y * width * channels..(y + 1) * width * channels];
        for x in 0..width / 2 {
            for c in 0..channels {
                row.swap(x * channels + c, (width - 1 - x) * channels + c);
            }
        }
    }
}

fn bilinear_resample(src: &[f32], width: usize, height: usize, win: CropWindow) -> Vec<f32> {
    let mut out = vec![0.0f32; width * height * 3];
    for y in 0..height {
        let sy = (win.y0 + (y as f64 + 0.5) * win.h / height as f64 - 0.5).clamp(0.0, (height - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(height - 1);
        let fy = sy - y0 as f64;
        for x in 0..width {
            let sx = (win.x0 + (x as f64 + 0.5) * win.w / width as f64 - 0.5).clamp(0.0, (width - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(width - 1);
            let fx = sx - x0 as f64;
            for c in 0..3 {
                let p = |xx: usize, yy: usize| src[(yy * width + xx) * 3 + c] as f64;
                let v = (1.0 - fy) * ((1.0 - fx) * p(x0, y0) + fx * p(x1, y0)) + fy * ((1.0 - fx) * p(x0, y1) + fx * p(x1, y1));
                out[(y * width + x) * 3 + c] = v as f32;
            }
        }
    }
    out
}

/// Weak view: optional crop-and-resize, then a random horizontal flip. Boxes follow the pixels.
pub fn weak_augment(img: &AnnotatedImage, cfg: &WeakAugConfig, seed: u64) -> (AnnotatedImage, WeakTransform) {
    let mut rng = rng_for(seed, stream::WEAK, 0);
    let mut t = WeakTransform::identity(img.width, img.height);
    if cfg.crop_enabled && cfg.crop_fraction < 1.0 {
        let (w, h) = (img.width as f64 * cfg.crop_fraction, img.height as f64 * cfg.crop_fraction);
        t.crop = Some(CropWindow {
            x0: rng.random_range(0.0..=img.width as f64 - w),
            y0: rng.random_range(0.0..=img.height as f64 - h),
            w,
            h,
        });
    }
    t.flipped = cfg.flip_probability > 0.0 && rng.random::<f64>() < cfg.flip_probability;
    (apply_weak_transform(img, &t), t)
}

pub fn apply_weak_transform(img: &AnnotatedImage, t: &WeakTransform) -> AnnotatedImage {
    let mut out = img.clone();
    if let Some(win) = t.crop {
        out.pixels = bilinear_resample(&img.pixels, img.width, img.height, win);
        out.depth = None;
    }
    if t.flipped {
        flip_buffer(&mut out.pixels, img.width, img.height, 3);
        if let Some(d) = out.depth.as_mut() {
            flip_buffer(d, img.width, img.height, 1);
        }
    }
    out.annotations = img
        .annotations
        .iter()
        .filter_map(|a| t.forward_box(&a.bbox).map(|bbox| Annotation { bbox, label: a.label }))
        .collect();
    out
}

/// Which strong operations fired, with their sampled parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StrongTrace {
    pub jitter: Option<(f64, f64, f64)>,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
    /// `(x0, y0, w, h)` in pixels.
    pub cutouts: Vec<(usize, usize, usize, usize)>,
}

#[inline]
fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with reflective padding (edge pixel not repeated).
pub fn gaussian_blur(pixels: &[f32], width: usize, height: usize, sigma: f64) -> Vec<f32> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0f64; pixels.len()];
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                let mut acc = 0.0;
                for (j, w) in k.iter().enumerate() {
                    let xx = reflect(x as isize + j as isize - r, width);
                    acc += w * pixels[(y * width + xx) * 3 + c] as f64;
                }
                tmp[(y * width + x) * 3 + c] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; pixels.len()];
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                let mut acc = 0.0;
                for (j, w) in k.iter().enumerate() {
                    let yy = reflect(y as isize + j as isize - r, height);
                    acc += w * tmp[(yy * width + x) * 3 + c];
                }
                out[(y * width + x) * 3 + c] = acc as f32;
            }
        }
    }
    out
}

/// Strong view: color jitter, grayscale, Gaussian blur, cutout. Never changes geometry.
pub fn strong_augment(img: &AnnotatedImage, cfg: &StrongAugConfig, seed: u64) -> AnnotatedImage {
    strong_augment_traced(img, cfg, seed).0
}

pub fn strong_augment_traced(img: &AnnotatedImage, cfg: &StrongAugConfig, seed: u64) -> (AnnotatedImage, StrongTrace) {
    let mut rng = rng_for(seed, stream::STRONG, 0);
    let mut out = img.clone();
    let mut trace = StrongTrace::default();
    let (w, h) = (img.width, img.height);

    if cfg.jitter_magnitude > 0.0 && rng.random::<f64>() < cfg.jitter_probability {
        let m = cfg.jitter_magnitude;
        let b = rng.random_range(1.0 - m..=1.0 + m);
        let c = rng.random_range(1.0 - m..=1.0 + m);
        let s = rng.random_range(1.0 - m..=1.0 + m);
        trace.jitter = Some((b, c, s));
        for v in out.pixels.iter_mut() {
            *v = (*v as f64 * b).clamp(0.0, 1.0) as f32;
        }
        let mean = out.pixels.chunks_exact(3).map(|p| luma(p[0] as f64, p[1] as f64, p[2] as f64)).sum::<f64>()
            / (w * h) as f64;
        for v in out.pixels.iter_mut() {
            *v = ((*v as f64 - mean) * c + mean).clamp(0.0, 1.0) as f32;
        }
        for p in out.pixels.chunks_exact_mut(3) {
            let g = luma(p[0] as f64, p[1] as f64, p[2] as f64);
            for v in p.iter_mut() {
                *v = (g + (*v as f64 - g) * s).clamp(0.0, 1.0) as f32;
            }
        }
    }

    if cfg.grayscale_probability > 0.0 && rng.random::<f64>() < cfg.grayscale_probability {
        trace.grayscale = true;
        for p in out.pixels.chunks_exact_mut(3) {
            let g = luma(p[0] as f64, p[1] as f64, p[2] as f64).clamp(0.0, 1.0) as f32;
            p.fill(g);
        }
    }

    if cfg.blur_probability > 0.0 && cfg.blur_sigma.1 > 0.0 && rng.random::<f64>() < cfg.blur_probability {
        let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1).max(1e-3);
        trace.blur_sigma = Some(sigma);
        out.pixels = gaussian_blur(&out.pixels, w, h, sigma);
    }

    if cfg.cutout_count > 0 && cfg.cutout_size.1 > 0 {
        let count = rng.random_range(1..=cfg.cutout_count);
        let fill = cfg.fill_value as f32;
        for _ in 0..count {
            let cw = rng.random_range(cfg.cutout_size.0..=cfg.cutout_size.1).clamp(1, w);
            let ch = rng.random_range(cfg.cutout_size.0..=cfg.cutout_size.1).clamp(1, h);
            let x0 = rng.random_range(0..=w - cw);
            let y0 = rng.random_range(0..=h - ch);
            trace.cutouts.push((x0, y0, cw, ch));
            for y in y0..y0 + ch {
                for x in x0..x0 + cw {
                    out.set_pixel(x, y, [fill; 3]);
                }
            }
        }
    }
    (out, trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::{render_scene, SceneSpec};
    use crate::data::generate_scene;

    fn scene(i: u64) -> AnnotatedImage {
        generate_scene(&SceneSpec::default(), i).unwrap()
    }

    #[test]
    fn zero_flip_probability_is_identity() {
        let img = scene(1);
        let cfg = WeakAugConfig { flip_probability: 0.0, ..Default::default() };
        for seed in 0..20 {
            let (out, t) = weak_augment(&img, &cfg, seed);
            assert!(t.is_identity());
            assert_eq!(out, img);
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let img = scene(2);
        let t = WeakTransform { flipped: true, ..WeakTransform::identity(img.width, img.height) };
        let twice = apply_weak_transform(&apply_weak_transform(&img, &t), &t);
        assert_eq!(twice, img);
    }

    #[test]
    fn flip_reflects_boxes() {
        let t = WeakTransform { flipped: true, ..WeakTransform::identity(64, 64) };
        let b = t.forward_box(&BoundingBox::raw(10.0, 5.0, 20.0, 15.0)).unwrap();
        assert_eq!(b, BoundingBox::raw(44.0, 5.0, 54.0, 15.0));
        assert_eq!(t.inverse_box(&b), BoundingBox::raw(10.0, 5.0, 20.0, 15.0));
    }

    #[test]
    fn crop_inverse_recovers_boxes() {
        let t = WeakTransform {
            flipped: true,
            crop: Some(CropWindow { x0: 4.0, y0: 6.0, w: 50.0, h: 50.0 }),
            width: 64.0,
            height: 64.0,
        };
        let b = BoundingBox::raw(10.0, 12.0, 30.0, 40.0);
        let back = t.inverse_box(&t.forward_box(&b).unwrap());
        for (u, v) in [(back.x1, b.x1), (back.y1, b.y1), (back.x2, b.x2), (back.y2, b.y2)] {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn weak_view_keeps_shapes_inside_boxes() {
        let spec = SceneSpec::default();
        let n = spec.image_size;
        let cfg = WeakAugConfig { flip_probability: 1.0, ..Default::default() };
        for i in 0..20 {
            let (img, masks) = render_scene(&spec, i).unwrap();
            let (out, t) = weak_augment(&img, &cfg, i);
            assert!(t.flipped);
            for (ann, mask) in out.annotations.iter().zip(&masks) {
                for k in (0..n * n).filter(|&k| mask[k]) {
                    let (x, y) = (n - 1 - k % n, k / n);
                    assert!(ann.bbox.contains_point(x as f64 + 0.5, y as f64 + 0.5));
                }
            }
        }
    }

    #[test]
    fn weak_is_deterministic_in_seed() {
        let img = scene(3);
        let cfg = WeakAugConfig { crop_enabled: true, ..Default::default() };
        assert_eq!(weak_augment(&img, &cfg, 5), weak_augment(&img, &cfg, 5));
    }

    #[test]
    fn disabled_strong_is_identity() {
        let img = scene(4);
        for seed in 0..10 {
            assert_eq!(strong_augment(&img, &StrongAugConfig::disabled(), seed), img);
        }
    }

    #[test]
    fn grayscale_equalizes_channels() {
        let img = scene(5);
        let cfg = StrongAugConfig { grayscale_probability: 1.0, ..StrongAugConfig::disabled() };
        let (out, trace) = strong_augment_traced(&img, &cfg, 0);
        assert!(trace.grayscale);
        for p in out.pixels.chunks_exact(3) {
            assert!(p[0] == p[1] && p[1] == p[2]);
        }
    }

    #[test]
    fn single_cutout_touches_only_its_rectangle() {
        let img = scene(6);
        let cfg = StrongAugConfig { cutout_count: 1, cutout_size: (8, 8), fill_value: 0.5, ..StrongAugConfig::disabled() };
        let (out, trace) = strong_augment_traced(&img, &cfg, 17);
        assert_eq!(trace.cutouts.len(), 1);
        let (x0, y0, cw, ch) = trace.cutouts[0];
        assert_eq!((cw, ch), (8, 8));
        for y in 0..img.height {
            for x in 0..img.width {
                let inside = x >= x0 && x < x0 + cw && y >= y0 && y < y0 + ch;
                if inside {
                    assert_eq!(out.pixel(x, y), [0.5f32; 3]);
                } else {
                    assert_eq!(out.pixel(x, y), img.pixel(x, y));
                }
            }
        }
    }

    #[test]
    fn strong_keeps_geometry_and_range() {
        let cfg = StrongAugConfig::default();
        for i in 0..20 {
            let img = scene(i);
            let out = strong_augment(&img, &cfg, i * 31);
            assert_eq!(out.annotations, img.annotations);
            assert!(out.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(out, strong_augment(&img, &cfg, i * 31));
        }
    }

    #[test]
    fn separable_blur_matches_direct_convolution() {
        let img = scene(7);
        let (w, h) = (img.width, img.height);
        let sigma = 1.3;
        let fast = gaussian_blur(&img.pixels, w, h, sigma);
        // Direct 2-D convolution with the outer-product kernel.
        let k = gaussian_kernel(sigma);
        let r = (k.len() / 2) as isize;
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (j, ky) in k.iter().enumerate() {
                        for (i, kx) in k.iter().enumerate() {
                            let yy = reflect(y as isize + j as isize - r, h);
                            let xx = reflect(x as isize + i as isize - r, w);
                            acc += ky * kx * img.pixels[(yy * w + xx) * 3 + c] as f64;
                        }
                    }
                    assert!((fast[(y * w + x) * 3 + c] as f64 - acc).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn reflect_padding_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(2, 5), 2);
    }
}
