//! Photometric domain shifts applied to clean scenes to produce target-domain images.

use rand::Rng;

use super::color::{hsv_to_rgb, rgb_to_hsv};
use super::scene::ShiftKind;
use super::types::{quantize, AnnotatedImage, DomainTag};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

/// Atmospheric light of the fog model (white).
pub const ATMOSPHERIC_LIGHT: f64 = 1.0;

/// Base hue rotation of the palette shift, in turns.
pub const PALETTE_HUE_ROTATION: f64 = 0.4;

/// Atmospheric scattering: `value·t + light·(1 − t)` with `t = exp(−β·depth)`.
#[inline]
pub fn fog_pixel(value: f64, depth: f64, beta: f64, light: f64) -> f64 {
    let t = (-beta * depth).exp();
    value * t + light * (1.0 - t)
}

/// Number of levels per channel kept by the palette posterization at `severity`.
pub fn posterize_levels(severity: f64) -> u32 {
    let bits = (8.0 - severity).round().clamp(1.0, 8.0) as u32;
    1 << bits
}

fn posterize(v: f64, levels: u32) -> f64 {
    if levels >= 256 {
        return v;
    }
    let l = levels as f64;
    ((v * l).floor().min(l - 1.0)) / (l - 1.0)
}

/// Applies a photometric shift. Annotations are untouched; the result is tagged as target.
///
/// Severity zero is the identity for both kinds. The fog kind ignores `seed`; the palette kind
/// uses it for a small per-image hue jitter around the fixed rotation.
pub fn apply_domain_shift(img: &AnnotatedImage, kind: ShiftKind, severity: f64, seed: u64) -> Result<AnnotatedImage> {
    if !(severity >= 0.0) {
        return Err(Error::InvalidSpec(format!("shift severity must be nonnegative, got {severity}")));
    }
    let mut out = img.clone();
    out.domain = DomainTag::Target;
    if severity == 0.0 {
        return Ok(out);
    }
    match kind {
        ShiftKind::Fog => {
            let depth = img.depth.as_ref().ok_or(Error::MissingDepth)?;
            for (i, px) in out.pixels.chunks_exact_mut(3).enumerate() {
                let d = depth[i] as f64;
                for v in px.iter_mut() {
                    *v = quantize(fog_pixel(*v as f64, d, severity, ATMOSPHERIC_LIGHT));
                }
            }
        }
        ShiftKind::Palette => {
            let mut rng = rng_for(seed, stream::SHIFT, 0);
            let rotation = PALETTE_HUE_ROTATION + rng.random_range(-0.03..0.03);
            let levels = posterize_levels(severity);
            for px in out.pixels.chunks_exact_mut(3) {
                let mut hsv = rgb_to_hsv([px[0] as f64, px[1] as f64, px[2] as f64]);
                hsv[0] += rotation;
                let rgb = hsv_to_rgb(hsv);
                for (v, c) in px.iter_mut().zip(rgb) {
                    *v = quantize(posterize(c, levels));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::{generate_scene, SceneSpec};

    #[test]
    fn zero_severity_is_identity() {
        let img = generate_scene(&SceneSpec::default(), 2).unwrap();
        for kind in [ShiftKind::Fog, ShiftKind::Palette] {
            let out = apply_domain_shift(&img, kind, 0.0, 9).unwrap();
            assert_eq!(out.pixels, img.pixels);
            assert_eq!(out.domain, DomainTag::Target);
        }
    }

    #[test]
    fn heavy_fog_saturates_to_atmospheric_light() {
        let mut img = generate_scene(&SceneSpec::default(), 4).unwrap();
        img.depth = Some(vec![1.0; img.width * img.height]);
        let out = apply_domain_shift(&img, ShiftKind::Fog, 1e3, 0).unwrap();
        assert!(out.pixels.iter().all(|&v| (v as f64 - ATMOSPHERIC_LIGHT).abs() < 1e-6));
    }

    #[test]
    fn fog_formula_scalar_value() {
        // Independent evaluation: 100/255·e^(−0.5) + 1·(1 − e^(−0.5)).
        let e = (-0.5f64).exp();
        let expected = (100.0 / 255.0) * e + (1.0 - e);
        assert!((expected - 0.6314).abs() < 1e-4);
        let got = fog_pixel(100.0 / 255.0, 1.0, 0.5, 1.0);
        assert!((got - expected).abs() < 1e-12);

        let mut img = AnnotatedImage::blank(32, 32, DomainTag::Source);
        img.pixels.iter_mut().for_each(|v| *v = 100.0 / 255.0);
        img.depth = Some(vec![1.0; 32 * 32]);
        let out = apply_domain_shift(&img, ShiftKind::Fog, 0.5, 0).unwrap();
        // Stored at 8-bit resolution.
        assert!((out.pixels[0] as f64 - expected).abs() <= 0.5 / 255.0 + 1e-7);
    }

    #[test]
    fn fog_requires_depth() {
        let mut img = generate_scene(&SceneSpec::default(), 1).unwrap();
        img.depth = None;
        assert!(matches!(apply_domain_shift(&img, ShiftKind::Fog, 1.0, 0), Err(Error::MissingDepth)));
    }

    #[test]
    fn shifts_never_move_annotations() {
        for i in 0..10 {
            let img = generate_scene(&SceneSpec::default(), i).unwrap();
            for kind in [ShiftKind::Fog, ShiftKind::Palette] {
                let out = apply_domain_shift(&img, kind, 3.0, i).unwrap();
                assert_eq!(out.annotations, img.annotations);
                assert_ne!(out.pixels, img.pixels);
            }
        }
    }

    #[test]
    fn posterize_levels_follow_severity() {
        assert_eq!(posterize_levels(0.0), 256);
        assert_eq!(posterize_levels(6.0), 4);
        assert_eq!(posterize_levels(20.0), 2);
    }
}
