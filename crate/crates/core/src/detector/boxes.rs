//! Anchors and the box-delta parameterization.

use super::arch::{ArchConfig, STRIDE};
use crate::data::BoundingBox;

/// Upper bound on predicted log-scale deltas.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Anchors ordered by `(cell_y, cell_x, scale)`, i.e. index `(y·w + x)·A + a`.
pub fn anchors(arch: &ArchConfig) -> Vec<BoundingBox> {
    let n = arch.feature_size();
    let mut out = Vec::with_capacity(n * n * arch.anchor_scales.len());
    for y in 0..n {
        for x in 0..n {
            let cx = (x as f64 + 0.5) * STRIDE as f64;
            let cy = (y as f64 + 0.5) * STRIDE as f64;
            for &s in &arch.anchor_scales {
                let h = 0.5 * s;
                out.push(BoundingBox::raw(cx - h, cy - h, cx + h, cy + h));
            }
        }
    }
    out
}

/// `(Δcx / w, Δcy / h, ln(w′/w), ln(h′/h))` of `target` relative to `reference`.
pub fn encode(reference: &BoundingBox, target: &BoundingBox) -> [f64; 4] {
    let (rw, rh) = (reference.width(), reference.height());
    let (rcx, rcy) = reference.center();
    let (tcx, tcy) = target.center();
    [
        (tcx - rcx) / rw,
        (tcy - rcy) / rh,
        (target.width() / rw).ln(),
        (target.height() / rh).ln(),
    ]
}

pub fn decode(reference: &BoundingBox, d: &[f64; 4]) -> BoundingBox {
    let (rw, rh) = (reference.width(), reference.height());
    let (rcx, rcy) = reference.center();
    let cx = rcx + d[0] * rw;
    let cy = rcy + d[1] * rh;
    let w = rw * d[2].min(MAX_LOG_SCALE).exp();
    let h = rh * d[3].min(MAX_LOG_SCALE).exp();
    BoundingBox::raw(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}
