//! Forward passes with caches, and their backward passes.

use ndarray::{Array2, Array3};

use super::arch::{DetectorParams, STRIDE};
use super::layers::{relu_backward, relu_inplace, ConvCache};
use crate::data::{AnnotatedImage, BoundingBox};
use crate::error::{Error, Result};

/// Network input `(3, H, W)`, pixel values mapped from `[0, 1]` to `[-1, 1]`.
pub fn image_tensor(img: &AnnotatedImage) -> Array3<f64> {
    let (w, h) = (img.width, img.height);
    let mut x = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for xx in 0..w {
            let p = img.pixel(xx, y);
            for c in 0..3 {
                x[[c, y, xx]] = 2.0 * p[c] as f64 - 1.0;
            }
        }
    }
    x
}

pub struct EncoderCache {
    convs: Vec<ConvCache>,
    acts: Vec<Array3<f64>>,
}

fn check_input(params: &DetectorParams, x: &Array3<f64>) -> Result<()> {
    let n = params.arch.image_size;
    if x.dim() != (3, n, n) {
        return Err(Error::ShapeMismatch(format!("expected input (3, {n}, {n}), got {:?}", x.dim())));
    }
    Ok(())
}

impl EncoderCache {
    /// Post-ReLU outputs of each encoder block.
    pub fn activations(&self) -> &[Array3<f64>] {
        &self.acts
    }
}

pub fn encode_forward(params: &DetectorParams, x: &Array3<f64>) -> Result<(Array3<f64>, EncoderCache)> {
    check_input(params, x)?;
    let mut convs = Vec::with_capacity(4);
    let mut acts = Vec::with_capacity(4);
    let mut cur = x.clone();
    for conv in &params.encoder {
        let (mut y, cache) = conv.forward(&cur);
        relu_inplace(&mut y);
        convs.push(cache);
        acts.push(y.clone());
        cur = y;
    }
    Ok((cur, EncoderCache { convs, acts }))
}

/// Encoder features `(C, H/8, W/8)`.
pub fn encode(params: &DetectorParams, x: &Array3<f64>) -> Result<Array3<f64>> {
    check_input(params, x)?;
    let mut cur = x.clone();
    for conv in &params.encoder {
        let (mut y, _) = conv.forward(&cur);
        relu_inplace(&mut y);
        cur = y;
    }
    Ok(cur)
}

pub fn encode_backward(params: &DetectorParams, cache: &EncoderCache, dfeat: Array3<f64>, grads: &mut DetectorParams) {
    let mut g = dfeat;
    for i in (0..4).rev() {
        relu_backward(&cache.acts[i], &mut g);
        match params.encoder[i].backward(&cache.convs[i], &g, &mut grads.encoder[i], i > 0) {
            Some(dx) => g = dx,
            None => break,
        }
    }
}

/// Per-anchor outputs, indexed `(y·w + x)·A + a`.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnOutput {
    pub objectness: Vec<f64>,
    pub deltas: Vec<[f64; 4]>,
}

pub struct RpnCache {
    conv: ConvCache,
    hidden: Array3<f64>,
    obj: ConvCache,
    del: ConvCache,
}

impl RpnCache {
    pub fn hidden(&self) -> &Array3<f64> {
        &self.hidden
    }
}

pub fn rpn_forward(params: &DetectorParams, feat: &Array3<f64>) -> (RpnOutput, RpnCache) {
    let (mut hidden, conv) = params.rpn_conv.forward(feat);
    relu_inplace(&mut hidden);
    let (obj_map, obj) = params.rpn_objectness.forward(&hidden);
    let (del_map, del) = params.rpn_deltas.forward(&hidden);
    let (a, h, w) = obj_map.dim();
    let mut objectness = Vec::with_capacity(a * h * w);
    let mut deltas = Vec::with_capacity(a * h * w);
    for y in 0..h {
        for x in 0..w {
            for k in 0..a {
                objectness.push(obj_map[[k, y, x]]);
                deltas.push(std::array::from_fn(|j| del_map[[4 * k + j, y, x]]));
            }
        }
    }
    (RpnOutput { objectness, deltas }, RpnCache { conv, hidden, obj, del })
}

/// Gradients of the per-anchor outputs back to the feature map.
pub fn rpn_backward(
    params: &DetectorParams,
    cache: &RpnCache,
    d_objectness: &[f64],
    d_deltas: Option<&[[f64; 4]]>,
    grads: &mut DetectorParams,
) -> Array3<f64> {
    let (_, h, w) = cache.hidden.dim();
    let a = params.rpn_objectness.out_channels();
    let mut g_obj = Array3::<f64>::zeros((a, h, w));
    for y in 0..h {
        for x in 0..w {
            for k in 0..a {
                g_obj[[k, y, x]] = d_objectness[(y * w + x) * a + k];
            }
        }
    }
    let mut g_hidden = params.rpn_objectness.backward(&cache.obj, &g_obj, &mut grads.rpn_objectness, true).unwrap();
    if let Some(dd) = d_deltas {
        let mut g_del = Array3::<f64>::zeros((4 * a, h, w));
        for y in 0..h {
            for x in 0..w {
                for k in 0..a {
                    for j in 0..4 {
                        g_del[[4 * k + j, y, x]] = dd[(y * w + x) * a + k][j];
                    }
                }
            }
        }
        g_hidden += &params.rpn_deltas.backward(&cache.del, &g_del, &mut grads.rpn_deltas, true).unwrap();
    }
    relu_backward(&cache.hidden, &mut g_hidden);
    params.rpn_conv.backward(&cache.conv, &g_hidden, &mut grads.rpn_conv, true).unwrap()
}

/// Bilinear taps `(flat spatial index, weight)` for each pooled cell of each box.
pub type RoiTaps = Vec<[(usize, f64); 4]>;

/// Continuous feature-map coordinate of image coordinate `v` (feature centres at `(i + ½)·stride`).
#[inline]
fn to_feature(v: f64) -> f64 {
    v / STRIDE as f64 - 0.5
}

/// Crops every box from `feat` and resizes it to `pool × pool` by bilinear sampling at the
/// cell centres. Returns `(n, C·pool·pool)` with channel-major rows, plus the sampling taps.
pub fn roi_align(feat: &Array3<f64>, boxes: &[BoundingBox], pool: usize) -> (Array2<f64>, RoiTaps) {
    let (c, h, w) = feat.dim();
    let cells = pool * pool;
    let mut taps = Vec::with_capacity(boxes.len() * cells);
    for b in boxes {
        let (bw, bh) = (b.width() / pool as f64, b.height() / pool as f64);
        for i in 0..pool {
            let fy = to_feature(b.y1 + (i as f64 + 0.5) * bh).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let ly = fy - y0 as f64;
            for j in 0..pool {
                let fx = to_feature(b.x1 + (j as f64 + 0.5) * bw).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let lx = fx - x0 as f64;
                taps.push([
                    (y0 * w + x0, (1.0 - ly) * (1.0 - lx)),
                    (y0 * w + x1, (1.0 - ly) * lx),
                    (y1 * w + x0, ly * (1.0 - lx)),
                    (y1 * w + x1, ly * lx),
                ]);
            }
        }
    }
    let fs = feat.as_slice().expect("standard layout");
    let mut pooled = Array2::<f64>::zeros((boxes.len(), c * cells));
    for (bi, mut row) in pooled.rows_mut().into_iter().enumerate() {
        for cell in 0..cells {
            let t = &taps[bi * cells + cell];
            for ch in 0..c {
                let plane = &fs[ch * h * w..(ch + 1) * h * w];
                row[ch * cells + cell] = t.iter().map(|&(idx, wt)| wt * plane[idx]).sum();
            }
        }
    }
    (pooled, taps)
}

pub fn roi_align_backward(taps: &RoiTaps, d_pooled: &Array2<f64>, pool: usize, dfeat: &mut Array3<f64>) {
    let (c, h, w) = dfeat.dim();
    let cells = pool * pool;
    let ds = dfeat.as_slice_mut().expect("standard layout");
    for (bi, row) in d_pooled.rows().into_iter().enumerate() {
        for cell in 0..cells {
            let t = &taps[bi * cells + cell];
            for ch in 0..c {
                let g = row[ch * cells + cell];
                if g == 0.0 {
                    continue;
                }
                for &(idx, wt) in t {
                    ds[ch * h * w + idx] += wt * g;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiOutput {
    /// `(n, K)` per-class logits.
    pub cls_logits: Array2<f64>,
    /// `(n, 4)` class-agnostic refinement deltas.
    pub deltas: Array2<f64>,
}

pub struct RoiCache {
    pooled: Array2<f64>,
    hidden: Array2<f64>,
    taps: RoiTaps,
}

impl RoiCache {
    pub fn hidden(&self) -> &Array2<f64> {
        &self.hidden
    }
}

pub fn roi_forward(params: &DetectorParams, feat: &Array3<f64>, boxes: &[BoundingBox]) -> (RoiOutput, RoiCache) {
    let (pooled, taps) = roi_align(feat, boxes, params.arch.roi_pool);
    let mut hidden = params.roi_fc.forward(&pooled);
    relu_inplace(&mut hidden);
    let cls_logits = params.roi_cls.forward(&hidden);
    let deltas = params.roi_reg.forward(&hidden);
    (RoiOutput { cls_logits, deltas }, RoiCache { pooled, hidden, taps })
}

pub fn roi_backward(
    params: &DetectorParams,
    cache: &RoiCache,
    d_cls: &Array2<f64>,
    d_deltas: Option<&Array2<f64>>,
    grads: &mut DetectorParams,
    dfeat: &mut Array3<f64>,
) {
    if cache.pooled.nrows() == 0 {
        return;
    }
    let mut g_hidden = params.roi_cls.backward(&cache.hidden, d_cls, &mut grads.roi_cls, true).unwrap();
    if let Some(dd) = d_deltas {
        g_hidden += &params.roi_reg.backward(&cache.hidden, dd, &mut grads.roi_reg, true).unwrap();
    }
    relu_backward(&cache.hidden, &mut g_hidden);
    let g_pooled = params.roi_fc.backward(&cache.pooled, &g_hidden, &mut grads.roi_fc, true).unwrap();
    roi_align_backward(&cache.taps, &g_pooled, params.arch.roi_pool, dfeat);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::arch::ArchConfig;
    use ndarray::s;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_feat(seed: u64, c: usize, n: usize) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((c, n, n), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn encoder_output_shape() {
        let p = DetectorParams::init(&ArchConfig::default(), 0).unwrap();
        let x = Array3::zeros((3, 64, 64));
        assert_eq!(encode(&p, &x).unwrap().dim(), (64, 8, 8));
        assert!(encode(&p, &Array3::zeros((3, 32, 64))).is_err());
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let p = DetectorParams::zeros(&ArchConfig::default());
        let x = random_feat(1, 3, 64);
        assert!(encode(&p, &x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_is_deterministic() {
        let p = DetectorParams::init(&ArchConfig::default(), 3).unwrap();
        let x = random_feat(2, 3, 64);
        assert_eq!(encode(&p, &x).unwrap(), encode(&p, &x).unwrap());
    }

    #[test]
    fn grid_aligned_crop_is_sub_array() {
        let feat = random_feat(5, 4, 8);
        // Feature cells 2..6 in x, 1..5 in y.
        let b = BoundingBox::raw(16.0, 8.0, 48.0, 40.0);
        let (pooled, _) = roi_align(&feat, &[b], 4);
        let direct = feat.slice(s![.., 1..5, 2..6]);
        for c in 0..4 {
            for i in 0..4 {
                for j in 0..4 {
                    assert!((pooled[[0, c * 16 + i * 4 + j]] - direct[[c, i, j]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fractional_crop_matches_interpolation_oracle() {
        let feat = random_feat(6, 3, 8);
        let b = BoundingBox::raw(13.7, 9.2, 41.3, 37.9);
        let (pooled, _) = roi_align(&feat, &[b], 4);
        // Oracle: interpolate each sample point from first principles.
        let interp = |c: usize, fy: f64, fx: f64| -> f64 {
            let mut acc = 0.0;
            for yy in 0..8 {
                for xx in 0..8 {
                    let wy = (1.0 - (fy - yy as f64).abs()).max(0.0);
                    let wx = (1.0 - (fx - xx as f64).abs()).max(0.0);
                    acc += wy * wx * feat[[c, yy, xx]];
                }
            }
            acc
        };
        for c in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    let y = 9.2 + (i as f64 + 0.5) * (37.9 - 9.2) / 4.0;
                    let x = 13.7 + (j as f64 + 0.5) * (41.3 - 13.7) / 4.0;
                    let expected = interp(c, (y / 8.0 - 0.5).clamp(0.0, 7.0), (x / 8.0 - 0.5).clamp(0.0, 7.0));
                    assert!((pooled[[0, c * 16 + i * 4 + j]] - expected).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn roi_of_nothing_is_empty() {
        let p = DetectorParams::init(&ArchConfig::default(), 0).unwrap();
        let feat = random_feat(1, 64, 8);
        let (out, _) = roi_forward(&p, &feat, &[]);
        assert_eq!(out.cls_logits.dim(), (0, 3));
        assert_eq!(out.deltas.dim(), (0, 4));
    }
}
