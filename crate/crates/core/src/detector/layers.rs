//! Convolution and dense layers with explicit forward caches and backward passes.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::params::TensorRef;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `(out, in, k, k)`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache {
    cols: Array2<f64>,
    in_shape: (usize, usize, usize),
}

impl Conv2d {
    pub fn zeros(out_ch: usize, in_ch: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            weight: Array4::zeros((out_ch, in_ch, k, k)),
            bias: Array1::zeros(out_ch),
            stride,
            pad,
        }
    }

    /// Normal weights with standard deviation `std`, zero bias.
    pub fn normal<R: Rng>(out_ch: usize, in_ch: usize, k: usize, stride: usize, pad: usize, std: f64, rng: &mut R) -> Self {
        let mut c = Self::zeros(out_ch, in_ch, k, stride, pad);
        c.weight.mapv_inplace(|_| { let z: f64 = StandardNormal.sample(rng); std * z });
        c
    }

    /// He initialisation for ReLU layers.
    pub fn he<R: Rng>(out_ch: usize, in_ch: usize, k: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        let std = (2.0 / (in_ch * k * k) as f64).sqrt();
        Self::normal(out_ch, in_ch, k, stride, pad, std, rng)
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        ((h + 2 * self.pad - k) / self.stride + 1, (w + 2 * self.pad - k) / self.stride + 1)
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let (o, i, k, _) = self.weight.dim();
        self.weight.view().into_shape_with_order((o, i * k * k)).expect("standard layout")
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let k = self.kernel();
        let (ho, wo) = self.out_hw(h, w);
        if k == 1 && self.stride == 1 && self.pad == 0 {
            return x.to_shape((c, h * w)).expect("contiguous").to_owned();
        }
        let mut cols = Array2::<f64>::zeros((c * k * k, ho * wo));
        let xs = x.as_slice().expect("standard layout");
        let cs = cols.as_slice_mut().unwrap();
        let (s, p) = (self.stride as isize, self.pad as isize);
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cs[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &xs[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, (c, h, w): (usize, usize, usize)) -> Array3<f64> {
        let k = self.kernel();
        let (ho, wo) = self.out_hw(h, w);
        if k == 1 && self.stride == 1 && self.pad == 0 {
            return cols.to_shape((c, h, w)).expect("contiguous").to_owned();
        }
        let mut x = Array3::<f64>::zeros((c, h, w));
        let xs = x.as_slice_mut().unwrap();
        let cs = cols.as_slice().expect("standard layout");
        let (s, p) = (self.stride as isize, self.pad as isize);
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cs[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..wo {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                xs[base + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channels");
        let cols = self.im2col(x);
        let (ho, wo) = self.out_hw(h, w);
        let mut out = Array2::<f64>::zeros((self.out_channels(), ho * wo));
        general_mat_mul(1.0, &self.weight_matrix(), &cols, 0.0, &mut out);
        out += &self.bias.view().insert_axis(Axis(1));
        let out = out.into_shape_with_order((self.out_channels(), ho, wo)).unwrap();
        (out, ConvCache { cols, in_shape: (c, h, w) })
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient when asked.
    pub fn backward(&self, cache: &ConvCache, grad_out: &Array3<f64>, grad: &mut Conv2d, want_input: bool) -> Option<Array3<f64>> {
        let (o, ho, wo) = grad_out.dim();
        let g = grad_out.view().into_shape_with_order((o, ho * wo)).expect("standard layout");
        {
            let (go, gi, gk, _) = grad.weight.dim();
            let mut gw = grad.weight.view_mut().into_shape_with_order((go, gi * gk * gk)).unwrap();
            general_mat_mul(1.0, &g, &cache.cols.t(), 1.0, &mut gw);
        }
        grad.bias += &g.sum_axis(Axis(1));
        if !want_input {
            return None;
        }
        let mut dcols = Array2::<f64>::zeros(cache.cols.dim());
        general_mat_mul(1.0, &self.weight_matrix().t(), &g, 0.0, &mut dcols);
        Some(self.col2im(&dcols, cache.in_shape))
    }

    pub fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        out.push(TensorRef::new(format!("{prefix}/weight"), self.weight.shape(), self.weight.as_slice().unwrap()));
        out.push(TensorRef::new(format!("{prefix}/bias"), self.bias.shape(), self.bias.as_slice().unwrap()));
    }

    pub fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.weight.as_slice_mut().unwrap());
        out.push(self.bias.as_slice_mut().unwrap());
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.out_channels(), self.in_channels(), self.kernel(), self.stride, self.pad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `(out, in)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self { weight: Array2::zeros((out_dim, in_dim)), bias: Array1::zeros(out_dim) }
    }

    pub fn normal<R: Rng>(out_dim: usize, in_dim: usize, std: f64, rng: &mut R) -> Self {
        let mut l = Self::zeros(out_dim, in_dim);
        l.weight.mapv_inplace(|_| { let z: f64 = StandardNormal.sample(rng); std * z });
        l
    }

    pub fn he<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        Self::normal(out_dim, in_dim, (2.0 / in_dim as f64).sqrt(), rng)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim().0
    }

    /// `x` is `(n, in)`; returns `(n, out)`.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((x.nrows(), self.out_dim()));
        general_mat_mul(1.0, x, &self.weight.t(), 0.0, &mut out);
        out += &self.bias;
        out
    }

    pub fn backward(&self, x: &Array2<f64>, grad_out: &Array2<f64>, grad: &mut Linear, want_input: bool) -> Option<Array2<f64>> {
        general_mat_mul(1.0, &grad_out.t(), x, 1.0, &mut grad.weight);
        grad.bias += &grad_out.sum_axis(Axis(0));
        if !want_input {
            return None;
        }
        let mut dx = Array2::<f64>::zeros(x.dim());
        general_mat_mul(1.0, grad_out, &self.weight, 0.0, &mut dx);
        Some(dx)
    }

    pub fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        out.push(TensorRef::new(format!("{prefix}/weight"), self.weight.shape(), self.weight.as_slice().unwrap()));
        out.push(TensorRef::new(format!("{prefix}/bias"), self.bias.shape(), self.bias.as_slice().unwrap()));
    }

    pub fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.weight.as_slice_mut().unwrap());
        out.push(self.bias.as_slice_mut().unwrap());
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.out_dim(), self.in_dim())
    }
}

pub fn relu_inplace<D: ndarray::Dimension>(x: &mut ndarray::Array<f64, D>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward<D: ndarray::Dimension>(activated: &ndarray::Array<f64, D>, grad: &mut ndarray::Array<f64, D>) {
    ndarray::Zip::from(grad).and(activated).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable binary cross-entropy on a logit.
#[inline]
pub fn bce_with_logit(z: f64, target: f64) -> f64 {
    z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct convolution, independent of im2col.
    fn naive_conv(c: &Conv2d, x: &Array3<f64>) -> Array3<f64> {
        let (ci, h, w) = x.dim();
        let k = c.kernel();
        let (ho, wo) = c.out_hw(h, w);
        let mut out = Array3::zeros((c.out_channels(), ho, wo));
        for o in 0..c.out_channels() {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = c.bias[o];
                    for i in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * c.stride + ky) as isize - c.pad as isize;
                                let ix = (ox * c.stride + kx) as isize - c.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += c.weight[[o, i, ky, kx]] * x[[i, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    out[[o, oy, ox]] = acc;
                }
            }
        }
        out
    }

    fn rand3(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
            let mut c = Conv2d::he(4, 3, k, stride, pad, &mut rng);
            c.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            let x = rand3(&mut rng, (3, 9, 8));
            let (fast, _) = c.forward(&x);
            let slow = naive_conv(&c, &x);
            assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = Conv2d::he(2, 3, 3, 2, 1, &mut rng);
        let x = rand3(&mut rng, (3, 6, 6));
        let (y, cache) = c.forward(&x);
        let upstream = Array3::from_shape_fn(y.dim(), |_| rng.random_range(-1.0..1.0));
        let loss = |c: &Conv2d, x: &Array3<f64>| (&c.forward(x).0 * &upstream).sum();
        let mut grad = c.zeros_like();
        let dx = c.backward(&cache, &upstream, &mut grad, true).unwrap();
        let eps = 1e-6;
        for idx in [[0, 0, 1, 1], [1, 2, 0, 2], [1, 1, 2, 0]] {
            let mut cp = c.clone();
            cp.weight[idx] += eps;
            let mut cm = c.clone();
            cm.weight[idx] -= eps;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps);
            assert!((fd - grad.weight[idx]).abs() < 1e-6);
        }
        for idx in [[0, 0, 0], [2, 3, 4], [1, 5, 5]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (loss(&c, &xp) - loss(&c, &xm)) / (2.0 * eps);
            assert!((fd - dx[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = Linear::he(3, 5, &mut rng);
        let x = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));
        let upstream = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let mut grad = l.zeros_like();
        let dx = l.backward(&x, &upstream, &mut grad, true).unwrap();
        let eps = 1e-6;
        let loss = |l: &Linear, x: &Array2<f64>| (&l.forward(x) * &upstream).sum();
        let mut lp = l.clone();
        lp.weight[[1, 2]] += eps;
        let mut lm = l.clone();
        lm.weight[[1, 2]] -= eps;
        assert!(((loss(&lp, &x) - loss(&lm, &x)) / (2.0 * eps) - grad.weight[[1, 2]]).abs() < 1e-6);
        let mut xp = x.clone();
        xp[[3, 4]] += eps;
        let mut xm = x.clone();
        xm[[3, 4]] -= eps;
        assert!(((loss(&l, &xp) - loss(&l, &xm)) / (2.0 * eps) - dx[[3, 4]]).abs() < 1e-6);
    }

    #[test]
    fn bce_matches_definition() {
        for (z, t) in [(0.3, 1.0), (-2.0, 0.0), (5.0, 0.0), (-40.0, 1.0)] {
            let p: f64 = sigmoid(z);
            let direct = -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
            assert!((bce_with_logit(z, t) - direct).abs() < 1e-9 * direct.max(1.0));
        }
        assert!(bce_with_logit(100.0, 1.0) < 1e-40);
        assert!(bce_with_logit(-100.0, 0.0) < 1e-40);
    }
}
