//! Image-level domain discriminator on student features and the gradient reversal layer.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::DomainTag;
use crate::detector::gradcheck::Signature;
use crate::detector::layers::{relu_backward, relu_inplace, sigmoid, Conv2d, ConvCache, Linear};
use crate::detector::params::{ParamSet, TensorRef};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

/// Probability clamp inside the discriminator loss.
pub const PROB_EPS: f64 = 1e-7;

/// conv3×3 → ReLU → conv3×3 → ReLU → global average pool → linear → one logit.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub fc: Linear,
}

impl DiscriminatorParams {
    pub fn zeros(in_channels: usize, hidden: usize) -> Self {
        Self { conv1: Conv2d::zeros(hidden, in_channels, 3, 1, 1), conv2: Conv2d::zeros(hidden, hidden, 3, 1, 1), fc: Linear::zeros(1, hidden) }
    }

    pub fn init(in_channels: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, stream::INIT, 2);
        Self {
            conv1: Conv2d::he(hidden, in_channels, 3, 1, 1, &mut rng),
            conv2: Conv2d::he(hidden, hidden, 3, 1, 1, &mut rng),
            fc: Linear::normal(1, hidden, 0.01, &mut rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self { conv1: self.conv1.zeros_like(), conv2: self.conv2.zeros_like(), fc: self.fc.zeros_like() }
    }
}

impl ParamSet for DiscriminatorParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::with_capacity(6);
        self.conv1.push_tensors("conv1", &mut out);
        self.conv2.push_tensors("conv2", &mut out);
        self.fc.push_tensors("fc", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(6);
        self.conv1.push_tensors_mut(&mut out);
        self.conv2.push_tensors_mut(&mut out);
        self.fc.push_tensors_mut(&mut out);
        out
    }
}

pub struct DiscriminatorCache {
    c1: ConvCache,
    a1: Array3<f64>,
    c2: ConvCache,
    a2: Array3<f64>,
    pooled: Array2<f64>,
}

impl DiscriminatorCache {
    pub fn push_signature(&self, s: &mut Signature) {
        s.push_signs(self.a1.iter());
        s.push_signs(self.a2.iter());
    }
}

pub fn discriminator_forward(phi: &DiscriminatorParams, features: &Array3<f64>) -> (f64, DiscriminatorCache) {
    let (mut a1, c1) = phi.conv1.forward(features);
    relu_inplace(&mut a1);
    let (mut a2, c2) = phi.conv2.forward(&a1);
    relu_inplace(&mut a2);
    let (ch, h, w) = a2.dim();
    let inv = 1.0 / (h * w) as f64;
    let pooled = Array2::from_shape_fn((1, ch), |(_, c)| a2.index_axis(ndarray::Axis(0), c).sum() * inv);
    let logit = phi.fc.forward(&pooled)[[0, 0]];
    (logit, DiscriminatorCache { c1, a1, c2, a2, pooled })
}

/// Accumulates `d_logit`-weighted parameter gradients and returns the feature gradient.
pub fn discriminator_backward(phi: &DiscriminatorParams, cache: &DiscriminatorCache, d_logit: f64, grads: &mut DiscriminatorParams) -> Array3<f64> {
    let g_out = Array2::from_elem((1, 1), d_logit);
    let g_pooled = phi.fc.backward(&cache.pooled, &g_out, &mut grads.fc, true).unwrap();
    let (ch, h, w) = cache.a2.dim();
    let inv = 1.0 / (h * w) as f64;
    let mut g2 = Array3::from_shape_fn((ch, h, w), |(c, _, _)| g_pooled[[0, c]] * inv);
    relu_backward(&cache.a2, &mut g2);
    let mut g1 = phi.conv2.backward(&cache.c2, &g2, &mut grads.conv2, true).unwrap();
    relu_backward(&cache.a1, &mut g1);
    phi.conv1.backward(&cache.c1, &g1, &mut grads.conv1, true).unwrap()
}

/// Probability that `features` come from the target domain.
pub fn discriminate(phi: &DiscriminatorParams, features: &Array3<f64>) -> f64 {
    sigmoid(discriminator_forward(phi, features).0)
}

/// `−d·ln p − (1−d)·ln(1−p)` with `p` clamped to `[ε, 1−ε]`.
pub fn discriminator_loss(p: f64, d: DomainTag) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let d = d.as_label();
    -d * p.ln() - (1.0 - d) * (1.0 - p).ln()
}

/// Derivative of [`discriminator_loss`] with respect to the logit. Zero inside the clamp.
fn discriminator_loss_dlogit(p: f64, d: DomainTag) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    p - d.as_label()
}

/// Gradient reversal: identity forward, `−coefficient ×` gradient backward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grl {
    pub reversal_coefficient: f64,
}

impl Default for Grl {
    fn default() -> Self {
        Self { reversal_coefficient: 1.0 }
    }
}

impl Grl {
    pub fn new(reversal_coefficient: f64) -> Result<Self> {
        if !(reversal_coefficient >= 0.0) || !reversal_coefficient.is_finite() {
            return Err(Error::InvalidConfig(format!("reversal coefficient must be finite and ≥ 0, got {reversal_coefficient}")));
        }
        Ok(Self { reversal_coefficient })
    }

    pub fn forward<'a>(&self, x: &'a Array3<f64>) -> &'a Array3<f64> {
        x
    }

    pub fn backward(&self, grad: &Array3<f64>) -> Array3<f64> {
        grad.mapv(|g| -self.reversal_coefficient * g)
    }
}

pub struct AdversarialOutput {
    /// Mean discriminator loss over the joint batch.
    pub loss: f64,
    /// `∂L_dis/∂φ`, the discriminator's descent direction.
    pub disc_grads: DiscriminatorParams,
    /// Feature gradients after the reversal layer, source images first then target.
    pub source_feature_grads: Vec<Array3<f64>>,
    pub target_feature_grads: Vec<Array3<f64>>,
    pub signature: u64,
}

/// Discriminator loss over a batch of student features from both domains. With `grl` the
/// returned feature gradients are reversed (ascent for the encoder); without it they are the
/// plain `∂L_dis/∂features`.
pub fn adversarial_contribution(
    phi: &DiscriminatorParams,
    grl: Option<&Grl>,
    source: &[&Array3<f64>],
    target: &[&Array3<f64>],
) -> Result<AdversarialOutput> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::OneSidedBatch { source_count: source.len(), target_count: target.len() });
    }
    let inv = 1.0 / (source.len() + target.len()) as f64;
    let mut loss = 0.0;
    let mut disc_grads = phi.zeros_like();
    let mut sig = Signature::default();
    let mut run = |feats: &[&Array3<f64>], d: DomainTag| -> Vec<Array3<f64>> {
        feats
            .iter()
            .map(|f| {
                let (logit, cache) = discriminator_forward(phi, grl.map_or(*f, |g| g.forward(f)));
                cache.push_signature(&mut sig);
                let p = sigmoid(logit);
                loss += discriminator_loss(p, d) * inv;
                let g = discriminator_backward(phi, &cache, discriminator_loss_dlogit(p, d) * inv, &mut disc_grads);
                match grl {
                    Some(r) => r.backward(&g),
                    None => g,
                }
            })
            .collect()
    };
    let source_feature_grads = run(source, DomainTag::Source);
    let target_feature_grads = run(target, DomainTag::Target);
    Ok(AdversarialOutput { loss, disc_grads, source_feature_grads, target_feature_grads, signature: sig.finish() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::gradcheck::{check_gradients, jitter_biases};
    use crate::detector::sgd::{sgd_step, SgdConfig, SgdState};
    use rand::Rng;

    fn random_feat(seed: u64, c: usize, n: usize) -> Array3<f64> {
        let mut rng = rng_for(seed, 77, 0);
        Array3::from_shape_fn((c, n, n), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn zero_weights_give_half() {
        let phi = DiscriminatorParams::zeros(4, 3);
        assert_eq!(discriminate(&phi, &random_feat(0, 4, 4)), 0.5);
    }

    #[test]
    fn deterministic_and_monotone_in_bias() {
        let mut phi = DiscriminatorParams::init(4, 3, 1);
        let x = random_feat(1, 4, 4);
        let p = discriminate(&phi, &x);
        assert_eq!(p, discriminate(&phi, &x));
        phi.fc.bias[0] += 1.0;
        assert!(discriminate(&phi, &x) > p);
    }

    #[test]
    fn loss_values() {
        let ln2 = std::f64::consts::LN_2;
        assert!((discriminator_loss(0.5, DomainTag::Target) - ln2).abs() < 1e-15);
        assert!((discriminator_loss(0.5, DomainTag::Source) - ln2).abs() < 1e-15);
        assert!(discriminator_loss(1.0 - PROB_EPS, DomainTag::Target) < 1e-6);
        assert!(discriminator_loss(1.0, DomainTag::Source).is_finite());
        assert!(discriminator_loss(0.3, DomainTag::Source) >= 0.0);
    }

    #[test]
    fn grl_forward_is_identity_and_backward_negates() {
        let x = random_feat(2, 3, 4);
        let g = Grl::default();
        assert_eq!(g.forward(&x), &x);
        assert_eq!(g.backward(&x), x.mapv(|v| -v));
        assert!(Grl::new(-1.0).is_err());
    }

    #[test]
    fn one_sided_batch_is_rejected() {
        let phi = DiscriminatorParams::init(3, 2, 0);
        let x = random_feat(3, 3, 4);
        assert!(matches!(adversarial_contribution(&phi, None, &[&x], &[]), Err(Error::OneSidedBatch { .. })));
        assert!(adversarial_contribution(&phi, None, &[], &[&x]).is_err());
    }

    #[test]
    fn reversed_feature_gradient_is_exact_negation() {
        let phi = DiscriminatorParams::init(3, 2, 4);
        let (s, t) = (random_feat(4, 3, 4), random_feat(5, 3, 4));
        let plain = adversarial_contribution(&phi, None, &[&s], &[&t]).unwrap();
        let rev = adversarial_contribution(&phi, Some(&Grl::default()), &[&s], &[&t]).unwrap();
        assert_eq!(rev.source_feature_grads[0], plain.source_feature_grads[0].mapv(|v| -v));
        assert_eq!(rev.target_feature_grads[0], plain.target_feature_grads[0].mapv(|v| -v));
        assert_eq!(rev.disc_grads, plain.disc_grads);
        assert_eq!(rev.loss, plain.loss);
    }

    #[test]
    fn discriminator_gradient_matches_finite_differences() {
        let mut phi = DiscriminatorParams::init(3, 3, 6);
        jitter_biases(&mut phi, 6);
        let (s, t) = (random_feat(6, 3, 4), random_feat(7, 3, 4));
        let out = adversarial_contribution(&phi, None, &[&s], &[&t]).unwrap();
        let f = |q: &DiscriminatorParams| {
            let o = adversarial_contribution(q, None, &[&s], &[&t]).unwrap();
            (o.loss, o.signature)
        };
        check_gradients(&phi, &out.disc_grads, f, 1e-4).assert_below(1e-3);
    }

    #[test]
    fn indistinguishable_domains_settle_at_ln2() {
        let x = random_feat(8, 3, 4);
        let mut phi = DiscriminatorParams::init(3, 3, 8);
        let mut state = SgdState::new(&phi);
        let cfg = SgdConfig { lr: 0.5, momentum: 0.0, weight_decay: 0.0 };
        let mut loss = 0.0;
        for _ in 0..200 {
            let out = adversarial_contribution(&phi, None, &[&x], &[&x]).unwrap();
            loss = out.loss;
            sgd_step(&mut phi, &out.disc_grads, &cfg, &mut state).unwrap();
        }
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn separable_features_are_learned() {
        // Source features carry a bright first channel, target a dark one.
        let make = |seed: u64, level: f64| {
            let mut f = random_feat(seed, 4, 4).mapv(|v| 0.2 * v);
            f.index_axis_mut(ndarray::Axis(0), 0).fill(level);
            f
        };
        let source: Vec<_> = (0..4).map(|i| make(10 + i, 1.0)).collect();
        let target: Vec<_> = (0..4).map(|i| make(20 + i, 0.0)).collect();
        let sr: Vec<&Array3<f64>> = source.iter().collect();
        let tr: Vec<&Array3<f64>> = target.iter().collect();
        let mut phi = DiscriminatorParams::init(4, 16, 3);
        let mut state = SgdState::new(&phi);
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        let mut loss = f64::INFINITY;
        for _ in 0..200 {
            let out = adversarial_contribution(&phi, Some(&Grl::default()), &sr, &tr).unwrap();
            loss = out.loss;
            sgd_step(&mut phi, &out.disc_grads, &cfg, &mut state).unwrap();
        }
        assert!(loss < 0.1, "{loss}");
    }
}
