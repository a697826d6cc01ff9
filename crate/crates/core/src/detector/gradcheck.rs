//! Central finite-difference gradient checks over named parameter groups.
//!
//! Piecewise-linear units (ReLU, L1) make the loss non-differentiable on a measure-zero set, but
//! early-layer biases move thousands of pre-activations at once, so a step of `ε` regularly
//! straddles a kink. Each evaluation therefore reports a signature of its activation pattern;
//! when the two sides of a central difference disagree the step is shrunk until they match.

use std::hash::{Hash, Hasher};

use super::params::ParamSet;

#[derive(Debug, Clone)]
pub struct GroupError {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
    pub relative_error: f64,
    /// Entries whose `±ε` evaluations straddled a kink and were re-measured with a smaller step.
    pub kinked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub groups: Vec<GroupError>,
}

impl GradCheck {
    pub fn max_relative_error(&self) -> f64 {
        self.groups.iter().map(|g| g.relative_error).fold(0.0, f64::max)
    }

    pub fn assert_below(&self, tol: f64) {
        for g in &self.groups {
            assert!(
                g.relative_error < tol,
                "{}: relative error {:.3e} (analytic {:.3e}, numeric {:.3e})",
                g.name,
                g.relative_error,
                g.analytic_norm,
                g.numeric_norm
            );
        }
    }
}

/// Hashes a sequence of activation signs into a pattern signature.
#[derive(Default)]
pub struct Signature(std::collections::hash_map::DefaultHasher);

impl Signature {
    pub fn push_signs<'a>(&mut self, values: impl IntoIterator<Item = &'a f64>) {
        for v in values {
            (v.partial_cmp(&0.0)).hash(&mut self.0);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0.finish()
    }
}

const MAX_SHRINKS: usize = 4;

/// Compares `analytic` with `(f(θ+ε) − f(θ−ε)) / 2ε` for every entry of every tensor. `f`
/// returns the loss and an activation-pattern signature (constant for smooth functions).
pub fn check_gradients<P, F>(params: &P, analytic: &P, f: F, eps: f64) -> GradCheck
where
    P: ParamSet + Clone,
    F: Fn(&P) -> (f64, u64),
{
    let names: Vec<String> = params.tensors().into_iter().map(|t| t.name).collect();
    let analytic: Vec<Vec<f64>> = analytic.tensors().into_iter().map(|t| t.data.to_vec()).collect();
    let mut work = params.clone();
    let mut groups = Vec::with_capacity(names.len());
    for (ti, name) in names.into_iter().enumerate() {
        let len = analytic[ti].len();
        let mut numeric = vec![0.0; len];
        let mut kinked = 0;
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = work.tensors_mut()[ti][i];
            let mut step = eps;
            for attempt in 0..=MAX_SHRINKS {
                work.tensors_mut()[ti][i] = orig + step;
                let (plus, sp) = f(&work);
                work.tensors_mut()[ti][i] = orig - step;
                let (minus, sm) = f(&work);
                *slot = (plus - minus) / (2.0 * step);
                if sp == sm {
                    break;
                }
                if attempt == 0 {
                    kinked += 1;
                }
                step *= 0.1;
            }
            work.tensors_mut()[ti][i] = orig;
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic[ti].iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let (an, nn) = (norm(&analytic[ti]), norm(&numeric));
        let denom = an.max(nn);
        let relative_error = if denom == 0.0 { 0.0 } else { norm(&diff) / denom };
        groups.push(GroupError { name, analytic_norm: an, numeric_norm: nn, relative_error, kinked });
    }
    GradCheck { groups }
}

/// Moves every bias to a random value in `[-0.1, 0.1]`. Zero biases put ReLU inputs exactly on
/// the kink wherever the incoming activations vanish.
pub fn jitter_biases<P: ParamSet>(params: &mut P, seed: u64) {
    use rand::Rng;
    let mut rng = crate::rng::rng_for(seed, crate::rng::stream::INIT, 1);
    let names: Vec<bool> = params.tensors().iter().map(|t| t.name.ends_with("/bias")).collect();
    for (t, is_bias) in params.tensors_mut().into_iter().zip(names) {
        if is_bias {
            for v in t.iter_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::layers::Linear;

    #[derive(Clone)]
    struct One(Linear);

    impl ParamSet for One {
        fn tensors(&self) -> Vec<super::super::params::TensorRef<'_>> {
            let mut v = Vec::new();
            self.0.push_tensors("w", &mut v);
            v
        }
        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            let mut v = Vec::new();
            self.0.push_tensors_mut(&mut v);
            v
        }
    }

    #[test]
    fn kinked_entries_are_remeasured() {
        // f(w) = |w| at w = 5e-5: a step of 1e-4 straddles the kink.
        let mut p = One(Linear::zeros(1, 1));
        p.0.weight[[0, 0]] = 5e-5;
        let mut g = One(Linear::zeros(1, 1));
        g.0.weight[[0, 0]] = 1.0;
        let f = |q: &One| {
            let w = q.0.weight[[0, 0]];
            (w.abs(), (w > 0.0) as u64)
        };
        let r = check_gradients(&p, &g, f, 1e-4);
        assert_eq!(r.groups[0].kinked, 1);
        assert!(r.max_relative_error() < 1e-9);
    }
}
