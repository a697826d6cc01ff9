//! Momentum SGD with L2 weight decay folded into the gradient:
//! `g ← g + λθ`, `v ← μv + g`, `θ ← θ − ηv`.

use serde::{Deserialize, Serialize};

use super::params::{check_same_shape, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.01, momentum: 0.9, weight_decay: 5e-4 }
    }
}

/// Velocity buffers, one per tensor, plus the number of steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Vec<f64>>,
    pub steps: u64,
}

impl SgdState {
    pub fn new<P: ParamSet + ?Sized>(params: &P) -> Self {
        Self { velocity: params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect(), steps: 0 }
    }
}

/// One update. A non-finite gradient aborts before anything is modified.
pub fn sgd_step<P: ParamSet + ?Sized>(params: &mut P, grads: &P, cfg: &SgdConfig, state: &mut SgdState) -> Result<()> {
    check_same_shape(params, grads)?;
    if let Some((name, index)) = grads.first_non_finite() {
        let value = grads.tensors().into_iter().find(|t| t.name == name).map(|t| t.data[index]).unwrap_or(f64::NAN);
        return Err(Error::NonFinite { iteration: state.steps, detail: format!("gradient {name}[{index}] = {value}") });
    }
    let g = grads.tensors();
    for ((theta, grad), v) in params.tensors_mut().into_iter().zip(g).zip(state.velocity.iter_mut()) {
        for ((t, &gi), vi) in theta.iter_mut().zip(grad.data).zip(v.iter_mut()) {
            let d = gi + cfg.weight_decay * *t;
            *vi = cfg.momentum * *vi + d;
            *t -= cfg.lr * *vi;
        }
    }
    state.steps += 1;
    Ok(())
}
