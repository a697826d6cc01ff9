//! Named parameter collections and the operations shared by every weight set.

use crate::error::{Error, Result};

/// Borrowed view of one named tensor.
#[derive(Debug, Clone)]
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

impl<'a> TensorRef<'a> {
    pub fn new(name: String, shape: &[usize], data: &'a [f64]) -> Self {
        Self { name, shape: shape.to_vec(), data }
    }
}

/// A fixed, ordered collection of named tensors. `tensors` and `tensors_mut` must list the
/// same tensors in the same order.
pub trait ParamSet {
    fn tensors(&self) -> Vec<TensorRef<'_>>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// First non-finite entry as `(tensor name, flat index)`.
    fn first_non_finite(&self) -> Option<(String, usize)> {
        self.tensors()
            .into_iter()
            .find_map(|t| t.data.iter().position(|v| !v.is_finite()).map(|i| (t.name.clone(), i)))
    }

    fn signature(&self) -> Vec<(String, Vec<usize>)> {
        self.tensors().into_iter().map(|t| (t.name, t.shape)).collect()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.fill(value);
        }
    }
}

pub fn check_same_shape<P: ParamSet + ?Sized, Q: ParamSet + ?Sized>(a: &P, b: &Q) -> Result<()> {
    if a.signature() != b.signature() {
        return Err(Error::ShapeMismatch("parameter sets have different layouts".into()));
    }
    Ok(())
}

/// `dst += scale · src`
pub fn axpy<P: ParamSet + ?Sized>(dst: &mut P, scale: f64, src: &P) {
    let src = src.tensors();
    for (d, s) in dst.tensors_mut().into_iter().zip(src) {
        for (x, y) in d.iter_mut().zip(s.data) {
            *x += scale * y;
        }
    }
}

/// Exponential moving average `θ_t ← α·θ_t + (1−α)·θ_s`, evaluated as
/// `θ_t + (1−α)(θ_s − θ_t)` so that equal inputs are an exact fixed point.
pub fn ema_update<P: ParamSet + ?Sized>(teacher: &mut P, student: &P, alpha: f64) -> Result<()> {
    check_same_shape(teacher, student)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("EMA coefficient must be in [0, 1], got {alpha}")));
    }
    let beta = 1.0 - alpha;
    let src = student.tensors();
    for (t, s) in teacher.tensors_mut().into_iter().zip(src) {
        for (x, &y) in t.iter_mut().zip(s.data) {
            *x += beta * (y - *x);
        }
    }
    Ok(())
}
