//! Tensors, the gradient tape, and scalar transforms shared by every loss.

mod tape;
mod tensor;

pub use tape::{log_sigmoid, sigmoid, Gradients, SparsePlan, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: domain error ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward: loss does not depend on any differentiable input")]
    DetachedLoss,
    #[error("backward: tape was already differentiated")]
    TapeConsumed,
}

/// Rescales `v` affinely onto `[0, 1]`.
///
/// A constant input has no range to rescale and maps to all zeros.
pub fn min_max_scale(v: &[f64]) -> Result<Vec<f64>, TensorError> {
    if v.is_empty() {
        return Err(TensorError::Invalid {
            op: "min_max_scale",
            detail: "empty input".into(),
        });
    }
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![0.0; v.len()]);
    }
    let span = hi - lo;
    Ok(v.iter().map(|x| ((x - lo) / span).clamp(0.0, 1.0)).collect())
}

/// Binary entropy `-p ln p - (1-p) ln(1-p)` in nats, with `0 ln 0 = 0`.
pub fn bernoulli_entropy(p: &[f64]) -> Result<Vec<f64>, TensorError> {
    p.iter()
        .map(|&x| {
            if !(0.0..=1.0).contains(&x) {
                return Err(TensorError::Domain {
                    op: "bernoulli_entropy",
                    detail: format!("probability {x} outside [0, 1]"),
                });
            }
            let xlogx = |q: f64| if q > 0.0 { q * q.ln() } else { 0.0 };
            Ok(-(xlogx(x) + xlogx(1.0 - x)))
        })
        .collect()
}

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_difference_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    out
}

/// Relative tolerance of every finite-difference gradient check.
pub const GRAD_RTOL: f64 = 1e-4;
/// Absolute error below which a gradient entry always agrees.
pub const GRAD_ATOL: f64 = 1e-8;

/// Relative error used by gradient checks: entries agree when
/// `|a-b| ≤ max(GRAD_RTOL·max(|a|,|b|), GRAD_ATOL)`, i.e. the returned value
/// is at most `GRAD_RTOL`.
pub fn gradient_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    max_relative_error(analytic, numeric, GRAD_ATOL / GRAD_RTOL)
}

/// Largest elementwise relative error `|a-b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
