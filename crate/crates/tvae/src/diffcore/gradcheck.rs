//! Central-difference gradient checking (f64 only).

use super::element::Element;
use super::tensor::{no_grad, Tensor};

/// Outcome of a gradient check: the worst relative error and where it was.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error with a shared-scale denominator; two near-zero values agree.
pub(crate) fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs());
    if denom < 1e-10 {
        0.0
    } else {
        (a - n).abs() / denom
    }
}

/// Compare the reverse-mode gradient of `f` at `x` against central
/// differences with the given step, coordinate by coordinate.
///
/// `f` must be a deterministic map from a tensor to a scalar tensor.
pub fn grad_check(
    f: impl Fn(&Tensor<f64>) -> Tensor<f64>,
    x: &Tensor<f64>,
    step: f64,
) -> GradCheckReport {
    let shape = x.shape().to_vec();
    let base = x.data().to_vec();

    let xp = Tensor::param(shape.clone(), base.clone());
    let y = f(&xp);
    assert_eq!(y.numel(), 1, "grad_check target must be scalar, got {:?}", y.shape());
    y.backward();
    let analytic_f64: Vec<f64> = xp.grad_vec().iter().map(|v| v.to_f64()).collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: analytic_f64.first().copied().unwrap_or(0.0),
        numeric: 0.0,
    };
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let fp = no_grad(|| f(&Tensor::from_vec(shape.clone(), plus)).item());
        let fm = no_grad(|| f(&Tensor::from_vec(shape.clone(), minus)).item());
        let numeric = (fp - fm) / (2.0 * step);
        let err = rel_err(analytic_f64[i], numeric);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = i;
            report.analytic = analytic_f64[i];
            report.numeric = numeric;
        }
    }
    report
}
