//! Central-difference gradient checking.

use super::tensor::Tensor;

/// Element-wise `(f(x + ε eᵢ) − f(x − ε eᵢ)) / 2ε`.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "eps must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// Richardson extrapolation of two central differences (steps `eps` and
/// `eps / 2`); truncation error is fourth order in `eps`.
pub fn finite_diff_grad_extrapolated(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    let coarse = finite_diff_grad(&f, x, eps);
    let mut fine = finite_diff_grad(&f, x, eps / 2.0);
    for (a, c) in fine.data_mut().iter_mut().zip(coarse.data()) {
        *a = (4.0 * *a - c) / 3.0;
    }
    fine
}

/// Magnitude below which relative error degrades to absolute error.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}

pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max)
}
