//! Central finite differences for checking analytic gradients.

use super::Matrix;

/// Central-difference gradient of `f` at `at`, one coordinate at a time.
pub fn finite_difference(mut f: impl FnMut(&Matrix<f64>) -> f64, at: &Matrix<f64>, h: f64) -> Matrix<f64> {
    let mut probe = at.clone();
    let mut grad = Matrix::zeros(at.rows(), at.cols());
    for idx in 0..at.data().len() {
        let orig = probe.data()[idx];
        probe.data_mut()[idx] = orig + h;
        let up = f(&probe);
        probe.data_mut()[idx] = orig - h;
        let down = f(&probe);
        probe.data_mut()[idx] = orig;
        grad.data_mut()[idx] = (up - down) / (2.0 * h);
    }
    grad
}

/// Max-norm relative error `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`; zero when both vanish.
pub fn relative_error(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    let scale = a
        .data()
        .iter()
        .chain(b.data())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    a.max_abs_diff(b) / scale
}
