//! Central finite differences, used as an independent oracle for the tape.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Central-difference estimate of `∇f(x)` with step `h`.
pub fn finite_difference_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.rows(), x.cols());
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[k] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[k] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("finite_difference_gradient"));
        }
        grad.data_mut()[k] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm_sq().sqrt().max(b.norm_sq().sqrt()).max(floor);
    diff / scale
}
