//! Elementwise nonlinearities.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::Result;
use crate::tensor::Tensor;

#[inline]
fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

/// x * Phi(x) using the exact error function.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn gelu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    x.zip_map(grad_out, |v, g| g * gelu_grad_scalar(v))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Takes the forward output `y = sigmoid(x)`.
pub fn sigmoid_backward(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    y.zip_map(grad_out, |s, g| g * s * (1.0 - s))
}

#[inline]
pub fn hard_sigmoid_scalar(x: f64) -> f64 {
    ((x + 3.0) / 6.0).clamp(0.0, 1.0)
}

/// clamp((x + 3) / 6, 0, 1)
pub fn hard_sigmoid(x: &Tensor) -> Tensor {
    x.map(hard_sigmoid_scalar)
}

pub fn hard_sigmoid_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    x.zip_map(grad_out, |v, g| if v > -3.0 && v < 3.0 { g / 6.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_anchor_values() {
        let t = Tensor::from_vec([1, 1, 1, 3], vec![0.0, 40.0, -40.0]).unwrap();
        let y = gelu(&t);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 40.0).abs() < 1e-12);
        assert!(y.data()[2].abs() < 1e-12);
        // exact erf form, not the tanh approximation: GELU(1) = Phi(1)
        assert!((gelu_scalar(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn hard_sigmoid_breakpoints() {
        assert_eq!(hard_sigmoid_scalar(-3.0), 0.0);
        assert_eq!(hard_sigmoid_scalar(0.0), 0.5);
        assert_eq!(hard_sigmoid_scalar(3.0), 1.0);
        assert_eq!(hard_sigmoid_scalar(-10.0), 0.0);
        assert_eq!(hard_sigmoid_scalar(10.0), 1.0);
    }

    #[test]
    fn gelu_derivative_matches_central_differences() {
        let h = 1e-5;
        for &x in &[-3.1, -0.7, 0.0, 0.4, 1.9, 5.0] {
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-6, "x={x}");
        }
    }
}
