use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[inline]
pub(crate) fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if !a.same_shape(b) {
        return shape_err(format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data)
}

/// Gradient through ReLU; `y` may be either the input or the output.
pub fn relu_backward(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    zip_map(y, grad_out, |v, g| if v > 0.0 { g } else { 0.0 })
}

/// Gradient through sigmoid, given its output `y`.
pub fn sigmoid_backward(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    zip_map(y, grad_out, |s, g| g * s * (1.0 - s))
}

/// Gradient through tanh, given its output `y`.
pub fn tanh_backward(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    zip_map(y, grad_out, |t, g| g * (1.0 - t * t))
}
