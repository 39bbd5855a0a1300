//! Parameter containers shared by the networks, and the plumbing that lets
//! the optimizer, gradient accumulation and checkpoints treat every network
//! as a flat list of named tensors.

use nn::{conv2d, conv2d_backward, ConvLstmWeights, Padding, Tensor};
use polyrnn_nn as nn;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelError;

/// A flat, ordered view of a network's tensors. `named` and `tensors_mut`
/// must list the same tensors in the same order.
pub trait Params: Clone {
    fn named(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    /// Same structure with every entry zero; used as a gradient buffer.
    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn add_assign(&mut self, other: &Self) {
        let src = other.named();
        for (dst, (_, s)) in self.tensors_mut().into_iter().zip(src) {
            dst.add_assign(s).expect("identical structure");
        }
    }

    fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.scale(alpha);
        }
    }

    fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    fn sizes(&self) -> Vec<usize> {
        self.named().iter().map(|(_, t)| t.len()).collect()
    }

    /// Replaces every tensor with the one of the same name from `blocks`.
    fn load_named(&mut self, blocks: &[(String, Tensor)]) -> Result<(), ModelError> {
        let names: Vec<String> = self.named().into_iter().map(|(n, _)| n).collect();
        if names.len() != blocks.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameter blocks, found {}",
                names.len(),
                blocks.len()
            )));
        }
        for ((name, dst), (bname, src)) in names.iter().zip(self.tensors_mut()).zip(blocks) {
            if name != bname || dst.shape() != src.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "block {bname} {:?} does not match {name} {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

pub(crate) fn normal_tensor<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Square-kernel convolution with bias and "same" padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl ConvLayer {
    pub fn zeros(c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        ConvLayer {
            weight: Tensor::zeros(&[c_out, c_in, k, k]),
            bias: Tensor::zeros(&[c_out]),
            stride,
        }
    }

    /// Normal weights with standard deviation `gain / sqrt(fan_in)`.
    pub fn init<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let std = gain / ((c_in * k * k) as f64).sqrt();
        ConvLayer {
            weight: normal_tensor(&[c_out, c_in, k, k], std, rng),
            bias: Tensor::zeros(&[c_out]),
            stride,
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        conv2d(x, &self.weight, Some(&self.bias), self.stride, Padding::Same)
            .expect("layer shapes validated at construction")
    }

    /// Accumulates weight and bias gradients into `grads`; returns the input
    /// gradient when requested.
    pub fn backward(
        &self,
        x: &Tensor,
        grad_out: &Tensor,
        want_input: bool,
        grads: &mut ConvLayer,
    ) -> Option<Tensor> {
        let g = conv2d_backward(x, &self.weight, self.stride, Padding::Same, grad_out, want_input)
            .expect("layer shapes validated at construction");
        grads.weight.add_assign(&g.weight).expect("same shape");
        grads.bias.add_assign(&g.bias).expect("same shape");
        g.input
    }

    pub(crate) fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

/// Dense layer `y = W x + b` with `W` stored as `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[n_out, n_in]),
            bias: Tensor::zeros(&[n_out]),
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn n_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n_in();
        debug_assert_eq!(x.len(), n);
        let w = self.weight.data();
        self.bias
            .data()
            .iter()
            .enumerate()
            .map(|(o, &b)| b + dot(&w[o * n..(o + 1) * n], x))
            .collect()
    }

    /// Accumulates parameter gradients and returns `dL/dx`. Rows with a zero
    /// upstream gradient are skipped.
    pub fn backward(&self, x: &[f64], grad_out: &[f64], grads: &mut Linear) -> Vec<f64> {
        let n = self.n_in();
        let w = self.weight.data();
        let gw = grads.weight.data_mut();
        let mut dx = vec![0.0; n];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &w[o * n..(o + 1) * n];
            let grow = &mut gw[o * n..(o + 1) * n];
            for k in 0..n {
                grow[k] += g * x[k];
                dx[k] += g * row[k];
            }
        }
        for (b, &g) in grads.bias.data_mut().iter_mut().zip(grad_out) {
            *b += g;
        }
        dx
    }

    pub(crate) fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn lstm_init<R: Rng + ?Sized>(
    c_in: usize,
    hidden: usize,
    k: usize,
    forget_bias: f64,
    rng: &mut R,
) -> ConvLstmWeights {
    let mut w = ConvLstmWeights::zeros(c_in, hidden, k);
    w.wx = normal_tensor(w.wx.shape(), 1.0 / ((c_in * k * k) as f64).sqrt(), rng);
    w.wh = normal_tensor(w.wh.shape(), 1.0 / ((hidden * k * k) as f64).sqrt(), rng);
    // Gate order is i, f, o, g.
    w.bias.data_mut()[hidden..2 * hidden].fill(forget_bias);
    w
}

pub(crate) fn lstm_push_named<'a>(
    w: &'a ConvLstmWeights,
    prefix: &str,
    out: &mut Vec<(String, &'a Tensor)>,
) {
    out.push((format!("{prefix}.wx"), &w.wx));
    out.push((format!("{prefix}.wh"), &w.wh));
    out.push((format!("{prefix}.bias"), &w.bias));
}

pub(crate) fn lstm_push_mut<'a>(w: &'a mut ConvLstmWeights, out: &mut Vec<&'a mut Tensor>) {
    out.push(&mut w.wx);
    out.push(&mut w.wh);
    out.push(&mut w.bias);
}
