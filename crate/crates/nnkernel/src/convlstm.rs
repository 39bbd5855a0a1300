//! Convolutional LSTM cell.
//!
//! ```text
//! (i, f, o, g) = split4(W_h * h_prev + W_x * x + b)
//! c = σ(f) ⊙ c_prev + σ(i) ⊙ tanh(g)
//! h = σ(o) ⊙ tanh(c)
//! ```
//!
//! Gate channels are laid out in the order i, f, o, g, each `hidden` wide.
//! Both convolutions use "same" padding so the state keeps its spatial size.

use crate::activation::sigmoid_scalar;
use crate::conv::{conv2d, conv2d_backward, Padding};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmWeights {
    /// Input-to-state kernel, `[4·hidden, in_channels, k, k]`.
    pub wx: Tensor,
    /// Hidden-to-state kernel, `[4·hidden, hidden, k, k]`.
    pub wh: Tensor,
    /// `[4·hidden]`.
    pub bias: Tensor,
}

impl ConvLstmWeights {
    pub fn zeros(in_channels: usize, hidden: usize, kernel: usize) -> Self {
        ConvLstmWeights {
            wx: Tensor::zeros(&[4 * hidden, in_channels, kernel, kernel]),
            wh: Tensor::zeros(&[4 * hidden, hidden, kernel, kernel]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.wh.shape()[1]
    }

    pub fn in_channels(&self) -> usize {
        self.wx.shape()[1]
    }

    fn validate(&self) -> Result<()> {
        let hd = self.hidden();
        let ok = self.wx.shape().len() == 4
            && self.wh.shape().len() == 4
            && self.wx.shape()[0] == 4 * hd
            && self.wh.shape()[0] == 4 * hd
            && self.bias.len() == 4 * hd
            && self.wx.shape()[2..] == self.wh.shape()[2..]
            && self.wh.shape()[2] % 2 == 1;
        if ok {
            Ok(())
        } else {
            shape_err(format!(
                "inconsistent ConvLSTM weights wx {:?} wh {:?} b {:?}",
                self.wx.shape(),
                self.wh.shape(),
                self.bias.shape()
            ))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl ConvLstmState {
    pub fn zeros(hidden: usize, height: usize, width: usize) -> Self {
        ConvLstmState {
            h: Tensor::zeros(&[hidden, height, width]),
            c: Tensor::zeros(&[hidden, height, width]),
        }
    }
}

/// Everything the backward pass of one step needs.
#[derive(Clone, Debug)]
pub struct ConvLstmCache {
    h_prev: Tensor,
    c_prev: Tensor,
    /// Activated gates σ(i), σ(f), σ(o), tanh(g).
    gates: Tensor,
    tanh_c: Tensor,
}

/// Gradients of one step with respect to everything it consumed.
#[derive(Clone, Debug)]
pub struct ConvLstmGrads {
    pub x: Tensor,
    pub h_prev: Tensor,
    pub c_prev: Tensor,
    pub wx: Tensor,
    pub wh: Tensor,
    pub bias: Tensor,
}

/// Gradients of one step when the input term `W_x * x` was supplied
/// precomputed. `pre` is the gradient of the gate pre-activations, which is
/// also the gradient of the input term.
#[derive(Clone, Debug)]
pub struct GateGrads {
    pub pre: Tensor,
    pub h_prev: Tensor,
    pub c_prev: Tensor,
    pub wh: Tensor,
    pub bias: Tensor,
}

/// One ConvLSTM step.
pub fn convlstm_step(x: &Tensor, state: &ConvLstmState, w: &ConvLstmWeights) -> Result<ConvLstmState> {
    convlstm_forward(x, state, w).map(|(s, _)| s)
}

/// One ConvLSTM step, also returning the cache for [`convlstm_backward`].
pub fn convlstm_forward(
    x: &Tensor,
    state: &ConvLstmState,
    w: &ConvLstmWeights,
) -> Result<(ConvLstmState, ConvLstmCache)> {
    w.validate()?;
    let (_, xh, xw) = x.dims3()?;
    let (_, sh, sw) = state.h.dims3()?;
    if (xh, xw) != (sh, sw) {
        return shape_err(format!("input {xh}×{xw} vs state {sh}×{sw}"));
    }
    let input_term = conv2d(x, &w.wx, None, 1, Padding::Same)?;
    convlstm_forward_with_input_term(&input_term, state, w)
}

/// One ConvLSTM step where `input_term = W_x * x` has already been computed
/// by the caller (for instance because part of `x` is constant over time).
pub fn convlstm_forward_with_input_term(
    input_term: &Tensor,
    state: &ConvLstmState,
    w: &ConvLstmWeights,
) -> Result<(ConvLstmState, ConvLstmCache)> {
    w.validate()?;
    let hd = w.hidden();
    let (ch, h, wd) = state.h.dims3()?;
    if ch != hd || !state.c.same_shape(&state.h) {
        return shape_err(format!(
            "state h {:?} c {:?} for hidden size {hd}",
            state.h.shape(),
            state.c.shape()
        ));
    }
    if input_term.dims3()? != (4 * hd, h, wd) {
        return shape_err(format!(
            "input term {:?}, expected [{}, {h}, {wd}]",
            input_term.shape(),
            4 * hd
        ));
    }
    let mut pre = conv2d(&state.h, &w.wh, Some(&w.bias), 1, Padding::Same)?;
    pre.add_assign(input_term)?;

    let plane = h * wd;
    let n = hd * plane;
    let mut gates = pre;
    {
        let g = gates.data_mut();
        for v in &mut g[..3 * n] {
            *v = sigmoid_scalar(*v);
        }
        for v in &mut g[3 * n..] {
            *v = v.tanh();
        }
    }
    let gd = gates.data();
    let (gi, gf, go, gg) = (&gd[..n], &gd[n..2 * n], &gd[2 * n..3 * n], &gd[3 * n..]);
    let cp = state.c.data();
    let mut c = vec![0.0; n];
    let mut tanh_c = vec![0.0; n];
    let mut hnew = vec![0.0; n];
    for k in 0..n {
        c[k] = gf[k] * cp[k] + gi[k] * gg[k];
        tanh_c[k] = c[k].tanh();
        hnew[k] = go[k] * tanh_c[k];
    }
    let shape = [hd, h, wd];
    let next = ConvLstmState {
        h: Tensor::from_vec(&shape, hnew)?,
        c: Tensor::from_vec(&shape, c)?,
    };
    let cache = ConvLstmCache {
        h_prev: state.h.clone(),
        c_prev: state.c.clone(),
        gates,
        tanh_c: Tensor::from_vec(&shape, tanh_c)?,
    };
    Ok((next, cache))
}

/// Backward through one step given `dh`, `dc` flowing into the new state.
pub fn convlstm_backward(
    x: &Tensor,
    cache: &ConvLstmCache,
    w: &ConvLstmWeights,
    dh: &Tensor,
    dc: &Tensor,
) -> Result<ConvLstmGrads> {
    let gg = convlstm_backward_gates(cache, w, dh, dc)?;
    let xg = conv2d_backward(x, &w.wx, 1, Padding::Same, &gg.pre, true)?;
    Ok(ConvLstmGrads {
        x: xg.input.expect("input gradient requested"),
        h_prev: gg.h_prev,
        c_prev: gg.c_prev,
        wx: xg.weight,
        wh: gg.wh,
        bias: gg.bias,
    })
}

/// Backward through the gating and the hidden-to-state convolution only.
pub fn convlstm_backward_gates(
    cache: &ConvLstmCache,
    w: &ConvLstmWeights,
    dh: &Tensor,
    dc: &Tensor,
) -> Result<GateGrads> {
    let shape = cache.c_prev.shape().to_vec();
    if dh.shape() != shape.as_slice() || dc.shape() != shape.as_slice() {
        return shape_err(format!(
            "dh {:?} / dc {:?} vs state {:?}",
            dh.shape(),
            dc.shape(),
            shape
        ));
    }
    let n = cache.c_prev.len();
    let gd = cache.gates.data();
    let (gi, gf, go, gg) = (&gd[..n], &gd[n..2 * n], &gd[2 * n..3 * n], &gd[3 * n..]);
    let tc = cache.tanh_c.data();
    let cp = cache.c_prev.data();
    let (dhd, dcd) = (dh.data(), dc.data());

    let mut pre = vec![0.0; 4 * n];
    let mut dc_prev = vec![0.0; n];
    for k in 0..n {
        let d_o = dhd[k] * tc[k];
        let dct = dcd[k] + dhd[k] * go[k] * (1.0 - tc[k] * tc[k]);
        dc_prev[k] = dct * gf[k];
        pre[k] = dct * gg[k] * gi[k] * (1.0 - gi[k]);
        pre[n + k] = dct * cp[k] * gf[k] * (1.0 - gf[k]);
        pre[2 * n + k] = d_o * go[k] * (1.0 - go[k]);
        pre[3 * n + k] = dct * gi[k] * (1.0 - gg[k] * gg[k]);
    }
    let mut pre_shape = shape.clone();
    pre_shape[0] *= 4;
    let pre = Tensor::from_vec(&pre_shape, pre)?;
    let hg = conv2d_backward(&cache.h_prev, &w.wh, 1, Padding::Same, &pre, true)?;
    Ok(GateGrads {
        pre,
        h_prev: hg.input.expect("input gradient requested"),
        c_prev: Tensor::from_vec(&shape, dc_prev)?,
        wh: hg.weight,
        bias: hg.bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_zero_state_stays_zero() {
        let w = ConvLstmWeights::zeros(3, 4, 3);
        let x = Tensor::from_fn(&[3, 5, 5], |i| i as f64 * 0.1);
        let s = convlstm_step(&x, &ConvLstmState::zeros(4, 5, 5), &w).unwrap();
        assert!(s.h.data().iter().all(|&v| v == 0.0));
        assert!(s.c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_halve_cell_state() {
        let w = ConvLstmWeights::zeros(2, 3, 3);
        let c0 = Tensor::from_fn(&[3, 4, 4], |i| (i as f64 - 20.0) * 0.3);
        let state = ConvLstmState {
            h: Tensor::from_fn(&[3, 4, 4], |i| (i as f64).sin()),
            c: c0.clone(),
        };
        let s = convlstm_step(&Tensor::filled(&[2, 4, 4], 1.0), &state, &w).unwrap();
        for k in 0..c0.len() {
            let c = c0.data()[k];
            assert!((s.c.data()[k] - 0.5 * c).abs() < 1e-12);
            assert!((s.h.data()[k] - 0.5 * (0.5 * c).tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_spatial_mismatch() {
        let w = ConvLstmWeights::zeros(2, 3, 3);
        let r = convlstm_step(&Tensor::zeros(&[2, 4, 5]), &ConvLstmState::zeros(3, 4, 4), &w);
        assert!(r.is_err());
        let r = convlstm_step(&Tensor::zeros(&[3, 4, 4]), &ConvLstmState::zeros(3, 4, 4), &w);
        assert!(r.is_err());
    }

    #[test]
    fn state_shape_is_invariant() {
        let mut w = ConvLstmWeights::zeros(2, 3, 3);
        w.wh.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64 * 0.7).sin() * 0.2);
        let mut s = ConvLstmState::zeros(3, 6, 6);
        for _ in 0..10 {
            s = convlstm_step(&Tensor::filled(&[2, 6, 6], 0.3), &s, &w).unwrap();
            assert_eq!(s.h.shape(), &[3, 6, 6]);
            assert_eq!(s.c.shape(), &[3, 6, 6]);
        }
    }
}
