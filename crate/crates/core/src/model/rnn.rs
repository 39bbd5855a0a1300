use nn::{
    conv2d, conv2d_backward, convlstm_backward, convlstm_backward_gates, convlstm_forward,
    convlstm_forward_with_input_term, softmax_ce, ConvLstmCache, ConvLstmState, ConvLstmWeights,
    Padding, Tensor,
};
use polyrnn_nn as nn;
use rand::Rng;

use super::encoder::{Encoder, EncoderCache};
use super::params::{lstm_init, lstm_push_mut, lstm_push_named, ConvLayer, Linear, Params};
use super::{ModelConfig, ModelError};
use crate::gridcode::{smoothed_target, GridToken};

/// Number of one-hot history planes fed to the first decoder layer:
/// `y_{t-1}`, `y_{t-2}` and `y_1`.
pub const HISTORY_PLANES: usize = 3;

/// The vertex decoder: its own encoder, a two-layer ConvLSTM and a vertex
/// head (conv, then a dense map to `D² + 1` logits).
#[derive(Clone, Debug, PartialEq)]
pub struct PolygonRnn {
    pub config: ModelConfig,
    pub encoder: Encoder,
    /// Input channels are the encoder features followed by the history planes.
    pub lstm1: ConvLstmWeights,
    pub lstm2: ConvLstmWeights,
    pub head_conv: ConvLayer,
    pub head_fc: Linear,
}

/// History planes for one decoder step, as `(row, col)` cells.
pub type Planes = [Option<(usize, usize)>; HISTORY_PLANES];

/// Per-sequence constants: the encoder features pushed through the feature
/// part of the first layer's input kernel, and the plane kernels.
pub struct DecoderContext {
    pub(crate) features: Tensor,
    pub(crate) feature_term: Tensor,
    wx_feat: Tensor,
    /// `[plane][4H][k][k]`
    plane_kernels: Vec<Vec<f64>>,
}

pub struct StepCache {
    planes: Planes,
    cache1: ConvLstmCache,
    h1: Tensor,
    cache2: ConvLstmCache,
    h2: Tensor,
    head_out: Tensor,
}

/// Recurrent state of both layers.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub l1: ConvLstmState,
    pub l2: ConvLstmState,
}

impl PolygonRnn {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.grid.grid_size;
        let encoder = Encoder::init(&config.encoder, d, rng)?;
        let c_in = encoder.out_channels() + HISTORY_PLANES;
        let h = config.hidden;
        let lstm1 = lstm_init(c_in, h, config.lstm_kernel, 1.0, rng);
        let lstm2 = lstm_init(h, h, config.lstm_kernel, 1.0, rng);
        let head_conv = ConvLayer::init(h, config.head_channels, config.head_kernel, 1, 1.0, rng);
        let mut head_fc = Linear::zeros(config.head_channels * d * d, d * d + 1);
        // Start as "logit of cell j = head channel 0 at j"; the dense map then
        // only has to learn corrections.
        let n_in = head_fc.n_in();
        let w = head_fc.weight.data_mut();
        for j in 0..d * d {
            w[j * n_in + j] = 1.0;
        }
        Ok(PolygonRnn {
            config: config.clone(),
            encoder,
            lstm1,
            lstm2,
            head_conv,
            head_fc,
        })
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.grid.grid_size;
        let encoder = Encoder::zeros(&config.encoder, d)?;
        let h = config.hidden;
        Ok(PolygonRnn {
            config: config.clone(),
            lstm1: ConvLstmWeights::zeros(encoder.out_channels() + HISTORY_PLANES, h, config.lstm_kernel),
            lstm2: ConvLstmWeights::zeros(h, h, config.lstm_kernel),
            head_conv: ConvLayer::zeros(h, config.head_channels, config.head_kernel, 1),
            head_fc: Linear::zeros(config.head_channels * d * d, d * d + 1),
            encoder,
        })
    }

    fn feature_channels(&self) -> usize {
        self.encoder.out_channels()
    }

    /// Runs the encoder and precomputes the per-sequence input term.
    pub fn context(&self, crop: &Tensor) -> DecoderContext {
        self.context_cached(crop).0
    }

    fn context_cached(&self, crop: &Tensor) -> (DecoderContext, EncoderCache) {
        let (features, cache) = self.encoder.forward_cached(crop);
        let c = self.feature_channels();
        let c_in = c + HISTORY_PLANES;
        let k = self.config.lstm_kernel;
        let kk = k * k;
        let g4 = 4 * self.config.hidden;
        let wx = self.lstm1.wx.data();
        let mut feat = Vec::with_capacity(g4 * c * kk);
        let mut planes = vec![Vec::with_capacity(g4 * kk); HISTORY_PLANES];
        for o in 0..g4 {
            let base = o * c_in * kk;
            feat.extend_from_slice(&wx[base..base + c * kk]);
            for (p, pk) in planes.iter_mut().enumerate() {
                let off = base + (c + p) * kk;
                pk.extend_from_slice(&wx[off..off + kk]);
            }
        }
        let wx_feat = Tensor::from_vec(&[g4, c, k, k], feat).expect("sizes computed above");
        let feature_term =
            conv2d(&features, &wx_feat, None, 1, Padding::Same).expect("validated shapes");
        (
            DecoderContext {
                features,
                feature_term,
                wx_feat,
                plane_kernels: planes,
            },
            cache,
        )
    }

    pub fn initial_state(&self) -> DecoderState {
        let (h, d) = (self.config.hidden, self.config.grid.grid_size);
        DecoderState {
            l1: ConvLstmState::zeros(h, d, d),
            l2: ConvLstmState::zeros(h, d, d),
        }
    }

    /// One decoder step: returns the `D² + 1` logits (no masking), the new
    /// state and the cache for backpropagation.
    pub fn step(
        &self,
        ctx: &DecoderContext,
        planes: Planes,
        state: &DecoderState,
    ) -> (Vec<f64>, DecoderState, StepCache) {
        let d = self.config.grid.grid_size;
        let k = self.config.lstm_kernel;
        let pad = k / 2;
        let g4 = 4 * self.config.hidden;
        let mut term = ctx.feature_term.clone();
        {
            let t = term.data_mut();
            for (p, cell) in planes.iter().enumerate() {
                let Some((r, c)) = *cell else { continue };
                let pk = &ctx.plane_kernels[p];
                for_each_tap(r, c, d, k, pad, |i, j, y, x| {
                    for o in 0..g4 {
                        t[(o * d + y) * d + x] += pk[(o * k + i) * k + j];
                    }
                });
            }
        }
        let (l1, cache1) = convlstm_forward_with_input_term(&term, &state.l1, &self.lstm1)
            .expect("validated shapes");
        let (l2, cache2) = convlstm_forward(&l1.h, &state.l2, &self.lstm2).expect("validated shapes");
        let head_out = self.head_conv.forward(&l2.h);
        let logits = self.head_fc.forward(head_out.data());
        let cache = StepCache {
            planes,
            cache1,
            h1: l1.h.clone(),
            cache2,
            h2: l2.h.clone(),
            head_out,
        };
        (logits, DecoderState { l1, l2 }, cache)
    }

    /// Teacher-forced loss over the first `n_steps` decoder steps (all of
    /// them when `None`), with gradients when `want_grads` is set.
    ///
    /// `target` is `g_1 … g_L, EOS`. Step `t` (from 2) sees the ground-truth
    /// `g_{t-1}`, `g_{t-2}` (absent at t = 2) and `g_1`, and is scored with
    /// smoothed cross-entropy against `g_t`. The loss is the mean over steps.
    pub fn teacher_forced(
        &self,
        crop: &Tensor,
        target: &[GridToken],
        n_steps: Option<usize>,
        want_grads: bool,
    ) -> Result<(f64, Option<PolygonRnn>), ModelError> {
        let cells: Vec<(usize, usize)> = target.iter().map_while(|t| t.row_col()).collect();
        if cells.len() < 3 || target.len() != cells.len() + 1 || !target[cells.len()].is_eos() {
            return Err(ModelError::BadTarget(target.len()));
        }
        let total = n_steps.unwrap_or(cells.len()).min(cells.len());
        if total == 0 {
            return Err(ModelError::BadTarget(0));
        }
        let grid = &self.config.grid;
        let (ctx, enc_cache) = self.context_cached(crop);
        let mut state = self.initial_state();
        let mut loss = 0.0;
        let mut caches = Vec::with_capacity(total);
        let mut dlogits = Vec::with_capacity(total);
        for s in 0..total {
            // Predicting target[s + 1] from target[..=s].
            let planes = [Some(cells[s]), s.checked_sub(1).map(|i| cells[i]), Some(cells[0])];
            let (logits, next, cache) = self.step(&ctx, planes, &state);
            let (l, g) = softmax_ce(&logits, &smoothed_target(target[s + 1], grid))
                .expect("finite logits");
            loss += l;
            state = next;
            if want_grads {
                caches.push(cache);
                dlogits.push(g);
            }
        }
        let n = total as f64;
        loss /= n;
        if !want_grads {
            return Ok((loss, None));
        }

        let mut grads = self.zeros_like();
        let shape = state.l1.h.shape().to_vec();
        let mut dh1 = Tensor::zeros(&shape);
        let mut dc1 = Tensor::zeros(&shape);
        let mut dh2 = Tensor::zeros(&shape);
        let mut dc2 = Tensor::zeros(&shape);
        let mut pre_sum = Tensor::zeros(ctx.feature_term.shape());
        let d = grid.grid_size;
        let k = self.config.lstm_kernel;
        let pad = k / 2;
        let g4 = 4 * self.config.hidden;
        let c_feat = self.feature_channels();
        let c_in = c_feat + HISTORY_PLANES;
        for (cache, mut g) in caches.iter().zip(dlogits).rev() {
            g.iter_mut().for_each(|v| *v /= n);
            let dx = self.head_fc.backward(cache.head_out.data(), &g, &mut grads.head_fc);
            let dx = Tensor::from_vec(cache.head_out.shape(), dx).expect("same length");
            let mut dh = self
                .head_conv
                .backward(&cache.h2, &dx, true, &mut grads.head_conv)
                .expect("requested");
            dh.add_assign(&dh2).expect("same shape");
            let l2 = convlstm_backward(&cache.h1, &cache.cache2, &self.lstm2, &dh, &dc2)
                .expect("validated shapes");
            grads.lstm2.wx.add_assign(&l2.wx).expect("same shape");
            grads.lstm2.wh.add_assign(&l2.wh).expect("same shape");
            grads.lstm2.bias.add_assign(&l2.bias).expect("same shape");
            dh2 = l2.h_prev;
            dc2 = l2.c_prev;

            let mut dh = l2.x;
            dh.add_assign(&dh1).expect("same shape");
            let l1 = convlstm_backward_gates(&cache.cache1, &self.lstm1, &dh, &dc1)
                .expect("validated shapes");
            grads.lstm1.wh.add_assign(&l1.wh).expect("same shape");
            grads.lstm1.bias.add_assign(&l1.bias).expect("same shape");
            dh1 = l1.h_prev;
            dc1 = l1.c_prev;

            let pre = l1.pre.data();
            let gwx = grads.lstm1.wx.data_mut();
            for (p, cell) in cache.planes.iter().enumerate() {
                let Some((r, c)) = *cell else { continue };
                for_each_tap(r, c, d, k, pad, |i, j, y, x| {
                    for o in 0..g4 {
                        gwx[((o * c_in + c_feat + p) * k + i) * k + j] += pre[(o * d + y) * d + x];
                    }
                });
            }
            pre_sum.add_assign(&l1.pre).expect("same shape");
        }
        let fg = conv2d_backward(&ctx.features, &ctx.wx_feat, 1, Padding::Same, &pre_sum, true)
            .expect("validated shapes");
        let kk = k * k;
        let gwx = grads.lstm1.wx.data_mut();
        let fw = fg.weight.data();
        for o in 0..g4 {
            let dst = o * c_in * kk;
            for (a, b) in gwx[dst..dst + c_feat * kk]
                .iter_mut()
                .zip(&fw[o * c_feat * kk..(o + 1) * c_feat * kk])
            {
                *a += b;
            }
        }
        let dfeat = fg.input.expect("requested");
        self.encoder.backward(&enc_cache, &dfeat, &mut grads.encoder);
        Ok((loss, Some(grads)))
    }
}

/// Visits every kernel tap `(i, j)` whose output position `(y, x)` receives
/// the one-hot input at `(r, c)` under "same" padding.
fn for_each_tap(
    r: usize,
    c: usize,
    d: usize,
    k: usize,
    pad: usize,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    for i in 0..k {
        let Some(y) = (r + pad).checked_sub(i).filter(|&y| y < d) else {
            continue;
        };
        for j in 0..k {
            let Some(x) = (c + pad).checked_sub(j).filter(|&x| x < d) else {
                continue;
            };
            f(i, j, y, x);
        }
    }
}

impl Params for PolygonRnn {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.encoder.push_named("rnn.encoder", &mut out);
        lstm_push_named(&self.lstm1, "rnn.lstm1", &mut out);
        lstm_push_named(&self.lstm2, "rnn.lstm2", &mut out);
        self.head_conv.push_named("rnn.head_conv", &mut out);
        self.head_fc.push_named("rnn.head_fc", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.encoder.push_mut(&mut out);
        lstm_push_mut(&mut self.lstm1, &mut out);
        lstm_push_mut(&mut self.lstm2, &mut out);
        self.head_conv.push_mut(&mut out);
        self.head_fc.push_mut(&mut out);
        out
    }
}
