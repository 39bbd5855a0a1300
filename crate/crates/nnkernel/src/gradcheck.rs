//! Central finite-difference gradient checking.

/// Compares `analytic` against central differences of `f` at `x` and returns
/// the largest relative error, using `max(|a|, |b|, 1e-8)` as denominator.
///
/// `f` is evaluated `2·x.len()` times; `x` is restored before returning.
pub fn grad_check(mut f: impl FnMut(&[f64]) -> f64, x: &mut [f64], analytic: &[f64], h: f64) -> f64 {
    assert_eq!(x.len(), analytic.len(), "gradient length");
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(x);
        x[i] = orig - h;
        let fm = f(x);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let coeffs = [0.5, -2.0, 3.25, 1.0];
        let f = |x: &[f64]| x.iter().zip(&coeffs).map(|(a, b)| a * b).sum::<f64>();
        let mut x = vec![0.1, 0.2, -0.3, 4.0];
        let err = grad_check(f, &mut x, &coeffs, 1e-4);
        assert!(err < 1e-10, "{err}");
        assert_eq!(x, vec![0.1, 0.2, -0.3, 4.0]);
    }

    #[test]
    fn detects_wrong_gradient() {
        let f = |x: &[f64]| x[0] * x[0];
        let mut x = vec![1.5];
        assert!(grad_check(f, &mut x, &[2.0], 1e-4) > 0.1);
    }
}

/// Randomized finite-difference checks of every differentiable operation in
/// this crate. Each entry is `(operation, max relative error)`.
pub mod suite {
    use super::grad_check;
    use crate::activation::{relu, relu_backward, sigmoid, sigmoid_backward, tanh, tanh_backward};
    use crate::conv::{conv2d, conv2d_backward, Padding};
    use crate::convlstm::{convlstm_backward, convlstm_forward, ConvLstmState, ConvLstmWeights};
    use crate::loss::{logistic_loss, softmax_ce};
    use crate::resize::{
        bilinear_up2, bilinear_up2_backward, concat_channels, maxpool2, maxpool2_backward,
        split_channels,
    };
    use crate::tensor::Tensor;

    pub const STEP: f64 = 1e-4;

    /// SplitMix64; enough randomness for test fixtures without pulling in a
    /// dependency.
    pub struct Rng(u64);

    impl Rng {
        pub fn new(seed: u64) -> Self {
            Rng(seed ^ 0x9E37_79B9_7F4A_7C15)
        }

        pub fn next_u64(&mut self) -> u64 {
            self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = self.0;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^ (z >> 31)
        }

        /// Uniform in [lo, hi).
        pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
            lo + (hi - lo) * ((self.next_u64() >> 11) as f64 / (1u64 << 53) as f64)
        }

        pub fn below(&mut self, n: usize) -> usize {
            (self.next_u64() % n as u64) as usize
        }

        pub fn tensor(&mut self, shape: &[usize], scale: f64) -> Tensor {
            Tensor::from_fn(shape, |_| self.uniform(-scale, scale))
        }
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    /// Checks `d/dx <r, op(x)>` for a unary op with a known backward.
    fn unary(
        x: &Tensor,
        r: &Tensor,
        fwd: impl Fn(&Tensor) -> Tensor,
        bwd: impl Fn(&Tensor, &Tensor) -> Tensor,
    ) -> f64 {
        let analytic = bwd(x, r);
        let mut xv = x.data().to_vec();
        let shape = x.shape().to_vec();
        grad_check(
            |v| dot(&fwd(&Tensor::from_vec(&shape, v.to_vec()).unwrap()), r),
            &mut xv,
            analytic.data(),
            STEP,
        )
    }

    pub fn conv2d_case(rng: &mut Rng) -> f64 {
        let c_in = 1 + rng.below(3);
        let c_out = 1 + rng.below(3);
        let (h, w) = (4 + rng.below(3), 4 + rng.below(3));
        let stride = 1 + rng.below(2);
        let pad = if rng.below(2) == 0 { Padding::Same } else { Padding::Valid };
        let k = if rng.below(4) == 0 { 1 } else { 3 };
        let x = rng.tensor(&[c_in, h, w], 1.0);
        let kern = rng.tensor(&[c_out, c_in, k, k], 1.0);
        let b = rng.tensor(&[c_out], 1.0);
        let y = conv2d(&x, &kern, Some(&b), stride, pad).unwrap();
        let r = rng.tensor(y.shape(), 1.0);
        let g = conv2d_backward(&x, &kern, stride, pad, &r, true).unwrap();
        let loss = |x: &Tensor, k: &Tensor, b: &Tensor| dot(&conv2d(x, k, Some(b), stride, pad).unwrap(), &r);

        let mut worst: f64 = 0.0;
        let mut v = x.data().to_vec();
        worst = worst.max(grad_check(
            |v| loss(&Tensor::from_vec(x.shape(), v.to_vec()).unwrap(), &kern, &b),
            &mut v,
            g.input.as_ref().unwrap().data(),
            STEP,
        ));
        let mut v = kern.data().to_vec();
        worst = worst.max(grad_check(
            |v| loss(&x, &Tensor::from_vec(kern.shape(), v.to_vec()).unwrap(), &b),
            &mut v,
            g.weight.data(),
            STEP,
        ));
        let mut v = b.data().to_vec();
        worst.max(grad_check(
            |v| loss(&x, &kern, &Tensor::from_vec(b.shape(), v.to_vec()).unwrap()),
            &mut v,
            g.bias.data(),
            STEP,
        ))
    }

    pub fn maxpool2_case(rng: &mut Rng) -> f64 {
        let (c, h, w) = (1 + rng.below(2), 2 * (1 + rng.below(3)), 2 * (1 + rng.below(3)));
        // Distinct values spaced far wider than the difference step, so no
        // perturbation can swap a window's maximum.
        let n = c * h * w;
        let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
        for i in (1..n).rev() {
            vals.swap(i, rng.below(i + 1));
        }
        let x = Tensor::from_vec(&[c, h, w], vals).unwrap();
        let r = rng.tensor(&[c, h / 2, w / 2], 1.0);
        unary(&x, &r, |x| maxpool2(x).unwrap(), |x, r| maxpool2_backward(x, r).unwrap())
    }

    pub fn bilinear_case(rng: &mut Rng) -> f64 {
        let shape = [1 + rng.below(2), 1 + rng.below(4), 1 + rng.below(4)];
        let x = rng.tensor(&shape, 1.0);
        let y = bilinear_up2(&x).unwrap();
        let r = rng.tensor(y.shape(), 1.0);
        unary(&x, &r, |x| bilinear_up2(x).unwrap(), |_, r| bilinear_up2_backward(r).unwrap())
    }

    pub fn activation_cases(rng: &mut Rng) -> [(&'static str, f64); 3] {
        let shape = [2, 3, 3];
        // Keep ReLU inputs away from the kink.
        let x = Tensor::from_fn(&shape, |_| {
            let m = rng.uniform(0.05, 1.0);
            if rng.below(2) == 0 { m } else { -m }
        });
        let r = rng.tensor(&shape, 1.0);
        let relu_err = unary(&x, &r, relu, |x, r| relu_backward(x, r).unwrap());
        let x = rng.tensor(&shape, 3.0);
        let sig_err = unary(&x, &r, sigmoid, |x, r| sigmoid_backward(&sigmoid(x), r).unwrap());
        let tanh_err = unary(&x, &r, tanh, |x, r| tanh_backward(&tanh(x), r).unwrap());
        [("relu", relu_err), ("sigmoid", sig_err), ("tanh", tanh_err)]
    }

    pub fn concat_case(rng: &mut Rng) -> f64 {
        let (h, w) = (1 + rng.below(3), 1 + rng.below(3));
        let (ca, cb) = (1 + rng.below(3), 1 + rng.below(3));
        let a = rng.tensor(&[ca, h, w], 1.0);
        let b = rng.tensor(&[cb, h, w], 1.0);
        let y = concat_channels(&[&a, &b]).unwrap();
        let r = rng.tensor(y.shape(), 1.0);
        let parts = split_channels(&r, &[a.shape()[0], b.shape()[0]]).unwrap();
        let mut worst: f64 = 0.0;
        let mut v = a.data().to_vec();
        worst = worst.max(grad_check(
            |v| dot(&concat_channels(&[&Tensor::from_vec(a.shape(), v.to_vec()).unwrap(), &b]).unwrap(), &r),
            &mut v,
            parts[0].data(),
            STEP,
        ));
        let mut v = b.data().to_vec();
        worst.max(grad_check(
            |v| dot(&concat_channels(&[&a, &Tensor::from_vec(b.shape(), v.to_vec()).unwrap()]).unwrap(), &r),
            &mut v,
            parts[1].data(),
            STEP,
        ))
    }

    /// Scalar loss `<rh, h'> + <rc, c'>` through one ConvLSTM step, checked
    /// against every input and weight.
    pub fn convlstm_case(rng: &mut Rng) -> f64 {
        let (cin, hid, h, w) = (1 + rng.below(3), 1 + rng.below(3), 3 + rng.below(2), 3 + rng.below(2));
        let x = rng.tensor(&[cin, h, w], 1.0);
        let st = ConvLstmState {
            h: rng.tensor(&[hid, h, w], 1.0),
            c: rng.tensor(&[hid, h, w], 1.0),
        };
        let wt = ConvLstmWeights {
            wx: rng.tensor(&[4 * hid, cin, 3, 3], 0.5),
            wh: rng.tensor(&[4 * hid, hid, 3, 3], 0.5),
            bias: rng.tensor(&[4 * hid], 0.5),
        };
        let rh = rng.tensor(&[hid, h, w], 1.0);
        let rc = rng.tensor(&[hid, h, w], 1.0);
        let (_, cache) = convlstm_forward(&x, &st, &wt).unwrap();
        let g = convlstm_backward(&x, &cache, &wt, &rh, &rc).unwrap();
        let loss = |x: &Tensor, st: &ConvLstmState, wt: &ConvLstmWeights| {
            let (s, _) = convlstm_forward(x, st, wt).unwrap();
            dot(&s.h, &rh) + dot(&s.c, &rc)
        };
        let mut worst: f64 = 0.0;
        let re = |t: &Tensor, v: &[f64]| Tensor::from_vec(t.shape(), v.to_vec()).unwrap();

        let mut v = x.data().to_vec();
        worst = worst.max(grad_check(|v| loss(&re(&x, v), &st, &wt), &mut v, g.x.data(), STEP));
        let mut v = st.h.data().to_vec();
        worst = worst.max(grad_check(
            |v| loss(&x, &ConvLstmState { h: re(&st.h, v), c: st.c.clone() }, &wt),
            &mut v,
            g.h_prev.data(),
            STEP,
        ));
        let mut v = st.c.data().to_vec();
        worst = worst.max(grad_check(
            |v| loss(&x, &ConvLstmState { h: st.h.clone(), c: re(&st.c, v) }, &wt),
            &mut v,
            g.c_prev.data(),
            STEP,
        ));
        let mut v = wt.wx.data().to_vec();
        worst = worst.max(grad_check(
            |v| loss(&x, &st, &ConvLstmWeights { wx: re(&wt.wx, v), ..wt.clone() }),
            &mut v,
            g.wx.data(),
            STEP,
        ));
        let mut v = wt.wh.data().to_vec();
        worst = worst.max(grad_check(
            |v| loss(&x, &st, &ConvLstmWeights { wh: re(&wt.wh, v), ..wt.clone() }),
            &mut v,
            g.wh.data(),
            STEP,
        ));
        let mut v = wt.bias.data().to_vec();
        worst.max(grad_check(
            |v| loss(&x, &st, &ConvLstmWeights { bias: re(&wt.bias, v), ..wt.clone() }),
            &mut v,
            g.bias.data(),
            STEP,
        ))
    }

    pub fn softmax_ce_case(rng: &mut Rng) -> f64 {
        let n = 2 + rng.below(30);
        let logits: Vec<f64> = (0..n).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let mut target: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 1.0)).collect();
        let s: f64 = target.iter().sum();
        target.iter_mut().for_each(|t| *t /= s);
        let (_, grad) = softmax_ce(&logits, &target).unwrap();
        let mut v = logits.clone();
        grad_check(|v| softmax_ce(v, &target).unwrap().0, &mut v, &grad, STEP)
    }

    pub fn logistic_case(rng: &mut Rng) -> f64 {
        let n = 1 + rng.below(30);
        let logits: Vec<f64> = (0..n).map(|_| rng.uniform(-4.0, 4.0)).collect();
        let targets: Vec<f64> = (0..n).map(|_| rng.below(2) as f64).collect();
        let (_, grad) = logistic_loss(&logits, &targets).unwrap();
        let mut v = logits.clone();
        grad_check(|v| logistic_loss(v, &targets).unwrap().0, &mut v, &grad, STEP)
    }

    /// Runs every op once with randomness drawn from `seed`.
    pub fn run(seed: u64) -> Vec<(&'static str, f64)> {
        let mut rng = Rng::new(seed);
        let mut out = vec![
            ("conv2d", conv2d_case(&mut rng)),
            ("maxpool2", maxpool2_case(&mut rng)),
            ("bilinear_up2", bilinear_case(&mut rng)),
            ("concat_channels", concat_case(&mut rng)),
            ("convlstm_step", convlstm_case(&mut rng)),
            ("softmax_ce", softmax_ce_case(&mut rng)),
            ("logistic_loss", logistic_case(&mut rng)),
        ];
        out.extend(activation_cases(&mut rng));
        out
    }
}
