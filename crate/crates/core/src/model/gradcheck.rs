//! Finite-difference checks of the full networks on the tiny configuration.
//! Each case samples a few coordinates of every parameter tensor and
//! compares central differences with the analytic gradient.

use nn::gradcheck::suite::Rng;
use nn::{grad_check, Tensor};
use polyrnn_nn as nn;

use super::params::Params;
use super::{ModelConfig, Models};
use crate::gridcode::GridToken;

pub const STEP: f64 = 1e-4;

/// Coordinates sampled per tensor.
const PER_TENSOR: usize = 6;

fn random_instance(rng: &mut Rng, cfg: &ModelConfig) -> (Tensor, Vec<GridToken>) {
    let s = cfg.grid.canonical_size;
    let d = cfg.grid.grid_size;
    let crop = rng.tensor(&[3, s, s], 0.5);
    let mut cells: Vec<GridToken> = Vec::new();
    while cells.len() < 3 {
        let (r, c) = (rng.below(d), rng.below(d));
        let t = GridToken::cell(r, c);
        if !cells.contains(&t) {
            cells.push(t);
        }
    }
    cells.push(GridToken::Eos);
    (crop, cells)
}

/// Result of one sampled check.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CheckReport {
    pub max_rel_err: f64,
    /// Coordinates compared against finite differences.
    pub checked: usize,
    /// Candidates skipped because a ReLU or max-pool switch lies within the
    /// difference stencil.
    pub kinks: usize,
    /// Candidates skipped because both the analytic and the numeric
    /// derivative are below what a central difference can resolve.
    pub unresolved: usize,
}

/// Central differences with steps `h` and `h/2` agree to `O(h²)` on smooth
/// stretches; a large disagreement means the stencil straddles a kink, where
/// neither estimate says anything about the derivative.
fn straddles_kink(f: &mut impl FnMut(f64) -> f64, x: f64) -> (bool, f64) {
    let wide = (f(x + STEP) - f(x - STEP)) / (2.0 * STEP);
    let narrow = (f(x + STEP / 2.0) - f(x - STEP / 2.0)) / STEP;
    let kink = (wide - narrow).abs() > 1e-5 * wide.abs().max(narrow.abs()).max(1e-8);
    (kink, wide)
}

/// Smallest derivative a central difference measures to 1e-4 relative
/// accuracy when the loss itself is only known to about one ulp.
fn resolution(loss: f64) -> f64 {
    1e4 * loss.abs().max(1.0) * f64::EPSILON / STEP
}

/// Max relative error over sampled smooth coordinates of `params`.
fn check_params<P: Params>(
    rng: &mut Rng,
    params: &P,
    analytic: &P,
    loss: impl Fn(&P) -> f64,
) -> CheckReport {
    let named = params.named();
    let grads = analytic.named();
    let mut report = CheckReport::default();
    let floor = resolution(loss(params));
    for (ti, ((_, t), (_, g))) in named.iter().zip(&grads).enumerate() {
        let eval = |picks: &[usize], vals: &[f64]| {
            let mut p = params.clone();
            let dst = p.tensors_mut().swap_remove(ti);
            for (&i, &v) in picks.iter().zip(vals) {
                dst.data_mut()[i] = v;
            }
            loss(&p)
        };
        let want = PER_TENSOR.min(t.len());
        let mut picks: Vec<usize> = Vec::new();
        let mut tried: Vec<usize> = Vec::new();
        while picks.len() < want && tried.len() < 4 * want && tried.len() < t.len() {
            let i = rng.below(t.len());
            if tried.contains(&i) {
                continue;
            }
            tried.push(i);
            let mut f = |v: f64| eval(&[i], &[v]);
            let (kink, numeric) = straddles_kink(&mut f, t.data()[i]);
            if kink {
                report.kinks += 1;
            } else if numeric.abs() < floor && g.data()[i].abs() < floor {
                report.unresolved += 1;
            } else {
                picks.push(i);
            }
        }
        let mut x: Vec<f64> = picks.iter().map(|&i| t.data()[i]).collect();
        let a: Vec<f64> = picks.iter().map(|&i| g.data()[i]).collect();
        let err = grad_check(|vals| eval(&picks, vals), &mut x, &a, STEP);
        report.max_rel_err = report.max_rel_err.max(err);
        report.checked += picks.len();
    }
    report
}

/// Decoder teacher-forced loss over two steps, all decoder and encoder
/// parameters.
pub fn end_to_end_case(seed: u64) -> CheckReport {
    let cfg = ModelConfig::tiny();
    let mut rng = Rng::new(seed);
    let models = Models::init(&cfg, seed).expect("tiny config is valid");
    let mut rnn = models.rnn;
    // Random dense head so every path carries gradient.
    for v in rnn.head_fc.weight.data_mut() {
        *v += rng.uniform(-0.1, 0.1);
    }
    let (crop, target) = random_instance(&mut rng, &cfg);
    let (_, grads) = rnn
        .teacher_forced(&crop, &target, Some(2), true)
        .expect("valid target");
    let grads = grads.expect("requested");
    check_params(&mut rng, &rnn, &grads, |p| {
        p.teacher_forced(&crop, &target, Some(2), false)
            .expect("valid target")
            .0
    })
}

/// First-vertex multi-task loss, all parameters.
pub fn first_vertex_case(seed: u64) -> CheckReport {
    let cfg = ModelConfig::tiny();
    let mut rng = Rng::new(seed ^ 0xf1);
    let models = Models::init(&cfg, seed).expect("tiny config is valid");
    let fv = models.first_vertex;
    let (crop, target) = random_instance(&mut rng, &cfg);
    let cells = &target[..target.len() - 1];
    let (_, grads) = fv.loss(&crop, cells, true);
    check_params(&mut rng, &fv, &grads.expect("requested"), |p| p.loss(&crop, cells, false).0)
}

/// `mean(encoder output)` against every encoder weight.
pub fn encoder_case(seed: u64) -> CheckReport {
    let cfg = ModelConfig::tiny();
    let mut rng = Rng::new(seed ^ 0xe4c);
    let models = Models::init(&cfg, seed).expect("tiny config is valid");
    let rnn = models.rnn;
    let (crop, _) = random_instance(&mut rng, &cfg);
    let (out, cache) = rnn.encoder.forward_cached(&crop);
    let n = out.len() as f64;
    let mut grads = rnn.zeros_like();
    rnn.encoder
        .backward(&cache, &Tensor::filled(out.shape(), 1.0 / n), &mut grads.encoder);
    check_params(&mut rng, &rnn, &grads, |p| p.encoder.forward(&crop).sum() / n)
}
