use nn::{
    bilinear_up2, bilinear_up2_backward, concat_channels, maxpool2, maxpool2_backward, relu,
    relu_backward, split_channels, Tensor,
};
use polyrnn_nn as nn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::ConvLayer;
use super::ModelError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Convolutions in the stage; the first has stride 2.
    pub convs: usize,
    pub channels: usize,
}

/// Skip-connection CNN: each stage halves the resolution; every stage output
/// passes through its own 3×3 conv + ReLU, is pooled or upsampled to the
/// output grid, and the concatenation is fused by a final 3×3 conv + ReLU.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub stages: Vec<StageConfig>,
    pub skip_channels: usize,
    pub fuse_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_size: 224,
            in_channels: 3,
            stages: vec![
                StageConfig { convs: 1, channels: 8 },
                StageConfig { convs: 1, channels: 16 },
                StageConfig { convs: 2, channels: 32 },
                StageConfig { convs: 1, channels: 32 },
            ],
            skip_channels: 8,
            fuse_channels: 16,
        }
    }
}

/// How a stage output reaches the output grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Resize {
    Pool(u32),
    Up(u32),
}

impl EncoderConfig {
    /// Checks that the fused output lands on a `grid × grid` map, which fixes
    /// the overall downsampling factor at `input_size / grid`.
    pub fn validate(&self, grid: usize) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.stages.is_empty() || self.stages.iter().any(|s| s.convs == 0 || s.channels == 0) {
            return bad("every encoder stage needs at least one conv and one channel".into());
        }
        if self.input_size != 8 * grid {
            return bad(format!(
                "input size {} must be 8 × grid size {grid}",
                self.input_size
            ));
        }
        for i in 0..self.stages.len() {
            self.resize_for(i, grid)?;
        }
        Ok(())
    }

    fn stage_resolution(&self, i: usize) -> Option<usize> {
        let div = 1usize.checked_shl(i as u32 + 1)?;
        (self.input_size % div == 0).then(|| self.input_size / div)
    }

    fn resize_for(&self, i: usize, grid: usize) -> Result<Resize, ModelError> {
        let r = self
            .stage_resolution(i)
            .filter(|&r| r > 0)
            .ok_or_else(|| ModelError::Config(format!("stage {i} resolution is not integral")))?;
        let err = || ModelError::Config(format!("stage {i} at {r}px cannot be resized to {grid}"));
        if r >= grid {
            let f = r / grid;
            (r % grid == 0 && f.is_power_of_two())
                .then(|| Resize::Pool(f.trailing_zeros()))
                .ok_or_else(err)
        } else {
            let f = grid / r;
            (grid % r == 0 && f.is_power_of_two())
                .then(|| Resize::Up(f.trailing_zeros()))
                .ok_or_else(err)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub stages: Vec<Vec<ConvLayer>>,
    pub skips: Vec<ConvLayer>,
    pub fuse: ConvLayer,
    resizes: Vec<Resize>,
}

/// Activations kept for the backward pass.
pub struct EncoderCache {
    /// Input of every stage conv, in order, then the final stage output.
    acts: Vec<Vec<Tensor>>,
    skip_out: Vec<Tensor>,
    /// Inputs of every pooling step per stage.
    pool_inputs: Vec<Vec<Tensor>>,
    fuse_in: Tensor,
    out: Tensor,
}

impl Encoder {
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, grid: usize, rng: &mut R) -> Result<Self, ModelError> {
        Self::build(cfg, grid, &mut |c_in, c_out, k, s| {
            ConvLayer::init(c_in, c_out, k, s, 2f64.sqrt(), rng)
        })
    }

    pub fn zeros(cfg: &EncoderConfig, grid: usize) -> Result<Self, ModelError> {
        Self::build(cfg, grid, &mut ConvLayer::zeros)
    }

    fn build(
        cfg: &EncoderConfig,
        grid: usize,
        make: &mut dyn FnMut(usize, usize, usize, usize) -> ConvLayer,
    ) -> Result<Self, ModelError> {
        cfg.validate(grid)?;
        let mut c_in = cfg.in_channels;
        let mut stages = Vec::new();
        for st in &cfg.stages {
            let mut convs = Vec::new();
            for j in 0..st.convs {
                convs.push(make(c_in, st.channels, 3, if j == 0 { 2 } else { 1 }));
                c_in = st.channels;
            }
            stages.push(convs);
        }
        let skips = cfg
            .stages
            .iter()
            .map(|st| make(st.channels, cfg.skip_channels, 3, 1))
            .collect();
        let fuse = make(cfg.skip_channels * cfg.stages.len(), cfg.fuse_channels, 3, 1);
        let resizes = (0..cfg.stages.len())
            .map(|i| cfg.resize_for(i, grid))
            .collect::<Result<_, _>>()?;
        Ok(Encoder {
            stages,
            skips,
            fuse,
            resizes,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.fuse.c_out()
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Tensor) -> (Tensor, EncoderCache) {
        let mut cur = x.clone();
        let mut acts = Vec::with_capacity(self.stages.len());
        let mut skip_out = Vec::new();
        let mut pool_inputs = Vec::new();
        let mut resized = Vec::new();
        for (s, convs) in self.stages.iter().enumerate() {
            let mut stage_acts = Vec::with_capacity(convs.len() + 1);
            for conv in convs {
                let next = relu(&conv.forward(&cur));
                stage_acts.push(std::mem::replace(&mut cur, next));
            }
            stage_acts.push(cur.clone());
            acts.push(stage_acts);

            let z = relu(&self.skips[s].forward(&cur));
            let mut pools = Vec::new();
            let mut r = z.clone();
            match self.resizes[s] {
                Resize::Pool(n) => {
                    for _ in 0..n {
                        let next = maxpool2(&r).expect("validated resolution");
                        pools.push(std::mem::replace(&mut r, next));
                    }
                }
                Resize::Up(n) => {
                    for _ in 0..n {
                        r = bilinear_up2(&r).expect("validated resolution");
                    }
                }
            }
            skip_out.push(z);
            pool_inputs.push(pools);
            resized.push(r);
        }
        let refs: Vec<&Tensor> = resized.iter().collect();
        let fuse_in = concat_channels(&refs).expect("all skips on the output grid");
        let out = relu(&self.fuse.forward(&fuse_in));
        let cache = EncoderCache {
            acts,
            skip_out,
            pool_inputs,
            fuse_in,
            out: out.clone(),
        };
        (out, cache)
    }

    /// Accumulates parameter gradients for `dL/d output` into `grads`.
    pub fn backward(&self, cache: &EncoderCache, grad_out: &Tensor, grads: &mut Encoder) {
        let g = relu_backward(&cache.out, grad_out).expect("same shape");
        let g_fuse_in = self
            .fuse
            .backward(&cache.fuse_in, &g, true, &mut grads.fuse)
            .expect("requested");
        let split: Vec<usize> = self.skips.iter().map(|s| s.c_out()).collect();
        let g_skips = split_channels(&g_fuse_in, &split).expect("matching channels");

        let mut g_stage_out: Vec<Tensor> = Vec::with_capacity(self.stages.len());
        for (s, mut gr) in g_skips.into_iter().enumerate() {
            match self.resizes[s] {
                Resize::Pool(_) => {
                    for inp in cache.pool_inputs[s].iter().rev() {
                        gr = maxpool2_backward(inp, &gr).expect("same shape");
                    }
                }
                Resize::Up(n) => {
                    for _ in 0..n {
                        gr = bilinear_up2_backward(&gr).expect("even dims");
                    }
                }
            }
            let gz = relu_backward(&cache.skip_out[s], &gr).expect("same shape");
            let stage_out = cache.acts[s].last().expect("stage output stored");
            g_stage_out.push(
                self.skips[s]
                    .backward(stage_out, &gz, true, &mut grads.skips[s])
                    .expect("requested"),
            );
        }

        let mut carry: Option<Tensor> = None;
        for s in (0..self.stages.len()).rev() {
            let mut g = g_stage_out[s].clone();
            if let Some(c) = carry.take() {
                g.add_assign(&c).expect("same shape");
            }
            let acts = &cache.acts[s];
            for (j, conv) in self.stages[s].iter().enumerate().rev() {
                let gpre = relu_backward(&acts[j + 1], &g).expect("same shape");
                let want = !(s == 0 && j == 0);
                match conv.backward(&acts[j], &gpre, want, &mut grads.stages[s][j]) {
                    Some(gi) => g = gi,
                    None => break,
                }
            }
            if s > 0 {
                carry = Some(g);
            }
        }
    }

    pub(crate) fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (s, convs) in self.stages.iter().enumerate() {
            for (j, c) in convs.iter().enumerate() {
                c.push_named(&format!("{prefix}.stage{s}.conv{j}"), out);
            }
        }
        for (s, c) in self.skips.iter().enumerate() {
            c.push_named(&format!("{prefix}.skip{s}"), out);
        }
        self.fuse.push_named(&format!("{prefix}.fuse"), out);
    }

    pub(crate) fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for convs in &mut self.stages {
            for c in convs {
                c.push_mut(out);
            }
        }
        for c in &mut self.skips {
            c.push_mut(out);
        }
        self.fuse.push_mut(out);
    }
}
