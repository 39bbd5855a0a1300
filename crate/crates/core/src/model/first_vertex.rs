use nn::{concat_channels, logistic_loss, relu, relu_backward, split_channels, Tensor};
use polyrnn_nn as nn;
use rand::Rng;

use super::encoder::Encoder;
use super::params::{ConvLayer, Params};
use super::{ModelConfig, ModelError};
use crate::gridcode::{boundary_vertex_maps, GridToken};

/// First-vertex predictor: a separate encoder with two heads. The boundary
/// head scores every grid cell as "on the outline"; the vertex head sees the
/// image features together with the boundary logits.
#[derive(Clone, Debug, PartialEq)]
pub struct FirstVertexNet {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub boundary: [ConvLayer; 2],
    pub vertex: [ConvLayer; 2],
}

/// Output of [`FirstVertexNet::forward`], both `D × D` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FirstVertexOutput {
    pub boundary_logits: Vec<f64>,
    pub vertex_logits: Vec<f64>,
}

impl FirstVertexOutput {
    /// Highest-scoring vertex cell; ties go to the first cell in row-major
    /// order.
    pub fn chosen(&self, grid_size: usize) -> GridToken {
        let i = argmax(&self.vertex_logits);
        GridToken::cell(i / grid_size, i % grid_size)
    }
}

/// Index of the first maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

impl FirstVertexNet {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let encoder = Encoder::init(&config.encoder, config.grid.grid_size, rng)?;
        let c = encoder.out_channels();
        let m = config.first_vertex_channels;
        let g = 2f64.sqrt();
        Ok(FirstVertexNet {
            config: config.clone(),
            boundary: [
                ConvLayer::init(c, m, 3, 1, g, rng),
                ConvLayer::init(m, 1, 1, 1, 1.0, rng),
            ],
            vertex: [
                ConvLayer::init(c + 1, m, 3, 1, g, rng),
                ConvLayer::init(m, 1, 1, 1, 1.0, rng),
            ],
            encoder,
        })
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let encoder = Encoder::zeros(&config.encoder, config.grid.grid_size)?;
        let c = encoder.out_channels();
        let m = config.first_vertex_channels;
        Ok(FirstVertexNet {
            config: config.clone(),
            boundary: [ConvLayer::zeros(c, m, 3, 1), ConvLayer::zeros(m, 1, 1, 1)],
            vertex: [ConvLayer::zeros(c + 1, m, 3, 1), ConvLayer::zeros(m, 1, 1, 1)],
            encoder,
        })
    }

    pub fn forward(&self, crop: &Tensor) -> FirstVertexOutput {
        self.run(crop, None).0
    }

    /// Sum of the mean logistic losses of both heads against the outline and
    /// vertex maps of `target`, with gradients when requested.
    pub fn loss(
        &self,
        crop: &Tensor,
        target: &[GridToken],
        want_grads: bool,
    ) -> (f64, Option<FirstVertexNet>) {
        let (b, v) = boundary_vertex_maps(target, &self.config.grid);
        let (_, loss, grads) = self.run(crop, Some((&b, &v, want_grads)));
        (loss, grads)
    }

    fn run(
        &self,
        crop: &Tensor,
        targets: Option<(&[f64], &[f64], bool)>,
    ) -> (FirstVertexOutput, f64, Option<FirstVertexNet>) {
        let (feat, enc_cache) = self.encoder.forward_cached(crop);
        let b_hidden = relu(&self.boundary[0].forward(&feat));
        let b_logits = self.boundary[1].forward(&b_hidden);
        let v_in = concat_channels(&[&feat, &b_logits]).expect("same grid");
        let v_hidden = relu(&self.vertex[0].forward(&v_in));
        let v_logits = self.vertex[1].forward(&v_hidden);
        let out = FirstVertexOutput {
            boundary_logits: b_logits.data().to_vec(),
            vertex_logits: v_logits.data().to_vec(),
        };
        let Some((bt, vt, want_grads)) = targets else {
            return (out, 0.0, None);
        };
        let (lb, gb) = logistic_loss(b_logits.data(), bt).expect("grid-sized targets");
        let (lv, gv) = logistic_loss(v_logits.data(), vt).expect("grid-sized targets");
        if !want_grads {
            return (out, lb + lv, None);
        }
        let mut grads = self.zeros_like();
        let shape = v_logits.shape().to_vec();
        let gv = Tensor::from_vec(&shape, gv).expect("same length");
        let gvh = self.vertex[1]
            .backward(&v_hidden, &gv, true, &mut grads.vertex[1])
            .expect("requested");
        let gvh = relu_backward(&v_hidden, &gvh).expect("same shape");
        let gvin = self.vertex[0]
            .backward(&v_in, &gvh, true, &mut grads.vertex[0])
            .expect("requested");
        let mut parts = split_channels(&gvin, &[feat.shape()[0], 1])
            .expect("matching channels")
            .into_iter();
        let mut gfeat = parts.next().expect("two parts");
        let mut gbl = parts.next().expect("two parts");
        gbl.add_assign(&Tensor::from_vec(&shape, gb).expect("same length"))
            .expect("same shape");
        let gbh = self.boundary[1]
            .backward(&b_hidden, &gbl, true, &mut grads.boundary[1])
            .expect("requested");
        let gbh = relu_backward(&b_hidden, &gbh).expect("same shape");
        let gf = self.boundary[0]
            .backward(&feat, &gbh, true, &mut grads.boundary[0])
            .expect("requested");
        gfeat.add_assign(&gf).expect("same shape");
        self.encoder.backward(&enc_cache, &gfeat, &mut grads.encoder);
        (out, lb + lv, Some(grads))
    }
}

impl Params for FirstVertexNet {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.encoder.push_named("fv.encoder", &mut out);
        for (i, c) in self.boundary.iter().enumerate() {
            c.push_named(&format!("fv.boundary{i}"), &mut out);
        }
        for (i, c) in self.vertex.iter().enumerate() {
            c.push_named(&format!("fv.vertex{i}"), &mut out);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.encoder.push_mut(&mut out);
        for c in &mut self.boundary {
            c.push_mut(&mut out);
        }
        for c in &mut self.vertex {
            c.push_mut(&mut out);
        }
        out
    }
}
