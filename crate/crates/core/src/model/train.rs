use std::time::Instant;

use nn::{Adam, AdamConfig};
use polyrnn_nn as nn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::first_vertex::FirstVertexNet;
use super::params::Params;
use super::rnn::PolygonRnn;
use super::{ModelConfig, ModelError, Models};
use crate::data::{augment, make_example, Augmentation, InstanceRecord};
use crate::exec::Exec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Epoch index from which the learning rate is multiplied by
    /// `decay_factor`.
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Random flip, context and start vertex; off gives the plain 15% crop.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            lr: 1e-4,
            decay_epoch: 10,
            decay_factor: 0.1,
            epochs: 20,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.decay_factor > 0.0) {
            return Err(ModelError::Config(
                "batch size, learning rate and decay factor must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub fn lr_for_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    if epoch >= cfg.decay_epoch {
        cfg.lr * cfg.decay_factor
    } else {
        cfg.lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean teacher-forced loss of the decoder over the epoch's instances.
    pub rnn_loss: f64,
    /// Mean boundary + vertex logistic loss of the first-vertex network.
    pub first_vertex_loss: f64,
    pub instances: usize,
    pub skipped: usize,
    pub seconds: f64,
}

/// Optimizer state for both networks. Each network has its own Adam; they
/// see the same augmented examples.
pub struct Trainer {
    pub models: Models,
    pub config: TrainConfig,
    adam_rnn: Adam,
    adam_fv: Adam,
    epoch: usize,
}

struct InstanceGrads {
    rnn_loss: f64,
    rnn: PolygonRnn,
    fv_loss: f64,
    fv: FirstVertexNet,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, config: TrainConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let models = Models::init(model_cfg, config.seed)?;
        Ok(Self::with_models(models, config))
    }

    pub fn with_models(models: Models, config: TrainConfig) -> Self {
        let adam = |sizes: Vec<usize>| {
            Adam::new(
                AdamConfig {
                    lr: config.lr,
                    ..AdamConfig::default()
                },
                &sizes,
            )
        };
        Trainer {
            adam_rnn: adam(models.rnn.sizes()),
            adam_fv: adam(models.first_vertex.sizes()),
            models,
            config,
            epoch: 0,
        }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Trains `config.epochs` epochs, reporting each one.
    pub fn run(
        &mut self,
        records: &[InstanceRecord],
        exec: Exec,
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<Vec<EpochMetrics>, ModelError> {
        let mut out = Vec::new();
        while self.epoch < self.config.epochs {
            let m = self.run_epoch(records, exec)?;
            on_epoch(&m);
            out.push(m);
        }
        Ok(out)
    }

    /// One pass over `records` in a seeded shuffled order.
    pub fn run_epoch(&mut self, records: &[InstanceRecord], exec: Exec) -> Result<EpochMetrics, ModelError> {
        if records.is_empty() {
            return Err(ModelError::Training("empty dataset".into()));
        }
        let timer = Instant::now();
        let epoch = self.epoch;
        let lr = lr_for_epoch(&self.config, epoch);
        self.adam_rnn.set_lr(lr);
        self.adam_fv.set_lr(lr);

        let mut order: Vec<usize> = (0..records.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(1 + epoch as u64);
        order.shuffle(&mut rng);

        let (mut rnn_sum, mut fv_sum, mut used, mut skipped) = (0.0, 0.0, 0usize, 0usize);
        for batch in order.chunks(self.config.batch_size) {
            let results = exec.map(batch, |&i| self.instance_grads(&records[i], epoch, i));
            let mut acc: Option<InstanceGrads> = None;
            let mut n = 0usize;
            for r in results {
                let Some(g) = r? else {
                    skipped += 1;
                    continue;
                };
                n += 1;
                rnn_sum += g.rnn_loss;
                fv_sum += g.fv_loss;
                match acc.as_mut() {
                    None => acc = Some(g),
                    Some(a) => {
                        a.rnn.add_assign(&g.rnn);
                        a.fv.add_assign(&g.fv);
                    }
                }
            }
            let Some(mut a) = acc else { continue };
            used += n;
            a.rnn.scale(1.0 / n as f64);
            a.fv.scale(1.0 / n as f64);
            apply(&mut self.adam_rnn, &mut self.models.rnn, &a.rnn);
            apply(&mut self.adam_fv, &mut self.models.first_vertex, &a.fv);
        }
        self.epoch += 1;
        let denom = used.max(1) as f64;
        Ok(EpochMetrics {
            epoch,
            lr,
            rnn_loss: rnn_sum / denom,
            first_vertex_loss: fv_sum / denom,
            instances: used,
            skipped,
            seconds: timer.elapsed().as_secs_f64(),
        })
    }

    /// Gradients of one instance under its (seed, epoch, index) augmentation;
    /// `None` for instances whose polygon collapses on the grid.
    fn instance_grads(
        &self,
        rec: &InstanceRecord,
        epoch: usize,
        index: usize,
    ) -> Result<Option<InstanceGrads>, ModelError> {
        let cfg = &self.models.config;
        let example = if self.config.augment {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_0000_0000);
            rng.set_stream(((epoch as u64) << 32) | index as u64);
            augment(rec, 0, &Augmentation::sample(&mut rng), &cfg.grid, cfg.max_steps)
        } else {
            make_example(rec, 0, 0.15, &cfg.grid, cfg.max_steps)
        };
        let Ok(example) = example else {
            return Ok(None);
        };
        let (rnn_loss, rnn) = self
            .models
            .rnn
            .teacher_forced(&example.crop, &example.target, None, true)?;
        let (fv_loss, fv) = self
            .models
            .first_vertex
            .loss(&example.crop, example.target_cells(), true);
        Ok(Some(InstanceGrads {
            rnn_loss,
            rnn: rnn.expect("requested"),
            fv_loss,
            fv: fv.expect("requested"),
        }))
    }
}

fn apply<P: Params>(adam: &mut Adam, params: &mut P, grads: &P) {
    let g = grads.named();
    let gs: Vec<&[f64]> = g.iter().map(|(_, t)| t.data()).collect();
    let mut ps: Vec<&mut [f64]> = params.tensors_mut().into_iter().map(|t| t.data_mut()).collect();
    adam.step(&mut ps, &gs);
}
