//! The two networks (first-vertex predictor and recurrent vertex decoder),
//! teacher-forced training, greedy inference with correction injection, and
//! the checkpoint format.

mod checkpoint;
mod encoder;
mod first_vertex;
pub mod gradcheck;
mod infer;
mod params;
mod rnn;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridcode::GridConfig;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, sha256_hex,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use encoder::{Encoder, EncoderCache, EncoderConfig, StageConfig};
pub use first_vertex::{argmax, FirstVertexNet, FirstVertexOutput};
pub use infer::{predict_polygon, CorrectionSource, DecodeSession, Prediction, StepRecord};
pub use params::{ConvLayer, Linear, Params};
pub use rnn::{DecoderContext, DecoderState, Planes, PolygonRnn, HISTORY_PLANES};
pub use train::{lr_for_epoch, EpochMetrics, TrainConfig, Trainer};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("target sequence of length {0} is not cells followed by one end token")]
    BadTarget(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("session: {0}")]
    Session(String),
    #[error("training: {0}")]
    Training(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub grid: GridConfig,
    pub encoder: EncoderConfig,
    /// ConvLSTM channels in both decoder layers.
    pub hidden: usize,
    pub lstm_kernel: usize,
    /// Channels of the conv in front of the dense vertex head.
    pub head_channels: usize,
    /// A wide kernel lets the conv path reach the next vertex a few cells
    /// away, which it learns far faster than the dense map does.
    pub head_kernel: usize,
    pub first_vertex_channels: usize,
    /// Decoder step cap including the end token.
    pub max_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            grid: GridConfig::default(),
            encoder: EncoderConfig::default(),
            hidden: 16,
            lstm_kernel: 3,
            head_channels: 2,
            head_kernel: 9,
            first_vertex_channels: 16,
            max_steps: 70,
        }
    }
}

impl ModelConfig {
    /// The small configuration used by the end-to-end gradient check:
    /// an 8 × 8 grid on a 64 px input with a 4-channel encoder.
    pub fn tiny() -> Self {
        ModelConfig {
            grid: GridConfig {
                grid_size: 8,
                canonical_size: 64,
            },
            encoder: EncoderConfig {
                input_size: 64,
                in_channels: 3,
                stages: vec![
                    StageConfig { convs: 1, channels: 4 },
                    StageConfig { convs: 1, channels: 4 },
                    StageConfig { convs: 1, channels: 4 },
                    StageConfig { convs: 1, channels: 4 },
                ],
                skip_channels: 2,
                fuse_channels: 4,
            },
            hidden: 4,
            lstm_kernel: 3,
            head_channels: 2,
            head_kernel: 3,
            first_vertex_channels: 4,
            max_steps: 70,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.grid
            .validate()
            .map_err(|e| ModelError::Config(e.to_string()))?;
        if self.encoder.input_size != self.grid.canonical_size {
            return Err(ModelError::Config(format!(
                "encoder input {} differs from canonical size {}",
                self.encoder.input_size, self.grid.canonical_size
            )));
        }
        self.encoder.validate(self.grid.grid_size)?;
        for (name, k) in [("lstm_kernel", self.lstm_kernel), ("head_kernel", self.head_kernel)] {
            if k % 2 == 0 {
                return Err(ModelError::Config(format!("{name} must be odd, got {k}")));
            }
        }
        if self.hidden == 0 || self.head_channels == 0 || self.first_vertex_channels == 0 {
            return Err(ModelError::Config("channel counts must be positive".into()));
        }
        if self.max_steps < 4 {
            return Err(ModelError::Config(format!("max_steps {} < 4", self.max_steps)));
        }
        Ok(())
    }
}

/// Both trained networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    pub config: ModelConfig,
    pub rnn: PolygonRnn,
    pub first_vertex: FirstVertexNet,
}

impl Models {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rnn = PolygonRnn::init(config, &mut rng)?;
        let first_vertex = FirstVertexNet::init(config, &mut rng)?;
        Ok(Models {
            config: config.clone(),
            rnn,
            first_vertex,
        })
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self, ModelError> {
        Ok(Models {
            config: config.clone(),
            rnn: PolygonRnn::zeros(config)?,
            first_vertex: FirstVertexNet::zeros(config)?,
        })
    }

    /// Every tensor of both networks, decoder first.
    pub fn named(&self) -> Vec<(String, &polyrnn_nn::Tensor)> {
        let mut v = self.rnn.named();
        v.extend(self.first_vertex.named());
        v
    }
}
