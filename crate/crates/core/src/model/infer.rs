use nn::Tensor;
use polyrnn_nn as nn;
use serde::{Deserialize, Serialize};

use super::first_vertex::argmax;
use super::rnn::{DecoderContext, DecoderState};
use super::{ModelError, Models};
use crate::gridcode::GridToken;

/// Something that may overrule the model after each emitted token: a
/// simulated annotator, a scripted schedule, or a person behind the service.
pub trait CorrectionSource {
    /// Called once per step (1-based) with the model's token and everything
    /// accepted before it. A returned token replaces the prediction and is
    /// what gets fed forward.
    fn correct(
        &mut self,
        step: usize,
        predicted: GridToken,
        accepted: &[GridToken],
    ) -> Option<GridToken>;
}

/// Decoding state of one object, independent of the model it runs on.
///
/// The most recent token is "current": it can still be replaced
/// ([`DecodeSession::replace_current`]) until [`DecodeSession::advance`]
/// commits it and, unless it is the end token, predicts the next one.
pub struct DecodeSession {
    ctx: DecoderContext,
    state: DecoderState,
    tokens: Vec<GridToken>,
    closed: bool,
    forced_close: bool,
    max_steps: usize,
}

impl DecodeSession {
    /// Runs both encoders and predicts the first vertex.
    pub fn start(models: &Models, crop: &Tensor) -> Self {
        let first = models
            .first_vertex
            .forward(crop)
            .chosen(models.config.grid.grid_size);
        DecodeSession {
            ctx: models.rnn.context(crop),
            state: models.rnn.initial_state(),
            tokens: vec![first],
            closed: false,
            forced_close: false,
            max_steps: models.config.max_steps,
        }
    }

    /// 1-based index of the current token.
    pub fn step(&self) -> usize {
        self.tokens.len()
    }

    pub fn current(&self) -> GridToken {
        *self.tokens.last().expect("sessions start with one token")
    }

    pub fn tokens(&self) -> &[GridToken] {
        &self.tokens
    }

    pub fn cells(&self) -> &[GridToken] {
        match self.tokens.last() {
            Some(GridToken::Eos) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// The end token was imposed by the step cap rather than predicted.
    pub fn forced_close(&self) -> bool {
        self.forced_close
    }

    /// Replaces the current (uncommitted) token.
    pub fn replace_current(&mut self, token: GridToken) -> Result<(), ModelError> {
        if self.closed {
            return Err(ModelError::Session("session is closed".into()));
        }
        let before = self.tokens.len() - 1;
        match token {
            GridToken::Eos if before < 3 => {
                return Err(ModelError::Session(format!(
                    "cannot close a polygon with {before} vertices"
                )))
            }
            GridToken::Cell { row, col } => {
                let d = self.ctx.features.shape()[1];
                if row >= d || col >= d {
                    return Err(ModelError::Session(format!("cell ({row}, {col}) off the grid")));
                }
                if before + 1 >= self.max_steps {
                    return Err(ModelError::Session("step cap reached".into()));
                }
            }
            GridToken::Eos => {}
        }
        *self.tokens.last_mut().expect("non-empty") = token;
        self.forced_close = false;
        Ok(())
    }

    /// Commits the current token. Returns the next prediction, or `None`
    /// when the committed token was the end token.
    pub fn advance(&mut self, models: &Models) -> Result<Option<GridToken>, ModelError> {
        if self.closed {
            return Err(ModelError::Session("session is closed".into()));
        }
        if self.current().is_eos() {
            self.closed = true;
            return Ok(None);
        }
        let n = self.tokens.len();
        let next = if n + 1 >= self.max_steps {
            self.forced_close = true;
            GridToken::Eos
        } else {
            let cell = |i: usize| self.tokens[i].row_col();
            let planes = [cell(n - 1), n.checked_sub(2).and_then(cell), cell(0)];
            let (mut logits, state, _) = models.rnn.step(&self.ctx, planes, &self.state);
            self.state = state;
            if n < 3 {
                let eos = models.config.grid.eos_index();
                logits[eos] = f64::NEG_INFINITY;
            }
            GridToken::from_index(argmax(&logits), &models.config.grid)
                .expect("logit count is D² + 1")
        };
        self.tokens.push(next);
        Ok(Some(next))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub predicted: GridToken,
    pub emitted: GridToken,
}

impl StepRecord {
    pub fn corrected(&self) -> bool {
        self.predicted != self.emitted
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Emitted cells followed by the end token.
    pub tokens: Vec<GridToken>,
    pub log: Vec<StepRecord>,
    /// Number of steps where the correction source returned a token.
    pub corrections: usize,
    pub forced_close: bool,
}

impl Prediction {
    pub fn cells(&self) -> &[GridToken] {
        &self.tokens[..self.tokens.len() - 1]
    }
}

/// Greedy decoding of one crop, consulting `corrections` after every step.
pub fn predict_polygon(
    models: &Models,
    crop: &Tensor,
    mut corrections: Option<&mut dyn CorrectionSource>,
) -> Result<Prediction, ModelError> {
    let mut s = DecodeSession::start(models, crop);
    let mut log = Vec::new();
    let mut count = 0;
    loop {
        let predicted = s.current();
        let step = s.step();
        if let Some(src) = corrections.as_deref_mut() {
            let accepted = &s.tokens()[..step - 1];
            if let Some(tok) = src.correct(step, predicted, accepted) {
                s.replace_current(tok)?;
                count += 1;
            }
        }
        log.push(StepRecord {
            step,
            predicted,
            emitted: s.current(),
        });
        if s.advance(models)?.is_none() {
            break;
        }
    }
    Ok(Prediction {
        forced_close: s.forced_close(),
        tokens: s.tokens().to_vec(),
        log,
        corrections: count,
    })
}
