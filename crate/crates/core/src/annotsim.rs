//! Simulated annotator in the loop.
//!
//! The annotator walks the predicted sequence index by index against the
//! ground-truth sequence `g_1..g_L, EOS`. A predicted cell farther than `T`
//! (chessboard distance) from `g_t` is replaced by `g_t`; a premature end
//! token is replaced by `g_t`; at `t = L + 1` a cell is replaced by the end
//! token. Every replacement is one click. Because every accepted token sits
//! within `T` of its ground-truth counterpart, the two sequences stay aligned
//! by index.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{make_example, InstanceRecord, TrainingExample};
use crate::exec::Exec;
use crate::gridcode::{chessboard, GridError, GridToken};
use crate::model::{predict_polygon, CorrectionSource, ModelError, Models, Prediction};
use crate::polygeom::{iou, rasterize, BinaryMask};

/// Context expansion used for every evaluation crop.
pub const EVAL_CONTEXT: f64 = 0.15;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("speed-up needs a positive click count, got {0}")]
    ZeroClicks(f64),
    #[error("empty dataset")]
    Empty,
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Correction threshold in grid cells. `Threshold::Never` is the `T = ∞`
/// limit: the annotator accepts everything.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Threshold {
    Cells(usize),
    Never,
}

impl Serialize for Threshold {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Threshold::Cells(t) => s.serialize_u64(*t as u64),
            Threshold::Never => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Cells(usize),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Cells(t) => Ok(Threshold::Cells(t)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl std::fmt::Display for Threshold {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Threshold::Cells(t) => write!(f, "{t}"),
            Threshold::Never => f.write_str("inf"),
        }
    }
}

impl std::str::FromStr for Threshold {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "inf" | "∞" => Ok(Threshold::Never),
            t => t
                .parse()
                .map(Threshold::Cells)
                .map_err(|_| format!("threshold must be a non-negative integer or inf, got {t:?}")),
        }
    }
}

/// The annotator as a correction source for [`predict_polygon`] or a
/// decode session.
#[derive(Clone, Debug)]
pub struct SimulatedAnnotator<'a> {
    target: &'a [GridToken],
    threshold: Threshold,
}

impl<'a> SimulatedAnnotator<'a> {
    /// `target` is the ground-truth sequence: cells followed by one end token.
    pub fn new(target: &'a [GridToken], threshold: Threshold) -> Self {
        SimulatedAnnotator { target, threshold }
    }

    /// The replacement the annotator makes for `predicted` at 1-based `step`.
    pub fn decide(&self, step: usize, predicted: GridToken) -> Option<GridToken> {
        let Threshold::Cells(t) = self.threshold else {
            return None;
        };
        let cells = self.target.len().saturating_sub(1);
        if step <= cells {
            let g = self.target[step - 1];
            match chessboard(predicted, g) {
                Ok(d) if d <= t => None,
                _ => Some(g),
            }
        } else if predicted.is_eos() {
            None
        } else {
            Some(GridToken::Eos)
        }
    }
}

impl CorrectionSource for SimulatedAnnotator<'_> {
    fn correct(&mut self, step: usize, predicted: GridToken, _accepted: &[GridToken]) -> Option<GridToken> {
        self.decide(step, predicted)
    }
}

/// One component annotated under one threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct SimResult {
    pub tokens: Vec<GridToken>,
    pub clicks: usize,
    pub iou: f64,
    pub threshold: Threshold,
    /// The resulting polygon rasterized in full-image coordinates.
    pub mask: BinaryMask,
}

/// Ground-truth mask of one component in full-image coordinates.
pub fn component_mask(rec: &InstanceRecord, component: usize) -> BinaryMask {
    rasterize(&rec.components[component], rec.width(), rec.height())
}

/// Union of all component masks.
pub fn instance_mask(rec: &InstanceRecord) -> BinaryMask {
    let mut m = BinaryMask::new(rec.width(), rec.height());
    for c in 0..rec.components.len() {
        m.union_with(&component_mask(rec, c)).expect("same image size");
    }
    m
}

/// Rasterizes a token sequence of `example` in full-image coordinates.
pub fn tokens_mask(
    example: &TrainingExample,
    tokens: &[GridToken],
    models: &Models,
    width: usize,
    height: usize,
) -> BinaryMask {
    let poly = example.tokens_to_image(tokens, &models.config.grid);
    rasterize(&poly, width, height)
}

pub fn eval_example(models: &Models, rec: &InstanceRecord, component: usize) -> Result<TrainingExample, SimError> {
    let cfg = &models.config;
    Ok(make_example(rec, component, EVAL_CONTEXT, &cfg.grid, cfg.max_steps)?)
}

fn finish(
    models: &Models,
    rec: &InstanceRecord,
    component: usize,
    example: &TrainingExample,
    prediction: Prediction,
    threshold: Threshold,
) -> SimResult {
    let mask = tokens_mask(example, &prediction.tokens, models, rec.width(), rec.height());
    let gt = component_mask(rec, component);
    SimResult {
        iou: iou(&mask, &gt).expect("same image size"),
        clicks: prediction.corrections,
        tokens: prediction.tokens,
        threshold,
        mask,
    }
}

/// Annotates component `component` of `rec` with the simulated annotator.
pub fn simulate(
    models: &Models,
    rec: &InstanceRecord,
    component: usize,
    threshold: Threshold,
) -> Result<SimResult, SimError> {
    let example = eval_example(models, rec, component)?;
    let mut annotator = SimulatedAnnotator::new(&example.target, threshold);
    let source: Option<&mut dyn CorrectionSource> = match threshold {
        Threshold::Never => None,
        Threshold::Cells(_) => Some(&mut annotator),
    };
    let prediction = predict_polygon(models, &example.crop, source)?;
    Ok(finish(models, rec, component, &example, prediction, threshold))
}

/// IoU of the quantized, simplified ground truth against the exact ground
/// truth for one component: the best any grid polygon of this sequence can do.
pub fn quantization_ceiling(models: &Models, rec: &InstanceRecord, component: usize) -> Result<f64, SimError> {
    let example = eval_example(models, rec, component)?;
    let mask = tokens_mask(&example, &example.target, models, rec.width(), rec.height());
    Ok(iou(&mask, &component_mask(rec, component)).expect("same image size"))
}

/// An instance annotated at one threshold: component results and the
/// instance-level IoU of their union against the union of the ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSim {
    pub threshold: Threshold,
    pub components: Vec<SimResult>,
    pub clicks: usize,
    pub iou: f64,
}

pub fn simulate_instance(models: &Models, rec: &InstanceRecord, threshold: Threshold) -> Result<InstanceSim, SimError> {
    let mut union = BinaryMask::new(rec.width(), rec.height());
    let mut components = Vec::with_capacity(rec.components.len());
    for c in 0..rec.components.len() {
        let r = simulate(models, rec, c, threshold)?;
        union.union_with(&r.mask).expect("same image size");
        components.push(r);
    }
    Ok(InstanceSim {
        threshold,
        clicks: components.iter().map(|r| r.clicks).sum(),
        iou: iou(&union, &instance_mask(rec)).expect("same image size"),
        components,
    })
}

/// Instance-level quantization ceiling (union over components).
pub fn instance_ceiling(models: &Models, rec: &InstanceRecord) -> Result<f64, SimError> {
    let mut union = BinaryMask::new(rec.width(), rec.height());
    for c in 0..rec.components.len() {
        let example = eval_example(models, rec, c)?;
        union
            .union_with(&tokens_mask(&example, &example.target, models, rec.width(), rec.height()))
            .expect("same image size");
    }
    Ok(iou(&union, &instance_mask(rec)).expect("same image size"))
}

/// Every threshold for one instance, plus its ceiling.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceCurve {
    pub index: usize,
    pub ceiling: f64,
    pub runs: Vec<InstanceSim>,
}

/// Simulates every instance at every threshold. Instances whose polygon
/// collapses on the grid are left out and their indices returned.
pub fn simulate_dataset(
    models: &Models,
    records: &[InstanceRecord],
    thresholds: &[Threshold],
    exec: Exec,
) -> Result<(Vec<InstanceCurve>, Vec<usize>), SimError> {
    let results = exec.map_indexed(records, |index, rec| -> Result<Option<InstanceCurve>, SimError> {
        let ceiling = match instance_ceiling(models, rec) {
            Ok(c) => c,
            Err(SimError::Grid(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let runs = thresholds
            .iter()
            .map(|&t| simulate_instance(models, rec, t))
            .collect::<Result<_, _>>()?;
        Ok(Some(InstanceCurve { index, ceiling, runs }))
    });
    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r? {
            Some(c) => kept.push(c),
            None => skipped.push(i),
        }
    }
    Ok((kept, skipped))
}

/// One row of the clicks-versus-IoU table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    #[serde(rename = "T")]
    pub threshold: Threshold,
    pub mean_clicks: f64,
    pub mean_iou: f64,
    pub n_instances: usize,
    pub quantization_ceiling: f64,
}

/// Arithmetic means of clicks and IoU per threshold over simulated instances.
pub fn curve_rows(sims: &[InstanceCurve], thresholds: &[Threshold]) -> Result<Vec<CurveRow>, SimError> {
    if sims.is_empty() {
        return Err(SimError::Empty);
    }
    let n = sims.len() as f64;
    let ceiling = sims.iter().map(|s| s.ceiling).sum::<f64>() / n;
    Ok(thresholds
        .iter()
        .enumerate()
        .map(|(k, &t)| CurveRow {
            threshold: t,
            mean_clicks: sims.iter().map(|s| s.runs[k].clicks as f64).sum::<f64>() / n,
            mean_iou: sims.iter().map(|s| s.runs[k].iou).sum::<f64>() / n,
            n_instances: sims.len(),
            quantization_ceiling: ceiling,
        })
        .collect())
}

/// `simulate_dataset` followed by `curve_rows`.
pub fn curve(
    models: &Models,
    records: &[InstanceRecord],
    thresholds: &[Threshold],
    exec: Exec,
) -> Result<Vec<CurveRow>, SimError> {
    let (sims, _) = simulate_dataset(models, records, thresholds, exec)?;
    curve_rows(&sims, thresholds)
}

pub fn write_curve_csv(path: &Path, rows: &[CurveRow]) -> Result<(), SimError> {
    let mut out = std::fs::File::create(path)?;
    out.write_all(curve_csv(rows).as_bytes())?;
    Ok(())
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("T,mean_clicks,mean_iou,n_instances,quantization_ceiling\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.threshold, r.mean_clicks, r.mean_iou, r.n_instances, r.quantization_ceiling
        ));
    }
    s
}

/// How many times fewer clicks than a reference annotation process.
pub fn speedup(reference_clicks: f64, our_clicks: f64) -> Result<f64, SimError> {
    if !(our_clicks > 0.0) {
        return Err(SimError::ZeroClicks(our_clicks));
    }
    Ok(reference_clicks / our_clicks)
}
