//! Automatic-mode evaluation, the SquareBox baseline and report files.
//!
//! The overall mean of a report is the unweighted mean of the per-class
//! means; the report metadata says so explicitly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotsim::{
    curve_rows, instance_mask, simulate_dataset, CurveRow, InstanceCurve, SimError, Threshold,
};
use crate::data::InstanceRecord;
use crate::exec::Exec;
use crate::model::Models;
use crate::polygeom::{iou, rasterize, BinaryMask, GeomError};

/// Box side length unit of the optional size buckets.
pub const SIZE_BUCKET_PX: usize = 28;

pub const MEAN_CONVENTION: &str = "overall = unweighted mean of per-class means";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{what}: {left} vs {right} entries")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("nothing to evaluate")]
    Empty,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Per-class means and their unweighted mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMeans {
    pub per_class: BTreeMap<String, f64>,
    pub overall: f64,
}

/// Groups `values` by `classes` and averages each group, then the groups.
pub fn class_means(values: &[f64], classes: &[String]) -> Result<ClassMeans, EvalError> {
    if values.len() != classes.len() {
        return Err(EvalError::LengthMismatch {
            what: "values and classes",
            left: values.len(),
            right: classes.len(),
        });
    }
    if values.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut groups: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for (v, c) in values.iter().zip(classes) {
        let g = groups.entry(c.as_str()).or_default();
        g.0 += v;
        g.1 += 1;
    }
    let per_class: BTreeMap<String, f64> = groups
        .into_iter()
        .map(|(c, (s, n))| (c.to_string(), s / n as f64))
        .collect();
    let overall = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(ClassMeans { per_class, overall })
}

/// Instance IoUs of aligned prediction and ground-truth masks, averaged per
/// class and over classes.
pub fn mean_iou(
    predictions: &[BinaryMask],
    gts: &[BinaryMask],
    classes: &[String],
) -> Result<(Vec<f64>, ClassMeans), EvalError> {
    if predictions.len() != gts.len() {
        return Err(EvalError::LengthMismatch {
            what: "predictions and ground truths",
            left: predictions.len(),
            right: gts.len(),
        });
    }
    let ious: Vec<f64> = predictions
        .iter()
        .zip(gts)
        .map(|(p, g)| iou(p, g))
        .collect::<Result<_, _>>()?;
    let means = class_means(&ious, classes)?;
    Ok((ious, means))
}

/// Each component's tight box shrunk to 80% about its centre, filled, and
/// the union taken over components.
pub fn squarebox(rec: &InstanceRecord) -> BinaryMask {
    let mut m = BinaryMask::new(rec.width(), rec.height());
    for c in &rec.components {
        let b = c.bounds().expect("components have vertices").scaled_about_center(0.8);
        m.union_with(&rasterize(&b.to_polygon(), rec.width(), rec.height()))
            .expect("same image size");
    }
    m
}

/// Ids that stay unique when an image holds several objects:
/// `<image_id>#<k>` with `k` counting objects of that image in order.
pub fn instance_ids(records: &[InstanceRecord]) -> Vec<String> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    records
        .iter()
        .map(|r| {
            let k = seen.entry(r.image_id.as_str()).or_default();
            let id = format!("{}#{}", r.image_id, k);
            *k += 1;
            id
        })
        .collect()
}

/// One instance row of `per-instance.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRow {
    pub instance_id: String,
    pub class: String,
    /// Longest side of the tight box in pixels.
    pub box_size: f64,
    /// Automatic-mode IoU; absent in baseline-only reports.
    pub iou: Option<f64>,
    pub squarebox_iou: f64,
    pub quantization_ceiling: Option<f64>,
    /// `(T, iou, clicks)` per simulated threshold.
    pub annotator: Vec<(Threshold, f64, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub per_class: BTreeMap<String, f64>,
    pub overall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub dataset: String,
    pub checkpoint_sha256: Option<String>,
    pub seed: Option<u64>,
    pub n_instances: usize,
    /// Instances left out because their polygon collapses on the grid.
    pub n_skipped: usize,
    pub mean_convention: String,
    /// The alternative, instance-weighted overall mean, for comparison.
    pub instance_weighted_means: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: ReportMetadata,
    pub rows: Vec<MethodRow>,
    pub annotator: Vec<CurveRow>,
    #[serde(skip)]
    pub instances: Vec<InstanceRow>,
}

impl EvalReport {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// What [`evaluate`] needs besides the data.
#[derive(Clone, Debug)]
pub struct EvalOptions<'a> {
    pub dataset: String,
    /// `None` gives a baseline-only report.
    pub models: Option<&'a Models>,
    pub checkpoint_sha256: Option<String>,
    pub seed: Option<u64>,
    pub thresholds: Vec<Threshold>,
}

fn row(method: &str, values: &[f64], classes: &[String]) -> Result<(MethodRow, f64), EvalError> {
    let m = class_means(values, classes)?;
    let weighted = values.iter().sum::<f64>() / values.len() as f64;
    Ok((
        MethodRow {
            method: method.to_string(),
            per_class: m.per_class,
            overall: m.overall,
        },
        weighted,
    ))
}

/// Evaluates SquareBox, and with models the automatic mode, the
/// quantization ceiling and the simulated annotator at each threshold.
pub fn evaluate(records: &[InstanceRecord], opts: &EvalOptions<'_>, exec: Exec) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let ids = instance_ids(records);
    let (kept, skipped): (Vec<Option<InstanceCurve>>, usize) = match opts.models {
        None => (vec![None; records.len()], 0),
        Some(m) => {
            // Automatic mode is the T = ∞ run, prepended to the thresholds.
            let mut ts = vec![Threshold::Never];
            ts.extend(&opts.thresholds);
            let (sims, skipped) = simulate_dataset(m, records, &ts, exec)?;
            let mut slots = vec![None; records.len()];
            for s in sims {
                let i = s.index;
                slots[i] = Some(s);
            }
            let n = skipped.len();
            (slots, n)
        }
    };
    let squares: Vec<f64> = exec.map(records, |r| {
        iou(&squarebox(r), &instance_mask(r)).expect("same image size")
    });

    let mut instances = Vec::new();
    let mut curves = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        if opts.models.is_some() && kept[i].is_none() {
            continue;
        }
        let sim = kept[i].as_ref();
        instances.push(InstanceRow {
            instance_id: ids[i].clone(),
            class: rec.label.clone(),
            box_size: rec.bbox.width().max(rec.bbox.height()),
            iou: sim.map(|s| s.runs[0].iou),
            squarebox_iou: squares[i],
            quantization_ceiling: sim.map(|s| s.ceiling),
            annotator: sim
                .map(|s| s.runs[1..].iter().map(|r| (r.threshold, r.iou, r.clicks)).collect())
                .unwrap_or_default(),
        });
        if let Some(s) = sim {
            let mut s = s.clone();
            s.runs.remove(0);
            curves.push(s);
        }
    }
    if instances.is_empty() {
        return Err(EvalError::Empty);
    }
    let classes: Vec<String> = instances.iter().map(|r| r.class.clone()).collect();
    let mut rows = Vec::new();
    let mut weighted = BTreeMap::new();
    let mut push = |name: &str, values: Vec<f64>| -> Result<(), EvalError> {
        let (r, w) = row(name, &values, &classes)?;
        rows.push(r);
        weighted.insert(name.to_string(), w);
        Ok(())
    };
    if opts.models.is_some() {
        push("model", instances.iter().map(|r| r.iou.expect("model run")).collect())?;
    }
    push("squarebox", instances.iter().map(|r| r.squarebox_iou).collect())?;
    if opts.models.is_some() {
        push(
            "quantization_ceiling",
            instances.iter().map(|r| r.quantization_ceiling.expect("model run")).collect(),
        )?;
    }
    let annotator = if opts.models.is_some() && !opts.thresholds.is_empty() {
        curve_rows(&curves, &opts.thresholds)?
    } else {
        Vec::new()
    };
    Ok(EvalReport {
        metadata: ReportMetadata {
            dataset: opts.dataset.clone(),
            checkpoint_sha256: opts.checkpoint_sha256.clone(),
            seed: opts.seed,
            n_instances: instances.len(),
            n_skipped: skipped,
            mean_convention: MEAN_CONVENTION.to_string(),
            instance_weighted_means: weighted,
        },
        rows,
        annotator,
        instances,
    })
}

pub fn report_json(report: &EvalReport) -> Result<String, EvalError> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn per_instance_csv(report: &EvalReport) -> String {
    let thresholds: Vec<Threshold> = report.annotator.iter().map(|r| r.threshold).collect();
    let mut s = String::from("instance_id,class,iou,squarebox_iou,quantization_ceiling");
    for t in &thresholds {
        s.push_str(&format!(",iou_T{t},clicks_T{t}"));
    }
    s.push('\n');
    for r in &report.instances {
        s.push_str(&format!(
            "{},{},{},{},{}",
            r.instance_id,
            r.class,
            fmt_opt(r.iou),
            r.squarebox_iou,
            fmt_opt(r.quantization_ceiling)
        ));
        for (_, iou, clicks) in &r.annotator {
            s.push_str(&format!(",{iou},{clicks}"));
        }
        s.push('\n');
    }
    s
}

/// Instances grouped by longest box side in multiples of 28 px.
pub fn size_buckets_csv(report: &EvalReport) -> String {
    let mut buckets: BTreeMap<usize, (usize, f64, f64)> = BTreeMap::new();
    for r in &report.instances {
        let k = (r.box_size / SIZE_BUCKET_PX as f64).floor() as usize;
        let b = buckets.entry(k).or_default();
        b.0 += 1;
        b.1 += r.iou.unwrap_or(f64::NAN);
        b.2 += r.squarebox_iou;
    }
    let mut s = String::from("min_px,max_px,n_instances,mean_iou,mean_squarebox_iou\n");
    for (k, (n, iou, sq)) in buckets {
        let mean = |v: f64| v / n as f64;
        let iou = if iou.is_nan() { String::new() } else { mean(iou).to_string() };
        s.push_str(&format!(
            "{},{},{n},{iou},{}\n",
            k * SIZE_BUCKET_PX,
            (k + 1) * SIZE_BUCKET_PX,
            mean(sq)
        ));
    }
    s
}

/// Writes `report.json`, `per-instance.csv` and, if asked,
/// `size-buckets.csv` into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport, size_buckets: bool) -> Result<(), EvalError> {
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|source| EvalError::Io {
            path: p.display().to_string(),
            source,
        })
    };
    fs::create_dir_all(dir).map_err(|source| EvalError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    write("report.json", report_json(report)?)?;
    write("per-instance.csv", per_instance_csv(report))?;
    if size_buckets {
        write("size-buckets.csv", size_buckets_csv(report))?;
    }
    Ok(())
}
