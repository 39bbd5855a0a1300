//! The `polyrnn` command. Each subcommand is a plain function here so tests
//! can drive it without spawning a process.

pub mod config;

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use polyrnn::annotsim::{eval_example, simulate_dataset, curve_rows, curve_csv, Threshold};
use polyrnn::data::{load_instances, save_instances, synth_shapes, InstanceRecord};
use polyrnn::evalbench::{evaluate, instance_ids, write_report, EvalOptions};
use polyrnn::model::{load_checkpoint, predict_polygon, save_checkpoint, EpochMetrics, Models, Trainer};
use polyrnn::Exec;
use polyrnn_service::{AppState, ServiceConfig};
use serde::Serialize;

pub use config::{file_sha256, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "polyrnn", version, about = "Polygon annotation with a recurrent vertex predictor")]
pub struct Cli {
    /// Run every per-instance loop on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (instance JSON plus PNGs).
    Synth(SynthArgs),
    /// Train both networks and write a checkpoint and per-epoch metrics.
    Train(TrainArgs),
    /// Predict polygons in automatic mode.
    Predict(PredictArgs),
    /// Evaluate a checkpoint (or baselines only) and write a report.
    Eval(EvalArgs),
    /// Run the simulated annotator and write the clicks-versus-IoU curve.
    Simulate(SimulateArgs),
    /// Serve the annotation HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub n: usize,
    /// Instance file to write; images go next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Reads the `synth` section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training instance file; overrides `train_data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for `checkpoint.bin`, `metrics.csv` and `run.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Polygons JSON to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Without a checkpoint only the baselines are evaluated.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Report directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    pub thresholds: Vec<Threshold>,
    /// Also write `size-buckets.csv`.
    #[arg(long)]
    pub size_buckets: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    pub thresholds: Vec<Threshold>,
    /// Curve CSV to write; run metadata goes to the same path with `.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "POLYRNN_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = "POLYRNN_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, env = "POLYRNN_HOST", default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, env = "POLYRNN_STORE_PATH", default_value = "annotations.jsonl")]
    pub store_path: PathBuf,
    /// Idle seconds before a session is dropped.
    #[arg(long, env = "POLYRNN_SESSION_TTL", default_value_t = 1800)]
    pub session_ttl: u64,
}

pub fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::Synth(a) => synth(&a, exec),
        Command::Train(a) => train(&a, exec).map(|_| ()),
        Command::Predict(a) => predict(&a, exec),
        Command::Eval(a) => eval(&a, exec),
        Command::Simulate(a) => simulate(&a, exec),
        Command::Serve(a) => serve(&a),
    }
}

fn load_data(path: &Path) -> Result<Vec<InstanceRecord>> {
    load_instances(path).with_context(|| format!("loading {}", path.display()))
}

fn load_models(path: &Path) -> Result<(Models, String)> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let body = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

pub fn synth(a: &SynthArgs, exec: Exec) -> Result<()> {
    if a.n == 0 {
        bail!("--n must be at least 1");
    }
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?.synth;
    if let Some(s) = a.image_size {
        cfg.image_size = s;
    }
    let records = synth_shapes(a.seed, a.n, &cfg, exec);
    save_instances(&a.out, &records).with_context(|| format!("writing {}", a.out.display()))?;
    log::info!("wrote {} instances to {}", records.len(), a.out.display());
    Ok(())
}

/// What `train` leaves next to the checkpoint.
#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub config_sha256: String,
    pub checkpoint_sha256: String,
    pub data_sha256: String,
    pub config: RunConfig,
    pub epochs: Vec<EpochMetrics>,
}

pub const METRICS_HEADER: &str = "epoch,lr,rnn_loss,first_vertex_loss,instances,skipped,config_sha256";

/// Per-epoch metrics without wall-clock time, so identical runs give
/// identical files.
pub fn metrics_csv(epochs: &[EpochMetrics], config_sha256: &str) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for m in epochs {
        s.push_str(&format!(
            "{},{},{},{},{},{},{config_sha256}\n",
            m.epoch, m.lr, m.rnn_loss, m.first_vertex_loss, m.instances, m.skipped
        ));
    }
    s
}

/// Resolves flags over the file over defaults.
pub fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    if let Some(d) = &a.data {
        cfg.train_data = Some(d.clone());
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

pub fn train(a: &TrainArgs, exec: Exec) -> Result<TrainSummary> {
    let cfg = resolve_train_config(a)?;
    let data = cfg
        .train_data
        .clone()
        .context("no training data: pass --data or set train_data in the config")?;
    let records = load_data(&data)?;
    let config_sha256 = cfg.sha256();
    let mut trainer = Trainer::new(&cfg.model, cfg.train.clone())?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let metrics_path = a.out.join("metrics.csv");
    let mut done = Vec::new();
    trainer.run(&records, exec, |m| {
        log::info!(
            "epoch {} lr {:e} rnn {:.4} first-vertex {:.4} ({:.1} s)",
            m.epoch,
            m.lr,
            m.rnn_loss,
            m.first_vertex_loss,
            m.seconds
        );
        done.push(m.clone());
        // Rewritten each epoch so an interrupted run keeps its history.
        if let Err(e) = fs::write(&metrics_path, metrics_csv(&done, &config_sha256)) {
            log::warn!("writing {}: {e}", metrics_path.display());
        }
    })?;
    fs::write(&metrics_path, metrics_csv(&done, &config_sha256))
        .with_context(|| format!("writing {}", metrics_path.display()))?;
    let checkpoint_sha256 = save_checkpoint(&a.out.join("checkpoint.bin"), &trainer.models)?;
    let summary = TrainSummary {
        config_sha256,
        checkpoint_sha256,
        data_sha256: file_sha256(&data)?,
        config: cfg,
        epochs: done,
    };
    write_json(&a.out.join("run.json"), &summary)?;
    log::info!("checkpoint sha256 {}", summary.checkpoint_sha256);
    Ok(summary)
}

#[derive(Debug, Serialize)]
pub struct PredictedPolygon {
    pub instance_id: String,
    pub image_id: String,
    pub label: String,
    pub component: usize,
    /// Image coordinates, clockwise.
    pub polygon: Vec<[f64; 2]>,
    pub forced_close: bool,
}

#[derive(Debug, Serialize)]
pub struct PredictOutput {
    pub checkpoint_sha256: String,
    pub data_sha256: String,
    pub model: polyrnn::model::ModelConfig,
    pub predictions: Vec<PredictedPolygon>,
    /// Instances whose polygon collapses on the grid.
    pub skipped: Vec<String>,
}

pub fn predict(a: &PredictArgs, exec: Exec) -> Result<()> {
    let (models, checkpoint_sha256) = load_models(&a.checkpoint)?;
    let records = load_data(&a.data)?;
    let ids = instance_ids(&records);
    let results = exec.map_indexed(&records, |i, rec| -> Result<Vec<PredictedPolygon>> {
        let mut out = Vec::new();
        for c in 0..rec.components.len() {
            let ex = eval_example(&models, rec, c)?;
            let p = predict_polygon(&models, &ex.crop, None)?;
            let poly = ex.tokens_to_image(&p.tokens, &models.config.grid);
            out.push(PredictedPolygon {
                instance_id: ids[i].clone(),
                image_id: rec.image_id.clone(),
                label: rec.label.clone(),
                component: c,
                polygon: poly.vertices().iter().map(|v| [v.x, v.y]).collect(),
                forced_close: p.forced_close,
            });
        }
        Ok(out)
    });
    let mut predictions = Vec::new();
    let mut skipped = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => predictions.extend(v),
            Err(e) => {
                log::warn!("{}: {e:#}", ids[i]);
                skipped.push(ids[i].clone());
            }
        }
    }
    write_json(
        &a.out,
        &PredictOutput {
            checkpoint_sha256,
            data_sha256: file_sha256(&a.data)?,
            model: models.config.clone(),
            predictions,
            skipped,
        },
    )
}

pub fn eval(a: &EvalArgs, exec: Exec) -> Result<()> {
    let models = a.checkpoint.as_deref().map(load_models).transpose()?;
    let records = load_data(&a.data)?;
    let opts = EvalOptions {
        dataset: format!("{} (sha256 {})", a.data.display(), file_sha256(&a.data)?),
        models: models.as_ref().map(|(m, _)| m),
        checkpoint_sha256: models.as_ref().map(|(_, h)| h.clone()),
        seed: None,
        thresholds: a.thresholds.clone(),
    };
    let report = evaluate(&records, &opts, exec)?;
    write_report(&a.out, &report, a.size_buckets)?;
    for r in &report.rows {
        log::info!("{}: overall {:.4}", r.method, r.overall);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct SimulateMeta {
    pub checkpoint_sha256: String,
    pub data_sha256: String,
    pub thresholds: Vec<Threshold>,
    pub n_instances: usize,
    pub n_skipped: usize,
}

pub fn simulate(a: &SimulateArgs, exec: Exec) -> Result<()> {
    if a.thresholds.is_empty() {
        bail!("--thresholds must name at least one threshold");
    }
    let (models, checkpoint_sha256) = load_models(&a.checkpoint)?;
    let records = load_data(&a.data)?;
    let (sims, skipped) = simulate_dataset(&models, &records, &a.thresholds, exec)?;
    let rows = curve_rows(&sims, &a.thresholds)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, curve_csv(&rows)).with_context(|| format!("writing {}", a.out.display()))?;
    write_json(
        &a.out.with_extension("json"),
        &SimulateMeta {
            checkpoint_sha256,
            data_sha256: file_sha256(&a.data)?,
            thresholds: a.thresholds.clone(),
            n_instances: sims.len(),
            n_skipped: skipped.len(),
        },
    )
}

pub fn serve(a: &ServeArgs) -> Result<()> {
    let models = match &a.checkpoint {
        Some(p) => match load_models(p) {
            Ok(m) => Some(m),
            Err(e) => {
                log::error!("{e:#}; sessions will answer 503");
                None
            }
        },
        None => {
            log::warn!("no --checkpoint; sessions will answer 503");
            None
        }
    };
    let config = ServiceConfig {
        store_path: a.store_path.clone(),
        session_ttl: Duration::from_secs(a.session_ttl),
    };
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .with_context(|| format!("bad listen address {}:{}", a.host, a.port))?;
    let state = AppState::new(models, &config);
    tokio::runtime::Runtime::new()?.block_on(polyrnn_service::serve(state, addr))?;
    Ok(())
}
