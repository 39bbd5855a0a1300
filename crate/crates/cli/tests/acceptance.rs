//! One PASS/FAIL line per acceptance criterion.
//!
//! The desk-scale criteria need a trained model. The run lives in
//! `target/desk` (override with `POLYRNN_DESK_DIR`); when it is missing or
//! was trained with a different `configs/desk.json`, this test generates the
//! data and trains it first, which takes about two hours on one core.
//!
//! Criteria are reported, not asserted: a FAIL line leaves the test green so
//! the rest of the report is still produced. Harness errors do panic.
//!
//! Built with `harness = false`, so the report always reaches stdout.

use std::fmt::Write as _;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::time::Instant;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use polyrnn::annotsim::{
    eval_example, simulate, simulate_dataset, curve_rows, speedup, SimulatedAnnotator, Threshold,
};
use polyrnn::data::{synth_shapes, InstanceRecord, SynthConfig};
use polyrnn::evalbench::squarebox;
use polyrnn::gridcode::{
    cells_to_grid_polygon, chessboard, dequantize, simplify_on_grid, smoothed_target, GridConfig, GridToken,
};
use polyrnn::model::{
    gradcheck, load_checkpoint, predict_polygon, CorrectionSource, ModelConfig, Models, TrainConfig, Trainer,
};
use polyrnn::polygeom::{iou, rasterize, BBox, BinaryMask, Point2, Polygon};
use polyrnn::Exec;
use polyrnn_cli::{RunConfig, TrainArgs};
use polyrnn_nn::{convlstm_step, ConvLstmState, ConvLstmWeights, Tensor};
use polyrnn_service::{router, AppState, ServiceConfig, SessionView};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Report {
    lines: Vec<String>,
    failed: usize,
}

impl Report {
    fn check(&mut self, name: &str, pass: bool, detail: String) {
        let tag = if pass { "PASS" } else { "FAIL" };
        if !pass {
            self.failed += 1;
        }
        let line = format!("{tag} {name}: {detail}");
        println!("{line}");
        self.lines.push(line);
    }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// ---------------------------------------------------------------- gradients

fn gradient_suite(r: &mut Report) {
    let start = Instant::now();
    let mut ops: f64 = 0.0;
    for seed in 0..20 {
        for (_, e) in polyrnn_nn::gradcheck::suite::run(seed) {
            ops = ops.max(e);
        }
    }
    let (mut e2e, mut checked, mut skipped) = (0.0f64, 0, 0);
    for seed in 0..20 {
        let c = gradcheck::end_to_end_case(seed);
        e2e = e2e.max(c.max_rel_err);
        checked += c.checked;
        skipped += c.kinks + c.unresolved;
    }
    let secs = start.elapsed().as_secs_f64();
    r.check(
        "gradient suite",
        ops < 1e-6 && e2e < 1e-4 && skipped * 10 < checked && secs < 120.0,
        format!(
            "ops max rel {ops:.2e} (< 1e-6), end-to-end max rel {e2e:.2e} (< 1e-4) over 20 seeds, \
             {checked} coordinates ({skipped} skipped at kinks or below resolution), {secs:.1} s (< 120 s)"
        ),
    );
}

fn convlstm_algebra(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (cin, hid, h, w) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..7), rng.random_range(1..7));
        let rand_t = |rng: &mut ChaCha8Rng, shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
        };
        let x = rand_t(&mut rng, &[cin, h, w]);
        let state = ConvLstmState {
            h: rand_t(&mut rng, &[hid, h, w]),
            c: rand_t(&mut rng, &[hid, h, w]),
        };
        let next = convlstm_step(&x, &state, &ConvLstmWeights::zeros(cin, hid, 3)).unwrap();
        for (i, &c) in state.c.data().iter().enumerate() {
            worst = worst.max((next.c.data()[i] - 0.5 * c).abs());
            worst = worst.max((next.h.data()[i] - 0.5 * (0.5 * c).tanh()).abs());
        }
    }
    r.check(
        "convlstm zero-weight algebra",
        worst <= 1e-12,
        format!("max |c' - c/2|, |h' - tanh(c/2)/2| = {worst:.1e} (<= 1e-12) over 20 random shapes"),
    );
}

// ----------------------------------------------------------------- geometry

fn point_in_polygon(v: &[Point2], px: f64, py: f64) -> bool {
    let mut inside = false;
    for i in 0..v.len() {
        let (a, b) = (v[i], v[(i + 1) % v.len()]);
        if (a.y > py) != (b.y > py) && px < a.x + (py - a.y) * (b.x - a.x) / (b.y - a.y) {
            inside = !inside;
        }
    }
    inside
}

fn geometry_oracle(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut raster_ok = 0;
    for _ in 0..200 {
        let (w, h) = (rng.random_range(8..64usize), rng.random_range(8..64usize));
        let n = rng.random_range(3..14);
        let poly = Polygon::new(
            (0..n)
                .map(|_| {
                    let x = rng.random_range(-8..(4 * w as i32 + 8)) as f64 / 4.0;
                    let y = rng.random_range(-8..(4 * h as i32 + 8)) as f64 / 4.0;
                    Point2::new(x, y)
                })
                .collect(),
        );
        let mut oracle = BinaryMask::new(w, h);
        for y in 0..h {
            for x in 0..w {
                oracle.set(x, y, point_in_polygon(poly.vertices(), x as f64 + 0.5, y as f64 + 0.5));
            }
        }
        raster_ok += usize::from(rasterize(&poly, w, h) == oracle);
    }
    let (mut simp_ok, mut simp_n) = (0, 0);
    for _ in 0..200 {
        let n = rng.random_range(3..40);
        let cells: Vec<GridToken> =
            (0..n).map(|_| GridToken::cell(rng.random_range(0..28), rng.random_range(0..28))).collect();
        let Ok(s) = simplify_on_grid(&cells) else { continue };
        simp_n += 1;
        let raster = |c: &[GridToken]| rasterize(&cells_to_grid_polygon(c), 28, 28);
        simp_ok += usize::from(simplify_on_grid(&s).unwrap() == s && raster(&s) == raster(&cells));
    }
    r.check(
        "geometry oracle",
        raster_ok == 200 && simp_ok == simp_n && simp_n > 100,
        format!(
            "rasterize == point-in-polygon on {raster_ok}/200 polygons; simplify raster-preserving and \
             idempotent on {simp_ok}/{simp_n} simplifiable cell lists"
        ),
    );
}

// --------------------------------------------------------------- model-level

fn loss_sanity(r: &mut Report) {
    let cfg = ModelConfig::default();
    let zero = Models::zeros(&cfg).unwrap();
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for rec in synth_shapes(3, 50, &SynthConfig::default(), Exec::Parallel) {
        let Ok(ex) = eval_example(&zero, &rec, 0) else { continue };
        let (loss, _) = zero.rnn.teacher_forced(&ex.crop, &ex.target, None, false).unwrap();
        worst = worst.max((loss - 785f64.ln()).abs());
        n += 1;
    }
    r.check(
        "zero-weight loss",
        worst <= 1e-6 && n > 0,
        format!("max |loss - ln 785| = {worst:.1e} (<= 1e-6) over {n} instances"),
    );
}

struct Override(Vec<GridToken>);

impl CorrectionSource for Override {
    fn correct(&mut self, step: usize, predicted: GridToken, _: &[GridToken]) -> Option<GridToken> {
        let want = self.0[step - 1];
        (predicted != want).then_some(want)
    }
}

fn oracle_equivalence(r: &mut Report) {
    let m = Models::init(&ModelConfig::default(), 13).unwrap();
    let recs = synth_shapes(100, 100, &SynthConfig::default(), Exec::Parallel);
    let results = Exec::Parallel.map(&recs, |rec| {
        let ex = eval_example(&m, rec, 0).unwrap();
        let sim = simulate(&m, rec, 0, Threshold::Cells(0)).unwrap();
        let mut src = Override(ex.target.clone());
        let p = predict_polygon(&m, &ex.crop, Some(&mut src)).unwrap();
        (sim.tokens == ex.target, p.tokens == ex.target)
    });
    let sim_ok = results.iter().filter(|r| r.0).count();
    let gt_ok = results.iter().filter(|r| r.1).count();
    r.check(
        "oracle equivalence",
        sim_ok == 100 && gt_ok == 100,
        format!("T=0 reproduces the target on {sim_ok}/100, full GT override on {gt_ok}/100"),
    );
}

// -------------------------------------------------------------------- desk

struct DeskRun {
    models: Models,
    train_seconds: f64,
    epochs: usize,
}

fn desk_run() -> DeskRun {
    let root = workspace();
    let config_path = root.join("configs/desk.json");
    let dir = std::env::var_os("POLYRNN_DESK_DIR").map_or_else(|| root.join("target/desk"), PathBuf::from);
    let out = dir.join("run");
    let wanted = RunConfig::load(&config_path).unwrap();
    let cached: Option<Value> = fs::read_to_string(out.join("run.json"))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok());
    let fresh = cached.as_ref().is_some_and(|v| {
        v["config"]["model"] == serde_json::to_value(&wanted.model).unwrap()
            && v["config"]["train"] == serde_json::to_value(&wanted.train).unwrap()
    });
    if !fresh {
        println!("training the desk model into {} (about two hours)", out.display());
        let train = dir.join("train.json");
        polyrnn_cli::synth(
            &polyrnn_cli::SynthArgs {
                seed: 1,
                n: 1000,
                out: train.clone(),
                config: Some(config_path.clone()),
                image_size: None,
            },
            Exec::Parallel,
        )
        .unwrap();
        polyrnn_cli::train(
            &TrainArgs {
                config: Some(config_path),
                data: Some(train),
                out: out.clone(),
                epochs: None,
                lr: None,
                batch_size: None,
                seed: None,
            },
            Exec::Parallel,
        )
        .unwrap();
    }
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    let epochs = summary["epochs"].as_array().unwrap();
    let (models, _) = load_checkpoint(&out.join("checkpoint.bin")).unwrap();
    DeskRun {
        models,
        train_seconds: epochs.iter().map(|e| e["seconds"].as_f64().unwrap()).sum(),
        epochs: epochs.len(),
    }
}

fn held_out() -> Vec<InstanceRecord> {
    synth_shapes(2, 200, &SynthConfig::default(), Exec::Parallel)
}

/// Mean over steps of the smoothed target's entropy: the least teacher-forced
/// loss any model can reach on this sequence.
fn entropy_floor(target: &[GridToken], grid: &GridConfig) -> f64 {
    let steps = &target[1..];
    let h: f64 = steps
        .iter()
        .map(|&g| {
            smoothed_target(g, grid)
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum::<f64>()
        })
        .sum();
    h / steps.len() as f64
}

fn overfit(r: &mut Report) {
    let cfg = ModelConfig::default();
    let recs = synth_shapes(10, 10, &SynthConfig::default(), Exec::Parallel);
    let tc = TrainConfig {
        epochs: 300,
        augment: false,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let mut t = Trainer::new(&cfg, tc).unwrap();
    let metrics = t.run(&recs, Exec::Parallel, |_| {}).unwrap();
    let initial = metrics[0].rnn_loss;
    let mut losses = Vec::new();
    let mut floors = Vec::new();
    for rec in &recs {
        let Ok(ex) = eval_example(&t.models, rec, 0) else { continue };
        losses.push(t.models.rnn.teacher_forced(&ex.crop, &ex.target, None, false).unwrap().0);
        floors.push(entropy_floor(&ex.target, &cfg.grid));
    }
    let n = losses.len() as f64;
    let last = losses.iter().sum::<f64>() / n;
    let floor = floors.iter().sum::<f64>() / n;
    let ratio = last / initial;
    r.check(
        "desk overfit (10 instances, 300 epochs)",
        ratio < 0.10,
        format!(
            "teacher-forced loss {initial:.4} -> {last:.4} = {:.1}% of initial (< 10%); the smoothed-target \
             entropy floor is {floor:.4} = {:.1}% of initial, excess over the floor fell to {:.1}%; {:.0} s",
            100.0 * ratio,
            100.0 * floor / initial,
            100.0 * (last - floor) / (initial - floor),
            start.elapsed().as_secs_f64()
        ),
    );
}

fn desk(r: &mut Report) -> Models {
    let run = desk_run();
    let m = &run.models;
    let test = held_out();
    let ts = [Threshold::Never, Threshold::Cells(1), Threshold::Cells(2), Threshold::Cells(3), Threshold::Cells(4)];
    let (sims, skipped) = simulate_dataset(m, &test, &ts, Exec::Parallel).unwrap();
    let rows = curve_rows(&sims, &ts).unwrap();
    let (auto, t1) = (rows[0].mean_iou, rows[1].mean_iou);
    r.check(
        "desk training",
        auto >= 0.70 && t1 >= 0.85 && run.train_seconds < 7200.0,
        format!(
            "held-out automatic IoU {auto:.4} (>= 0.70), T=1 IoU {t1:.4} at {:.2} clicks (>= 0.85), \
             {} instances ({} skipped), trained {} epochs in {:.0} s (< 7200 s)",
            rows[1].mean_clicks,
            sims.len(),
            skipped.len(),
            run.epochs,
            run.train_seconds
        ),
    );

    let curve = &rows[1..];
    let clicks_ok = curve.windows(2).all(|w| w[1].mean_clicks <= w[0].mean_clicks);
    let iou_ok = curve.windows(2).all(|w| w[1].mean_iou <= w[0].mean_iou);
    let ceiling_ok = curve.iter().all(|c| c.mean_iou <= c.quantization_ceiling + 0.02);
    let mut table = String::new();
    for c in curve {
        let _ = write!(table, "T={} clicks {:.2} IoU {:.4}; ", c.threshold, c.mean_clicks, c.mean_iou);
    }
    r.check(
        "annotator curve shape",
        clicks_ok && iou_ok && ceiling_ok,
        format!(
            "{table}ceiling {:.4}; clicks non-increasing {clicks_ok}, IoU non-increasing {iou_ok}, \
             IoU <= ceiling + 0.02 {ceiling_ok}",
            curve[0].quantization_ceiling
        ),
    );

    // Not a listed criterion; printed for context.
    let square = BBox::new(64.0, 64.0, 192.0, 192.0).unwrap();
    let img = image::RgbImage::from_fn(256, 256, |x, y| {
        let inside = (64..192).contains(&x) && (64..192).contains(&y);
        image::Rgb(if inside { [200, 60, 40] } else { [90, 110, 100] })
    });
    let rec = InstanceRecord::new("square", std::sync::Arc::new(img), "rectangle", vec![square.to_polygon()]).unwrap();
    let ex = eval_example(m, &rec, 0).unwrap();
    let fv = m.first_vertex.forward(&ex.crop).chosen(m.config.grid.grid_size);
    let d = ex.target_cells().iter().map(|&c| chessboard(c, fv).unwrap()).min().unwrap();
    println!("note: first vertex on a rendered square lies {d} cells (chessboard) from the nearest corner");
    run.models
}

// ---------------------------------------------------------------- arithmetic

fn speedups(r: &mut Report) {
    let a = speedup(33.56, 9.3).unwrap();
    let b = speedup(33.56, 4.6).unwrap();
    r.check(
        "speed-up arithmetic",
        (a - 3.61).abs() <= 0.01 && (b - 7.30).abs() <= 0.02,
        format!("speedup(33.56, 9.3) = {a:.4} (3.61 +- 0.01), speedup(33.56, 4.6) = {b:.4} (7.30 +- 0.02)"),
    );
}

fn squarebox_case(r: &mut Report) {
    let b = BBox::new(10.0, 10.0, 110.0, 110.0).unwrap();
    let rec = InstanceRecord::new(
        "sq",
        std::sync::Arc::new(image::RgbImage::new(200, 200)),
        "thing",
        vec![b.to_polygon()],
    )
    .unwrap();
    let v = iou(&squarebox(&rec), &rasterize(&b.to_polygon(), 200, 200)).unwrap();
    r.check("squarebox", v == 0.64, format!("IoU {v} (exactly 0.64)"));
}

// ------------------------------------------------------------------ service

const BOUNDARY: &str = "acceptanceBoundary";

async fn call(app: &axum::Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&body).unwrap_or(Value::Null))
}

fn post(path: &str, body: Value) -> Request<Body> {
    Request::post(path)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn create(rec: &InstanceRecord, b: &BBox) -> Request<Body> {
    let mut png = Vec::new();
    rec.image.write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png).unwrap();
    let meta = json!({ "box": b, "label": rec.label });
    let mut body = format!(
        "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"i.png\"\r\n\
         Content-Type: image/png\r\n\r\n"
    )
    .into_bytes();
    body.extend_from_slice(&png);
    body.extend_from_slice(
        format!(
            "\r\n--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"meta\"\r\n\r\n{meta}\r\n--{BOUNDARY}--\r\n"
        )
        .as_bytes(),
    );
    Request::post("/v1/sessions")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap()
}

/// Replays the simulated annotator over HTTP. Returns (matching runs, runs).
async fn replay(models: Models, thresholds: &[usize]) -> (usize, usize) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ServiceConfig {
        store_path: dir.path().join("store.jsonl"),
        ..ServiceConfig::default()
    };
    let app = router(AppState::new(Some((models.clone(), "replay".into())), &cfg));
    let grid = models.config.grid;
    let recs = synth_shapes(61, 10, &SynthConfig::default(), Exec::Sequential);
    let (mut ok, mut n) = (0, 0);
    for rec in &recs {
        let Ok(ex) = eval_example(&models, rec, 0) else { continue };
        for &t in thresholds {
            n += 1;
            let threshold = Threshold::Cells(t);
            let mut oracle = SimulatedAnnotator::new(&ex.target, threshold);
            let lib = predict_polygon(&models, &ex.crop, Some(&mut oracle)).unwrap();
            let annotator = SimulatedAnnotator::new(&ex.target, threshold);
            let (s, v) = call(&app, create(rec, &rec.components[0].bounds().unwrap())).await;
            assert_eq!(s, StatusCode::CREATED, "{v}");
            let mut view: SessionView = serde_json::from_value(v).unwrap();
            while view.status == polyrnn_service::Status::Active {
                let body = match annotator.decide(view.step, view.cell) {
                    None => json!({}),
                    Some(GridToken::Eos) => json!({ "close": true }),
                    Some(g) => {
                        let p = ex.to_image(dequantize(g, &grid).unwrap(), &grid);
                        json!({ "correction": { "x": p.x, "y": p.y } })
                    }
                };
                let (s, v) = call(&app, post(&format!("/v1/sessions/{}/step", view.session_id), body)).await;
                assert_eq!(s, StatusCode::OK, "{v}");
                view = serde_json::from_value(v).unwrap();
            }
            let (_, fin) = call(&app, post(&format!("/v1/sessions/{}/finish", view.session_id), json!({"accept": false}))).await;
            let expect: Vec<[f64; 2]> = simplify_on_grid(lib.cells())
                .map(|c| ex.tokens_to_image(&c, &grid).vertices().iter().map(|p| [p.x, p.y]).collect())
                .unwrap_or_default();
            let got: Vec<[f64; 2]> = fin["record"]["polygon"]
                .as_array()
                .map(|a| a.iter().map(|v| [v["x"].as_f64().unwrap(), v["y"].as_f64().unwrap()]).collect())
                .unwrap_or_default();
            let same_polygon = got.iter().zip(&expect).all(|(a, b)| a[0].to_bits() == b[0].to_bits() && a[1].to_bits() == b[1].to_bits())
                && got.len() == expect.len();
            ok += usize::from(view.tokens == lib.tokens && view.clicks == lib.corrections && same_polygon);
        }
    }
    (ok, n)
}

fn service_equivalence(r: &mut Report, models: Models) {
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    let (ok, n) = rt.block_on(replay(models, &[0, 1, 3]));
    r.check(
        "service equivalence",
        ok == n && n > 0,
        format!("{ok}/{n} scripted HTTP replays bit-identical to in-process prediction (tokens, clicks, polygon)"),
    );
}

fn main() {
    // Runs without the libtest harness so the report is never captured.
    // Honor `--list` and name filters the way libtest would.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if args.iter().any(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str())) {
        return;
    }
    let mut r = Report {
        lines: Vec::new(),
        failed: 0,
    };
    gradient_suite(&mut r);
    convlstm_algebra(&mut r);
    geometry_oracle(&mut r);
    loss_sanity(&mut r);
    oracle_equivalence(&mut r);
    overfit(&mut r);
    let models = desk(&mut r);
    speedups(&mut r);
    squarebox_case(&mut r);
    service_equivalence(&mut r, models);
    println!("acceptance: {} criteria, {} failed", r.lines.len(), r.failed);
}
