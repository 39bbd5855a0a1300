use std::f64::consts::{FRAC_PI_2, TAU};
use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::InstanceRecord;
use crate::exec::Exec;
use crate::polygeom::{rasterize, Point2, Polygon};

pub const SHAPE_LABELS: [&str; 3] = ["blob", "rectangle", "lshape"];

/// Parameters of the synthetic-shape generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    /// Range of the object's larger box side, in pixels.
    pub min_object: f64,
    pub max_object: f64,
    /// Inclusive vertex-count range for blobs.
    pub blob_vertices: (usize, usize),
    /// Standard deviation of per-pixel noise, in 0–255 units.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 256,
            min_object: 96.0,
            max_object: 208.0,
            blob_vertices: (8, 24),
            noise: 8.0,
        }
    }
}

const SUPERSAMPLE: usize = 4;

/// `n` single-object images. Instance `i` depends only on `(seed, i)`.
pub fn synth_shapes(seed: u64, n: usize, cfg: &SynthConfig, exec: Exec) -> Vec<InstanceRecord> {
    let idx: Vec<usize> = (0..n).collect();
    exec.map(&idx, |&i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        one_instance(&mut rng, i, cfg)
    })
}

fn one_instance(rng: &mut ChaCha8Rng, i: usize, cfg: &SynthConfig) -> InstanceRecord {
    let label = SHAPE_LABELS[rng.random_range(0..SHAPE_LABELS.len())];
    let size = rng.random_range(cfg.min_object..=cfg.max_object);
    let local = match label {
        "blob" => blob(rng, cfg.blob_vertices),
        "rectangle" => rectangle(rng),
        _ => lshape(rng),
    };
    // Scale so the larger box side equals `size`, then place fully inside.
    let b = local.bounds().expect("generator shapes are non-degenerate");
    let k = size / b.width().max(b.height());
    let (w, h) = (b.width() * k, b.height() * k);
    let s = cfg.image_size as f64;
    let margin = 2.0;
    let x0 = rng.random_range(margin..=(s - w - margin).max(margin));
    let y0 = rng.random_range(margin..=(s - h - margin).max(margin));
    let poly = local.map(|p| Point2::new(x0 + (p.x - b.x_min) * k, y0 + (p.y - b.y_min) * k));

    let image = render(rng, &poly, cfg);
    InstanceRecord::new(format!("synth_{i:06}"), Arc::new(image), label, vec![poly])
        .expect("generator shapes are non-degenerate")
}

fn rotate(points: &[(f64, f64)], angle: f64) -> Polygon {
    let (s, c) = angle.sin_cos();
    Polygon::new(
        points
            .iter()
            .map(|&(x, y)| Point2::new(c * x - s * y, s * x + c * y))
            .collect(),
    )
}

/// Star-convex blob: evenly spread angles with jitter, radii perturbed
/// around 1. Listed clockwise on screen (increasing angle, y down).
fn blob(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> Polygon {
    let n = rng.random_range(lo..=hi);
    let phase = rng.random_range(0.0..TAU);
    let aspect = rng.random_range(0.6..=1.0);
    let pts: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let a = phase + (k as f64 + rng.random_range(-0.3..0.3)) * TAU / n as f64;
            let r = rng.random_range(0.65..=1.0);
            (r * a.cos(), aspect * r * a.sin())
        })
        .collect();
    rotate(&pts, rng.random_range(0.0..TAU))
}

fn rectangle(rng: &mut ChaCha8Rng) -> Polygon {
    let a = rng.random_range(0.4..=1.0);
    rotate(
        &[(-1.0, -a), (1.0, -a), (1.0, a), (-1.0, a)],
        rng.random_range(0.0..FRAC_PI_2),
    )
}

fn lshape(rng: &mut ChaCha8Rng) -> Polygon {
    let tx = rng.random_range(0.35..=0.65);
    let ty = rng.random_range(0.35..=0.65);
    rotate(
        &[(0.0, 0.0), (tx, 0.0), (tx, 1.0 - ty), (1.0, 1.0 - ty), (1.0, 1.0), (0.0, 1.0)],
        rng.random_range(0.0..TAU),
    )
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [0; 3].map(|_| rng.random_range(20.0..=235.0))
}

/// Fraction of each pixel of an `n × n` image covered by `poly`, estimated
/// on a 4×4 grid of sub-pixel centers.
pub(crate) fn coverage(poly: &Polygon, n: usize) -> Vec<f64> {
    let ss = SUPERSAMPLE;
    let fine = rasterize(
        &poly.map(|p| Point2::new(p.x * ss as f64, p.y * ss as f64)),
        n * ss,
        n * ss,
    );
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let mut cover = 0usize;
            for dy in 0..ss {
                for dx in 0..ss {
                    cover += fine.get(x * ss + dx, y * ss + dy) as usize;
                }
            }
            out[y * n + x] = cover as f64 / (ss * ss) as f64;
        }
    }
    out
}

/// Anti-aliased fill of `poly` over a textured background.
fn render(rng: &mut ChaCha8Rng, poly: &Polygon, cfg: &SynthConfig) -> RgbImage {
    let n = cfg.image_size;
    let bg = random_color(rng);
    let fg = loop {
        let c = random_color(rng);
        let dist: f64 = c.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum();
        if dist >= 120.0 {
            break c;
        }
    };
    // Two low-frequency waves give the background some texture.
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            let a = rng.random_range(0.0..TAU);
            let f = rng.random_range(0.01..0.05);
            (f * a.cos(), f * a.sin(), rng.random_range(0.0..TAU), rng.random_range(5.0..20.0))
        })
        .collect();

    let alpha = coverage(poly, n);
    let noise = Normal::new(0.0, cfg.noise.max(1e-9)).expect("finite sigma");
    RgbImage::from_fn(n as u32, n as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let alpha = alpha[y * n + x];
        let tex: f64 = waves
            .iter()
            .map(|&(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin())
            .sum();
        let px = [0, 1, 2].map(|c| {
            let b = bg[c] + tex + noise.sample(rng);
            let f = fg[c] + noise.sample(rng);
            (alpha * f + (1.0 - alpha) * b).round().clamp(0.0, 255.0) as u8
        });
        Rgb(px)
    })
}
