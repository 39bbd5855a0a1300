use image::RgbImage;
use nn::Tensor;
use polyrnn_nn as nn;
use rand::Rng;

use super::InstanceRecord;
use crate::gridcode::{dequantize, target_sequence, GridConfig, GridError, GridToken};
use crate::polygeom::{expand_box, AffineMap, BBox, Point2, Polygon};

/// A canonical crop and its token targets, ready for the networks.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    /// 3 × S × S with values `v/255 − 0.5`.
    pub crop: Tensor,
    /// Ground-truth cells followed by a single end-of-sequence token.
    pub target: Vec<GridToken>,
    /// Image → canonical map of the (unflipped) crop.
    pub transform: AffineMap,
    /// The crop and target are mirrored left-right.
    pub flipped: bool,
    pub image_id: String,
    pub component: usize,
}

impl TrainingExample {
    /// Canonical crop point → image coordinates, undoing the flip.
    pub fn to_image(&self, p: Point2, cfg: &GridConfig) -> Point2 {
        let q = if self.flipped {
            Point2::new(cfg.canonical_size as f64 - p.x, p.y)
        } else {
            p
        };
        self.transform.inverse(q)
    }

    /// Image point → canonical crop coordinates (with the flip applied).
    pub fn to_canonical(&self, p: Point2, cfg: &GridConfig) -> Point2 {
        let q = self.transform.forward(p);
        if self.flipped {
            Point2::new(cfg.canonical_size as f64 - q.x, q.y)
        } else {
            q
        }
    }

    /// Cell centers of `tokens` (end-of-sequence ignored) in image coordinates.
    pub fn tokens_to_image(&self, tokens: &[GridToken], cfg: &GridConfig) -> Polygon {
        Polygon::new(
            tokens
                .iter()
                .filter_map(|&t| dequantize(t, cfg).ok())
                .map(|p| self.to_image(p, cfg))
                .collect(),
        )
    }

    /// Ground-truth cells without the trailing end-of-sequence token.
    pub fn target_cells(&self) -> &[GridToken] {
        &self.target[..self.target.len() - 1]
    }
}

/// The three random choices applied to a training instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub flip: bool,
    /// Context expansion, in `[0.10, 0.20]` when sampled.
    pub context: f64,
    /// Start offset into the cell cycle (taken modulo its length).
    pub start: usize,
}

impl Augmentation {
    pub const NONE: Augmentation = Augmentation {
        flip: false,
        context: 0.15,
        start: 0,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Augmentation {
            flip: rng.random_bool(0.5),
            context: rng.random_range(0.10..=0.20),
            start: rng.random_range(0..1 << 16),
        }
    }
}

/// Bilinear resampling of the image region under `transform` into a
/// 3 × size × size tensor. Samples beyond the border repeat the edge pixel.
pub fn resample_crop(img: &RgbImage, transform: &AffineMap, size: usize) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let mut out = vec![0.0; 3 * size * size];
    let plane = size * size;
    let taps = |coord: f64, n: usize| {
        let c = (coord - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, c - i0 as f64)
    };
    let xs: Vec<_> = (0..size)
        .map(|u| taps(transform.inverse(Point2::new(u as f64 + 0.5, 0.0)).x, w))
        .collect();
    for v in 0..size {
        let (y0, y1, fy) = taps(transform.inverse(Point2::new(0.0, v as f64 + 0.5)).y, h);
        for (u, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..3 {
                let px = |x: usize, y: usize| raw[(y * w + x) * 3 + ch] as f64;
                let top = px(x0, y0) * (1.0 - fx) + px(x1, y0) * fx;
                let bot = px(x0, y1) * (1.0 - fx) + px(x1, y1) * fx;
                out[ch * plane + v * size + u] = (top * (1.0 - fy) + bot * fy) / 255.0 - 0.5;
            }
        }
    }
    Tensor::from_vec(&[3, size, size], out).expect("length matches shape")
}

/// Canonical crop around `tight` expanded by `context`, and its transform.
pub fn crop_box(img: &RgbImage, tight: &BBox, context: f64, cfg: &GridConfig) -> (Tensor, AffineMap) {
    let crop_box = expand_box(tight, context, img.width() as usize, img.height() as usize);
    let transform = AffineMap::crop_transform(&crop_box, cfg.canonical_size);
    (resample_crop(img, &transform, cfg.canonical_size), transform)
}

fn build(
    rec: &InstanceRecord,
    component: usize,
    aug: &Augmentation,
    cfg: &GridConfig,
    max_steps: usize,
) -> Result<TrainingExample, GridError> {
    let poly = rec
        .components
        .get(component)
        .ok_or(GridError::Degenerate(0))?;
    let tight = poly.bounds().ok_or(GridError::Degenerate(poly.len()))?;
    let (mut crop, transform) = crop_box(&rec.image, &tight, aug.context, cfg);
    let s = cfg.canonical_size;
    let mut canonical = poly.map(|p| transform.forward(p));
    if aug.flip {
        for ch in 0..3 {
            for row in crop.channel_mut(ch).chunks_mut(s) {
                row.reverse();
            }
        }
        canonical = canonical.map(|p| Point2::new(s as f64 - p.x, p.y));
    }
    let mut target = target_sequence(&canonical, cfg, max_steps)?;
    let n = target.len() - 1;
    target[..n].rotate_left(aug.start % n);
    Ok(TrainingExample {
        crop,
        target,
        transform,
        flipped: aug.flip,
        image_id: rec.image_id.clone(),
        component,
    })
}

/// Deterministic example: crop with `context` expansion around the
/// component's tight box, no flip, sequence starting at the first vertex.
pub fn make_example(
    rec: &InstanceRecord,
    component: usize,
    context: f64,
    cfg: &GridConfig,
    max_steps: usize,
) -> Result<TrainingExample, GridError> {
    let aug = Augmentation {
        context,
        ..Augmentation::NONE
    };
    build(rec, component, &aug, cfg, max_steps)
}

/// Example under an explicit augmentation; see [`Augmentation::sample`].
pub fn augment(
    rec: &InstanceRecord,
    component: usize,
    aug: &Augmentation,
    cfg: &GridConfig,
    max_steps: usize,
) -> Result<TrainingExample, GridError> {
    build(rec, component, aug, cfg, max_steps)
}
