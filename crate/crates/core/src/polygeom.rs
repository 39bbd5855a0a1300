//! Polygon geometry in the y-down image frame: orientation, even-odd
//! rasterization, mask IoU, and the box/crop transforms between image and
//! canonical crop coordinates.
//!
//! "Clockwise" means clockwise as seen on screen, which in a y-down frame is a
//! positive shoelace sum.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("mask dimensions differ: {0}×{1} vs {2}×{3}")]
    MaskMismatch(usize, usize, usize, usize),
    #[error("invalid box ({0}, {1}, {2}, {3})")]
    InvalidBox(f64, f64, f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }
}

/// Closed polygon; the edge from the last vertex back to the first is
/// implicit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polygon {
    vertices: Vec<Point2>,
}

impl Polygon {
    pub fn new(vertices: Vec<Point2>) -> Self {
        Polygon { vertices }
    }

    pub fn from_xy(points: &[(f64, f64)]) -> Self {
        Polygon::new(points.iter().map(|&(x, y)| Point2::new(x, y)).collect())
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Half the shoelace sum over the closed cycle. Positive for clockwise
    /// polygons on screen.
    pub fn signed_area(&self) -> Result<f64, GeomError> {
        let n = self.vertices.len();
        if n < 3 {
            return Err(GeomError::TooFewVertices(n));
        }
        let mut s = 0.0;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            s += a.x * b.y - b.x * a.y;
        }
        Ok(0.5 * s)
    }

    /// Same boundary traced clockwise, keeping vertex 0 first.
    pub fn normalize_clockwise(&self) -> Result<Polygon, GeomError> {
        if self.signed_area()? >= 0.0 {
            return Ok(self.clone());
        }
        let mut v = Vec::with_capacity(self.vertices.len());
        v.push(self.vertices[0]);
        v.extend(self.vertices[1..].iter().rev());
        Ok(Polygon::new(v))
    }

    pub fn map(&self, f: impl Fn(Point2) -> Point2) -> Polygon {
        Polygon::new(self.vertices.iter().map(|&p| f(p)).collect())
    }

    /// Tight axis-aligned bounds, `None` for an empty polygon.
    pub fn bounds(&self) -> Option<BBox> {
        let first = self.vertices.first()?;
        let mut b = BBox {
            x_min: first.x,
            y_min: first.y,
            x_max: first.x,
            y_max: first.y,
        };
        for p in &self.vertices[1..] {
            b.x_min = b.x_min.min(p.x);
            b.y_min = b.y_min.min(p.y);
            b.x_max = b.x_max.max(p.x);
            b.y_max = b.y_max.max(p.y);
        }
        Some(b)
    }
}

/// Axis-aligned box in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeomError> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if finite && self.x_min < self.x_max && self.y_min < self.y_max {
            Ok(())
        } else {
            Err(GeomError::InvalidBox(self.x_min, self.y_min, self.x_max, self.y_max))
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> Point2 {
        Point2::new(0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    /// Same center, each side scaled by `factor`.
    pub fn scaled_about_center(&self, factor: f64) -> BBox {
        let c = self.center();
        let (hw, hh) = (0.5 * self.width() * factor, 0.5 * self.height() * factor);
        BBox {
            x_min: c.x - hw,
            y_min: c.y - hh,
            x_max: c.x + hw,
            y_max: c.y + hh,
        }
    }

    pub fn to_polygon(&self) -> Polygon {
        Polygon::from_xy(&[
            (self.x_min, self.y_min),
            (self.x_max, self.y_min),
            (self.x_max, self.y_max),
            (self.x_min, self.y_max),
        ])
    }
}

/// Grows every side by `factor / 2` of the box dimension, then clips to the
/// image `[0, image_w] × [0, image_h]`.
pub fn expand_box(b: &BBox, factor: f64, image_w: usize, image_h: usize) -> BBox {
    let (dx, dy) = (0.5 * factor * b.width(), 0.5 * factor * b.height());
    BBox {
        x_min: (b.x_min - dx).max(0.0),
        y_min: (b.y_min - dy).max(0.0),
        x_max: (b.x_max + dx).min(image_w as f64),
        y_max: (b.y_max + dy).min(image_h as f64),
    }
}

/// Axis-aligned scale + translate taking a box onto `[0, out_size)²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub origin: Point2,
    pub scale_x: f64,
    pub scale_y: f64,
}

impl AffineMap {
    pub fn crop_transform(b: &BBox, out_size: usize) -> AffineMap {
        AffineMap {
            origin: Point2::new(b.x_min, b.y_min),
            scale_x: out_size as f64 / b.width(),
            scale_y: out_size as f64 / b.height(),
        }
    }

    /// Image → canonical crop coordinates.
    pub fn forward(&self, p: Point2) -> Point2 {
        Point2::new(
            (p.x - self.origin.x) * self.scale_x,
            (p.y - self.origin.y) * self.scale_y,
        )
    }

    /// Canonical crop → image coordinates.
    pub fn inverse(&self, q: Point2) -> Point2 {
        Point2::new(
            q.x / self.scale_x + self.origin.x,
            q.y / self.scale_y + self.origin.y,
        )
    }
}

/// Row-major boolean raster.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BinaryMask({}×{}, {} set)", self.width, self.height, self.count())
    }
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Option<Self> {
        (bits.len() == width * height).then_some(BinaryMask {
            width,
            height,
            bits,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn union_with(&mut self, other: &BinaryMask) -> Result<(), GeomError> {
        self.check_dims(other)?;
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(())
    }

    fn check_dims(&self, other: &BinaryMask) -> Result<(), GeomError> {
        if self.width != other.width || self.height != other.height {
            return Err(GeomError::MaskMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    /// `|self ∩ other|` (also checks dimensions).
    pub fn intersection_count(&self, other: &BinaryMask) -> Result<usize, GeomError> {
        self.check_dims(other)?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count())
    }
}

/// Even-odd scanline fill sampled at pixel centers `(x + 0.5, y + 0.5)`.
///
/// An edge contributes to a scanline when exactly one endpoint lies strictly
/// below it (half-open rule), and a pixel is inside when an odd number of
/// crossings lie strictly to its right.
pub fn rasterize(poly: &Polygon, width: usize, height: usize) -> BinaryMask {
    let mut mask = BinaryMask::new(width, height);
    let v = poly.vertices();
    let n = v.len();
    if n < 3 || width == 0 || height == 0 {
        return mask;
    }
    let Some(bounds) = poly.bounds() else {
        return mask;
    };
    if !(bounds.y_max.is_finite() && bounds.y_min.is_finite()) {
        return mask;
    }
    let row_lo = ((bounds.y_min - 0.5).floor().max(0.0) as usize).min(height);
    let row_hi = ((bounds.y_max + 0.5).ceil().max(0.0) as usize).min(height);
    let mut xs: Vec<f64> = Vec::with_capacity(n);
    for row in row_lo..row_hi {
        let py = row as f64 + 0.5;
        xs.clear();
        for i in 0..n {
            let a = v[i];
            let b = v[(i + 1) % n];
            if (a.y > py) != (b.y > py) {
                xs.push(a.x + (py - a.y) * (b.x - a.x) / (b.y - a.y));
            }
        }
        xs.sort_by(|p, q| p.total_cmp(q));
        for span in xs.chunks_exact(2) {
            // Inside for span[0] <= px < span[1], px = col + 0.5.
            let (lo, hi) = (span[0], span[1]);
            let start = first_center_at_or_after(lo, width);
            let end = first_center_at_or_after(hi, width);
            for col in start..end {
                mask.bits[row * width + col] = true;
            }
        }
    }
    mask
}

/// Smallest column `c` in `[0, width]` with `c + 0.5 >= x`.
fn first_center_at_or_after(x: f64, width: usize) -> usize {
    if x.is_nan() || x <= 0.5 {
        return 0;
    }
    if x > width as f64 - 0.5 {
        return width;
    }
    let mut c = (x - 0.5).ceil() as usize;
    while c > 0 && (c - 1) as f64 + 0.5 >= x {
        c -= 1;
    }
    while (c as f64 + 0.5) < x {
        c += 1;
    }
    c
}

/// `|a ∩ b| / |a ∪ b|`; two empty masks agree perfectly (1.0).
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, GeomError> {
    let inter = a.intersection_count(b)?;
    let union = a.count() + b.count() - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}
