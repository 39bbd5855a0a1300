//! Conversion between continuous polygons in canonical crop coordinates and
//! the model's `D×D + 1` token space (one token per grid cell plus an
//! end-of-sequence token).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::polygeom::{Point2, Polygon};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("end-of-sequence token has no coordinates")]
    EosHasNoCell,
    #[error("polygon collapses to {0} grid cells (need at least 3)")]
    Degenerate(usize),
    #[error("invalid grid config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// D: cells per side of the prediction grid.
    pub grid_size: usize,
    /// Side of the square canonical crop, in pixels.
    pub canonical_size: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            grid_size: 28,
            canonical_size: 224,
        }
    }
}

impl GridConfig {
    pub fn new(grid_size: usize, canonical_size: usize) -> Result<Self, GridError> {
        let cfg = GridConfig {
            grid_size,
            canonical_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if self.grid_size < 2 {
            return Err(GridError::Config(format!("D = {} < 2", self.grid_size)));
        }
        if self.canonical_size == 0 || self.canonical_size % self.grid_size != 0 {
            return Err(GridError::Config(format!(
                "canonical size {} not a multiple of D = {}",
                self.canonical_size, self.grid_size
            )));
        }
        Ok(())
    }

    /// Canonical pixels per grid cell.
    pub fn stride(&self) -> usize {
        self.canonical_size / self.grid_size
    }

    pub fn cells(&self) -> usize {
        self.grid_size * self.grid_size
    }

    /// Number of output classes, `D² + 1`.
    pub fn num_tokens(&self) -> usize {
        self.cells() + 1
    }

    pub fn eos_index(&self) -> usize {
        self.cells()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridToken {
    Cell { row: usize, col: usize },
    Eos,
}

impl GridToken {
    pub const fn cell(row: usize, col: usize) -> Self {
        GridToken::Cell { row, col }
    }

    pub fn is_eos(&self) -> bool {
        matches!(self, GridToken::Eos)
    }

    pub fn row_col(&self) -> Option<(usize, usize)> {
        match *self {
            GridToken::Cell { row, col } => Some((row, col)),
            GridToken::Eos => None,
        }
    }

    /// Class index: `row·D + col` for cells, `D²` for end-of-sequence.
    pub fn index(&self, cfg: &GridConfig) -> usize {
        match *self {
            GridToken::Cell { row, col } => row * cfg.grid_size + col,
            GridToken::Eos => cfg.eos_index(),
        }
    }

    /// Inverse of [`GridToken::index`]; `None` past the end-of-sequence slot.
    pub fn from_index(i: usize, cfg: &GridConfig) -> Option<GridToken> {
        let d = cfg.grid_size;
        match i.cmp(&cfg.eos_index()) {
            std::cmp::Ordering::Less => Some(GridToken::cell(i / d, i % d)),
            std::cmp::Ordering::Equal => Some(GridToken::Eos),
            std::cmp::Ordering::Greater => None,
        }
    }
}

/// Cell containing `p` (floor division by the stride); points outside the
/// canonical square are clamped to the nearest cell.
pub fn quantize(p: Point2, cfg: &GridConfig) -> GridToken {
    let s = cfg.stride() as f64;
    let max = (cfg.grid_size - 1) as f64;
    let clamp = |v: f64| {
        if v.is_nan() {
            0
        } else {
            (v / s).floor().clamp(0.0, max) as usize
        }
    };
    GridToken::cell(clamp(p.y), clamp(p.x))
}

/// Center of a cell in canonical coordinates.
pub fn dequantize(t: GridToken, cfg: &GridConfig) -> Result<Point2, GridError> {
    let (row, col) = t.row_col().ok_or(GridError::EosHasNoCell)?;
    let s = cfg.stride() as f64;
    Ok(Point2::new((col as f64 + 0.5) * s, (row as f64 + 0.5) * s))
}

/// L∞ distance between two cells.
pub fn chessboard(a: GridToken, b: GridToken) -> Result<usize, GridError> {
    let (ra, ca) = a.row_col().ok_or(GridError::EosHasNoCell)?;
    let (rb, cb) = b.row_col().ok_or(GridError::EosHasNoCell)?;
    Ok(ra.abs_diff(rb).max(ca.abs_diff(cb)))
}

/// Zero-error simplification of a closed cell polygon: drops repeated cells
/// (including last-vs-first) and every cell lying strictly between its two
/// neighbours on a straight line. The traced outline is unchanged.
pub fn simplify_on_grid(cells: &[GridToken]) -> Result<Vec<GridToken>, GridError> {
    let mut pts: Vec<(i64, i64)> = Vec::with_capacity(cells.len());
    for t in cells {
        let (r, c) = t.row_col().ok_or(GridError::EosHasNoCell)?;
        pts.push((r as i64, c as i64));
    }
    loop {
        let before = pts.len();
        pts.dedup();
        while pts.len() > 1 && pts.first() == pts.last() {
            pts.pop();
        }
        if pts.len() >= 3 {
            let n = pts.len();
            if let Some(i) = (0..n).find(|&i| {
                let a = pts[(i + n - 1) % n];
                let b = pts[i];
                let c = pts[(i + 1) % n];
                let (d1, d2) = ((b.0 - a.0, b.1 - a.1), (c.0 - b.0, c.1 - b.1));
                d1.0 * d2.1 - d1.1 * d2.0 == 0 && d1.0 * d2.0 + d1.1 * d2.1 > 0
            }) {
                pts.remove(i);
            }
        }
        if pts.len() == before {
            break;
        }
    }
    if pts.len() < 3 {
        return Err(GridError::Degenerate(pts.len()));
    }
    Ok(pts
        .into_iter()
        .map(|(r, c)| GridToken::cell(r as usize, c as usize))
        .collect())
}

/// Training target for one decoder step: weight `2^-d` on every cell within
/// chessboard distance 2 of the ground truth (clipped at the border),
/// normalized. End-of-sequence targets are one-hot.
pub fn smoothed_target(gt: GridToken, cfg: &GridConfig) -> Vec<f64> {
    let mut probs = vec![0.0; cfg.num_tokens()];
    let Some((r0, c0)) = gt.row_col() else {
        probs[cfg.eos_index()] = 1.0;
        return probs;
    };
    let d = cfg.grid_size as i64;
    let mut total = 0.0;
    for dr in -2i64..=2 {
        for dc in -2i64..=2 {
            let (r, c) = (r0 as i64 + dr, c0 as i64 + dc);
            if r < 0 || c < 0 || r >= d || c >= d {
                continue;
            }
            let w = 0.5f64.powi(dr.abs().max(dc.abs()) as i32);
            probs[(r * d + c) as usize] = w;
            total += w;
        }
    }
    for p in &mut probs {
        *p /= total;
    }
    probs
}

/// Quantizes and simplifies a clockwise polygon in canonical coordinates and
/// appends end-of-sequence. Sequences longer than `max_steps` tokens keep
/// their first `max_steps - 1` cells.
pub fn target_sequence(
    poly: &Polygon,
    cfg: &GridConfig,
    max_steps: usize,
) -> Result<Vec<GridToken>, GridError> {
    let cw = poly
        .normalize_clockwise()
        .map_err(|_| GridError::Degenerate(poly.len()))?;
    let cells: Vec<GridToken> = cw.vertices().iter().map(|&p| quantize(p, cfg)).collect();
    let mut seq = simplify_on_grid(&cells)?;
    seq.truncate(max_steps.max(4) - 1);
    seq.push(GridToken::Eos);
    Ok(seq)
}

/// Ground-truth maps for the first-vertex network, each `D×D` row-major with
/// 1.0 on set cells: the polygon outline (Bresenham lines between
/// consecutive cells, closed) and the vertex cells themselves.
pub fn boundary_vertex_maps(cells: &[GridToken], cfg: &GridConfig) -> (Vec<f64>, Vec<f64>) {
    let d = cfg.grid_size;
    let mut boundary = vec![0.0; d * d];
    let mut vertex = vec![0.0; d * d];
    let pts: Vec<(usize, usize)> = cells.iter().filter_map(|t| t.row_col()).collect();
    for (i, &(r, c)) in pts.iter().enumerate() {
        vertex[r * d + c] = 1.0;
        let (r1, c1) = pts[(i + 1) % pts.len()];
        for (rr, cc) in bresenham((r as i64, c as i64), (r1 as i64, c1 as i64)) {
            boundary[rr as usize * d + cc as usize] = 1.0;
        }
    }
    (boundary, vertex)
}

/// Cells on the Bresenham line from `a` to `b`, endpoints included.
pub fn bresenham(a: (i64, i64), b: (i64, i64)) -> Vec<(i64, i64)> {
    let (mut r, mut c) = a;
    let dr = (b.0 - a.0).abs();
    let dc = -(b.1 - a.1).abs();
    let sr = if a.0 < b.0 { 1 } else { -1 };
    let sc = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dr + dc;
    let mut out = Vec::with_capacity((dr - dc + 1) as usize);
    loop {
        out.push((r, c));
        if (r, c) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dc {
            err += dc;
            r += sr;
        }
        if e2 <= dr {
            err += dr;
            c += sc;
        }
    }
    out
}

/// The cell polygon as a [`Polygon`] through cell centers, in grid units
/// (one unit per cell). Rasterizing it on a `D×D` raster gives the grid
/// region it covers.
pub fn cells_to_grid_polygon(cells: &[GridToken]) -> Polygon {
    Polygon::new(
        cells
            .iter()
            .filter_map(|t| t.row_col())
            .map(|(r, c)| Point2::new(c as f64 + 0.5, r as f64 + 0.5))
            .collect(),
    )
}
