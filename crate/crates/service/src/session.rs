use std::time::{Instant, SystemTime, UNIX_EPOCH};

use image::RgbImage;
use polyrnn::annotsim::EVAL_CONTEXT;
use polyrnn::data::crop_box;
use polyrnn::gridcode::{dequantize, quantize, simplify_on_grid, GridToken};
use polyrnn::model::{DecodeSession, Models};
use polyrnn::polygeom::{AffineMap, BBox, Point2};
use serde::{Deserialize, Serialize};

use crate::ApiError;

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vertex {
    pub x: f64,
    pub y: f64,
}

impl From<Point2> for Vertex {
    fn from(p: Point2) -> Self {
        Vertex { x: p.x, y: p.y }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    /// Accepting steps.
    Active,
    /// The end token was committed; only `finish` remains.
    Closed,
    Finished,
}

/// What a client sees after each call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub status: Status,
    /// 1-based index of the pending token.
    pub step: usize,
    /// The pending vertex in image coordinates; absent once the model
    /// proposes (or the session commits) the end of the polygon.
    pub vertex: Option<Vertex>,
    pub cell: GridToken,
    /// Every token so far on the model grid, the pending one last.
    pub tokens: Vec<GridToken>,
    /// The pending token is the end token.
    pub closed: bool,
    /// Vertices so far in image coordinates, present when `closed`.
    pub polygon: Option<Vec<Vertex>>,
    pub clicks: usize,
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub created_at_ms: u64,
}

/// One persisted annotation, a line of the JSONL store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub session_id: String,
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: String,
    pub polygon: Vec<Vertex>,
    pub clicks: usize,
    pub checkpoint_sha256: Option<String>,
    pub created_at_ms: u64,
    pub finished_at_ms: u64,
}

/// A replacement for the pending token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Correction {
    Point(Vertex),
    /// Close the polygon here.
    Close,
}

pub struct Session {
    pub id: String,
    pub image_id: String,
    pub label: String,
    pub bbox: BBox,
    transform: AffineMap,
    decode: DecodeSession,
    pub clicks: usize,
    pub status: Status,
    pub created_at_ms: u64,
    pub last_used: Instant,
}

/// Checks that `b` is a valid box with positive area inside a `w × h` image.
pub fn check_box(b: &BBox, w: u32, h: u32) -> Result<(), ApiError> {
    b.validate()
        .map_err(|e| ApiError::bad_request(format!("invalid box: {e}")))?;
    let inside = b.x_min >= 0.0 && b.y_min >= 0.0 && b.x_max <= w as f64 && b.y_max <= h as f64;
    if !inside || b.width() <= 0.0 || b.height() <= 0.0 {
        return Err(ApiError::bad_request(format!(
            "box ({}, {}, {}, {}) is not inside the {w}×{h} image",
            b.x_min, b.y_min, b.x_max, b.y_max
        )));
    }
    Ok(())
}

impl Session {
    /// Crops the box with the standard context and predicts the first vertex.
    pub fn start(
        id: String,
        image_id: String,
        image: &RgbImage,
        bbox: BBox,
        label: String,
        models: &Models,
    ) -> Result<Self, ApiError> {
        check_box(&bbox, image.width(), image.height())?;
        let (crop, transform) = crop_box(image, &bbox, EVAL_CONTEXT, &models.config.grid);
        Ok(Session {
            id,
            image_id,
            label,
            bbox,
            transform,
            decode: DecodeSession::start(models, &crop),
            clicks: 0,
            status: Status::Active,
            created_at_ms: now_ms(),
            last_used: Instant::now(),
        })
    }

    pub fn tokens(&self) -> &[GridToken] {
        self.decode.tokens()
    }

    fn to_image(&self, t: GridToken, models: &Models) -> Option<Vertex> {
        dequantize(t, &models.config.grid)
            .ok()
            .map(|p| self.transform.inverse(p).into())
    }

    fn polygon(&self, cells: &[GridToken], models: &Models) -> Vec<Vertex> {
        cells.iter().filter_map(|&t| self.to_image(t, models)).collect()
    }

    pub fn view(&self, models: &Models) -> SessionView {
        let cell = self.decode.current();
        let closed = cell.is_eos();
        SessionView {
            session_id: self.id.clone(),
            status: self.status,
            step: self.decode.step(),
            vertex: self.to_image(cell, models),
            cell,
            tokens: self.decode.tokens().to_vec(),
            closed,
            polygon: closed.then(|| self.polygon(self.decode.cells(), models)),
            clicks: self.clicks,
            label: self.label.clone(),
            bbox: self.bbox,
            created_at_ms: self.created_at_ms,
        }
    }

    fn require_active(&self) -> Result<(), ApiError> {
        match self.status {
            Status::Active => Ok(()),
            Status::Closed => Err(ApiError::conflict("the polygon is closed; finish the session")),
            Status::Finished => Err(ApiError::conflict("session is finished")),
        }
    }

    /// Optionally replaces the pending token, with the cell under a point
    /// given in image coordinates or with the end token, then commits it and
    /// predicts the next one.
    pub fn step(&mut self, correction: Option<Correction>, models: &Models) -> Result<SessionView, ApiError> {
        self.require_active()?;
        if let Some(c) = correction {
            let token = match c {
                Correction::Point(v) => {
                    if !(v.x.is_finite() && v.y.is_finite()) {
                        return Err(ApiError::bad_request("correction must be finite"));
                    }
                    quantize(self.transform.forward(Point2::new(v.x, v.y)), &models.config.grid)
                }
                Correction::Close => GridToken::Eos,
            };
            self.decode
                .replace_current(token)
                .map_err(|e| ApiError::conflict(e.to_string()))?;
            self.clicks += 1;
        }
        if self
            .decode
            .advance(models)
            .map_err(|e| ApiError::conflict(e.to_string()))?
            .is_none()
        {
            self.status = Status::Closed;
        }
        Ok(self.view(models))
    }

    /// Ends the session. The polygon is every emitted cell including a
    /// pending one, simplified on the grid and mapped to image coordinates.
    pub fn finish(
        &mut self,
        models: &Models,
        checkpoint_sha256: Option<String>,
    ) -> Result<AnnotationRecord, ApiError> {
        if self.status == Status::Finished {
            return Err(ApiError::conflict("session is finished"));
        }
        let cells = simplify_on_grid(self.decode.cells())
            .map_err(|e| ApiError::unprocessable(format!("polygon needs at least 3 vertices: {e}")))?;
        self.status = Status::Finished;
        Ok(AnnotationRecord {
            session_id: self.id.clone(),
            image_id: self.image_id.clone(),
            bbox: self.bbox,
            label: self.label.clone(),
            polygon: self.polygon(&cells, models),
            clicks: self.clicks,
            checkpoint_sha256,
            created_at_ms: self.created_at_ms,
            finished_at_ms: now_ms(),
        })
    }
}
