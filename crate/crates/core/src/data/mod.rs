//! Instance records, the JSON + PNG dataset format, crops and augmentation,
//! and the synthetic-shape generator.

mod example;
mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::polygeom::{BBox, Point2, Polygon};

pub use example::{augment, crop_box, make_example, resample_crop, Augmentation, TrainingExample};
pub use synth::{synth_shapes, SynthConfig, SHAPE_LABELS};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed instance file {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("image {path} is {actual_w}×{actual_h}, file declares {width}×{height}")]
    ImageSize {
        path: PathBuf,
        width: u32,
        height: u32,
        actual_w: u32,
        actual_h: u32,
    },
    #[error("{0} contains no usable instances")]
    Empty(PathBuf),
    #[error("instance has no usable polygon: {0}")]
    Degenerate(String),
}

/// One annotated object: an image, the class label and the visible
/// components of its outline in full-image coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceRecord {
    pub image_id: String,
    pub image: Arc<RgbImage>,
    pub label: String,
    /// Clockwise, at least 3 vertices each.
    pub components: Vec<Polygon>,
    /// Tight box over all components.
    pub bbox: BBox,
}

impl InstanceRecord {
    /// Normalizes every component clockwise and computes the tight box.
    pub fn new(
        image_id: impl Into<String>,
        image: Arc<RgbImage>,
        label: impl Into<String>,
        components: Vec<Polygon>,
    ) -> Result<Self, DataError> {
        let image_id = image_id.into();
        if components.is_empty() {
            return Err(DataError::Degenerate(image_id));
        }
        let mut comps = Vec::with_capacity(components.len());
        for c in &components {
            comps.push(
                c.normalize_clockwise()
                    .map_err(|e| DataError::Degenerate(format!("{image_id}: {e}")))?,
            );
        }
        let bbox = tight_box(&comps).ok_or_else(|| DataError::Degenerate(image_id.clone()))?;
        Ok(InstanceRecord {
            image_id,
            image,
            label: label.into(),
            components: comps,
            bbox,
        })
    }

    pub fn width(&self) -> usize {
        self.image.width() as usize
    }

    pub fn height(&self) -> usize {
        self.image.height() as usize
    }
}

fn tight_box(polys: &[Polygon]) -> Option<BBox> {
    let pts: Vec<Point2> = polys.iter().flat_map(|p| p.vertices().iter().copied()).collect();
    Polygon::new(pts).bounds()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceFile {
    images: Vec<ImageEntry>,
}

#[derive(Serialize, Deserialize)]
struct ImageEntry {
    id: String,
    width: u32,
    height: u32,
    file: String,
    objects: Vec<ObjectEntry>,
}

#[derive(Serialize, Deserialize)]
struct ObjectEntry {
    label: String,
    polygon: Vec<[f64; 2]>,
}

/// Reads an instance file and the PNG images it references (paths relative
/// to the file). Each object polygon becomes one record; objects with fewer
/// than 3 points or no area are skipped with a warning.
pub fn load_instances(path: &Path) -> Result<Vec<InstanceRecord>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_owned(),
        source,
    })?;
    let file: InstanceFile = serde_json::from_str(&text).map_err(|source| DataError::Json {
        path: path.to_owned(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for entry in file.images {
        let img_path = base.join(&entry.file);
        let img = image::open(&img_path)
            .map_err(|source| DataError::Image {
                path: img_path.clone(),
                source,
            })?
            .into_rgb8();
        if img.dimensions() != (entry.width, entry.height) {
            return Err(DataError::ImageSize {
                path: img_path,
                width: entry.width,
                height: entry.height,
                actual_w: img.width(),
                actual_h: img.height(),
            });
        }
        let img = Arc::new(img);
        for (k, obj) in entry.objects.into_iter().enumerate() {
            if obj.polygon.len() < 3 {
                log::warn!(
                    "{}: object {k} ({}) has {} points, skipped",
                    entry.id,
                    obj.label,
                    obj.polygon.len()
                );
                continue;
            }
            let poly = Polygon::new(obj.polygon.iter().map(|&[x, y]| Point2::new(x, y)).collect());
            match InstanceRecord::new(entry.id.clone(), img.clone(), obj.label, vec![poly]) {
                Ok(r) => out.push(r),
                Err(e) => log::warn!("{}: object {k} skipped: {e}", entry.id),
            }
        }
    }
    if out.is_empty() {
        return Err(DataError::Empty(path.to_owned()));
    }
    Ok(out)
}

/// Writes records as an instance file plus one PNG per distinct image id,
/// next to `path`. Records sharing an image id must share the image.
pub fn save_instances(path: &Path, records: &[InstanceRecord]) -> Result<(), DataError> {
    let io = |p: &Path| {
        let p = p.to_owned();
        move |source| DataError::Io { path: p, source }
    };
    let base = path.parent().unwrap_or(Path::new("."));
    if !base.as_os_str().is_empty() {
        fs::create_dir_all(base).map_err(io(base))?;
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_image: BTreeMap<String, ImageEntry> = BTreeMap::new();
    for r in records {
        let entry = by_image.entry(r.image_id.clone()).or_insert_with(|| {
            order.push(r.image_id.clone());
            ImageEntry {
                id: r.image_id.clone(),
                width: r.image.width(),
                height: r.image.height(),
                file: format!("{}.png", sanitize(&r.image_id)),
                objects: Vec::new(),
            }
        });
        if entry.objects.is_empty() {
            let img_path = base.join(&entry.file);
            r.image.save(&img_path).map_err(|source| DataError::Image {
                path: img_path.clone(),
                source,
            })?;
        }
        for c in &r.components {
            entry.objects.push(ObjectEntry {
                label: r.label.clone(),
                polygon: c.vertices().iter().map(|p| [p.x, p.y]).collect(),
            });
        }
    }
    let file = InstanceFile {
        images: order
            .iter()
            .map(|id| by_image.remove(id).expect("entry was inserted"))
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file).map_err(|source| DataError::Json {
        path: path.to_owned(),
        source,
    })?;
    fs::write(path, text).map_err(io(path))
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, poly: &[(f64, f64)]) -> InstanceRecord {
        let img = Arc::new(RgbImage::from_fn(40, 30, |x, y| image::Rgb([x as u8, y as u8, 7])));
        InstanceRecord::new(id, img, "car", vec![Polygon::from_xy(poly)]).unwrap()
    }

    #[test]
    fn new_normalizes_and_boxes() {
        let r = record("a", &[(1.0, 1.0), (1.0, 9.0), (9.0, 9.0), (9.0, 1.0)]);
        assert!(r.components[0].signed_area().unwrap() > 0.0);
        assert_eq!(r.components[0].vertices()[0], Point2::new(1.0, 1.0));
        assert_eq!(r.bbox, BBox::new(1.0, 1.0, 9.0, 9.0).unwrap());
    }

    #[test]
    fn round_trip_and_skips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.json");
        let recs = vec![
            record("img/1", &[(1.0, 1.0), (9.25, 1.0), (9.0, 9.0), (0.1, 9.0)]),
            record("img2", &[(2.0, 2.0), (12.5, 2.0), (5.0, 1.0 / 3.0)]),
        ];
        save_instances(&path, &recs).unwrap();
        assert_eq!(load_instances(&path).unwrap(), recs);

        let text = r#"{"images":[{"id":"x","width":40,"height":30,"file":"img2.png",
            "objects":[{"label":"car","polygon":[[0,0],[4,0],[4,4],[0,4]]},
                       {"label":"bad","polygon":[[0,0],[1,1]]}]}]}"#;
        fs::write(&path, text).unwrap();
        let got = load_instances(&path).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].label, "car");
        assert!(got[0].components[0].signed_area().unwrap() > 0.0);

        fs::write(&path, "{\"images\":[]}").unwrap();
        assert!(matches!(load_instances(&path), Err(DataError::Empty(_))));
        fs::write(&path, "{not json").unwrap();
        assert!(matches!(load_instances(&path), Err(DataError::Json { .. })));
    }
}
