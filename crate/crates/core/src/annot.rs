//! Instance annotations (box + keypoints + silhouette polygon), their JSON
//! file schema, and the polygon geometry shared by rendering, mask targets,
//! and evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const VIS_ABSENT: u8 = 0;
pub const VIS_OCCLUDED: u8 = 1;
pub const VIS_VISIBLE: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// 0 = absent, 1 = labeled but occluded, 2 = visible.
    pub v: u8,
}

impl Keypoint {
    pub fn labeled(&self) -> bool {
        self.v > VIS_ABSENT
    }
}

/// One instance: axis-aligned box, K keypoints, silhouette polygon, and an
/// optional confidence score (present on predictions and pseudo labels).
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub bbox: [f64; 4],
    pub keypoints: Vec<Keypoint>,
    pub polygon: Vec<[f64; 2]>,
    pub score: Option<f64>,
}

impl Instance {
    pub fn box_area(&self) -> f64 {
        (self.bbox[2] - self.bbox[0]).max(0.0) * (self.bbox[3] - self.bbox[1]).max(0.0)
    }

    pub fn labeled_keypoints(&self) -> usize {
        self.keypoints.iter().filter(|k| k.labeled()).count()
    }
}

/// Intersection-over-union of two xyxy boxes.
pub fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area_a = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0);
    let area_b = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Unsigned polygon area by the shoelace formula.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % poly.len()];
        acc += x0 * y1 - x1 * y0;
    }
    acc.abs() * 0.5
}

/// Tight axis-aligned bounds over polygon vertices.
pub fn polygon_bbox(poly: &[[f64; 2]]) -> [f64; 4] {
    let mut out = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for &[x, y] in poly {
        out[0] = out[0].min(x);
        out[1] = out[1].min(y);
        out[2] = out[2].max(x);
        out[3] = out[3].max(y);
    }
    out
}

/// Even-odd ray-cast point-in-polygon test.
pub fn point_in_polygon(px: f64, py: f64, poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        if (y0 > py) != (y1 > py) {
            let xi = x0 + (py - y0) / (y1 - y0) * (x1 - x0);
            if px < xi {
                inside = !inside;
            }
        }
    }
    inside
}

/// Scanline rasterization by pixel-center even-odd test; returns a
/// `height x width` grid of 0/1 coverage values.
pub fn rasterize_polygon(poly: &[[f64; 2]], width: usize, height: usize) -> Vec<f64> {
    let mut out = vec![0.0; width * height];
    if poly.len() < 3 {
        return out;
    }
    let n = poly.len();
    let mut crossings: Vec<f64> = Vec::with_capacity(8);
    for y in 0..height {
        let py = y as f64 + 0.5;
        crossings.clear();
        for i in 0..n {
            let [x0, y0] = poly[i];
            let [x1, y1] = poly[(i + 1) % n];
            if (y0 > py) != (y1 > py) {
                crossings.push(x0 + (py - y0) / (y1 - y0) * (x1 - x0));
            }
        }
        crossings.sort_by(|a, b| a.partial_cmp(b).expect("finite crossings"));
        for pair in crossings.chunks(2) {
            if pair.len() < 2 {
                break;
            }
            // Pixel centers x + 0.5 in the half-open span [pair0, pair1),
            // matching the strict `px < crossing` point-in-polygon rule.
            let lo = (pair[0] - 0.5).ceil().max(0.0) as isize;
            let hi_f = pair[1] - 0.5;
            let mut hi = hi_f.floor() as isize;
            if hi as f64 == hi_f {
                hi -= 1;
            }
            let hi = hi.min(width as isize - 1);
            for x in lo..=hi {
                if x >= 0 {
                    out[y * width + x as usize] = 1.0;
                }
            }
        }
    }
    out
}

/// IoU between two polygons after rasterizing both onto a `width x height`
/// pixel grid.
pub fn polygon_raster_iou(a: &[[f64; 2]], b: &[[f64; 2]], width: usize, height: usize) -> f64 {
    let ra = rasterize_polygon(a, width, height);
    let rb = rasterize_polygon(b, width, height);
    let mut inter = 0usize;
    let mut uni = 0usize;
    for (x, y) in ra.iter().zip(&rb) {
        let (xa, yb) = (*x > 0.5, *y > 0.5);
        if xa && yb {
            inter += 1;
        }
        if xa || yb {
            uni += 1;
        }
    }
    if uni == 0 {
        0.0
    } else {
        inter as f64 / uni as f64
    }
}

// ---------------------------------------------------------------------------
// JSON schema

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: u64,
    pub file: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image_id: u64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    /// Flat triples `[x, y, v] * K`.
    pub keypoints: Vec<f64>,
    /// Flat vertex list `[x0, y0, x1, y1, ...]`.
    pub mask: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MetaRecord {
    pub num_keypoints: usize,
    pub chirality_pairs: Vec<[usize; 2]>,
    pub generator_hash: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
    pub meta: MetaRecord,
    /// Present only on machine-produced label files (e.g. pseudo labels):
    /// records how the labels were made. Ground-truth files omit it. Kept as
    /// raw JSON here so the schema does not depend on the producers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

impl AnnotationRecord {
    pub fn from_instance(image_id: u64, inst: &Instance) -> AnnotationRecord {
        AnnotationRecord {
            image_id,
            bbox: inst.bbox,
            keypoints: inst
                .keypoints
                .iter()
                .flat_map(|k| [k.x, k.y, k.v as f64])
                .collect(),
            mask: inst.polygon.iter().flat_map(|p| [p[0], p[1]]).collect(),
            score: inst.score,
        }
    }

    pub fn to_instance(&self, num_keypoints: usize) -> Result<Instance> {
        if self.keypoints.len() != 3 * num_keypoints {
            return Err(CoreError::format(
                "annotation",
                format!(
                    "expected {} keypoint values, got {}",
                    3 * num_keypoints,
                    self.keypoints.len()
                ),
            ));
        }
        if self.mask.len() < 6 || self.mask.len() % 2 != 0 {
            return Err(CoreError::format(
                "annotation",
                format!("mask polygon needs >= 3 (x, y) pairs, got {} values", self.mask.len()),
            ));
        }
        if !(self.bbox[2] >= self.bbox[0] && self.bbox[3] >= self.bbox[1]) {
            return Err(CoreError::format("annotation", "box is not x1<=x2, y1<=y2".to_string()));
        }
        let keypoints = self
            .keypoints
            .chunks(3)
            .map(|c| {
                let v = c[2];
                if v != 0.0 && v != 1.0 && v != 2.0 {
                    return Err(CoreError::format(
                        "annotation",
                        format!("keypoint visibility {v} not in {{0, 1, 2}}"),
                    ));
                }
                Ok(Keypoint {
                    x: c[0],
                    y: c[1],
                    v: v as u8,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let polygon = self.mask.chunks(2).map(|c| [c[0], c[1]]).collect();
        Ok(Instance {
            bbox: self.bbox,
            keypoints,
            polygon,
            score: self.score,
        })
    }
}

impl AnnotationFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::format("annotation file", e.to_string()))?;
        std::fs::write(path, text).map_err(|e| CoreError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<AnnotationFile> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        serde_json::from_str(&text)
            .map_err(|e| CoreError::format(path.display().to_string(), e.to_string()))
    }

    /// Instances grouped by image, in `images` order.
    pub fn instances_per_image(&self) -> Result<Vec<Vec<Instance>>> {
        let mut out: Vec<Vec<Instance>> = vec![Vec::new(); self.images.len()];
        let index: std::collections::BTreeMap<u64, usize> = self
            .images
            .iter()
            .enumerate()
            .map(|(i, im)| (im.id, i))
            .collect();
        for ann in &self.annotations {
            let Some(&slot) = index.get(&ann.image_id) else {
                return Err(CoreError::format(
                    "annotation file",
                    format!("annotation references unknown image id {}", ann.image_id),
                ));
            };
            out[slot].push(ann.to_instance(self.meta.num_keypoints)?);
        }
        Ok(out)
    }
}
