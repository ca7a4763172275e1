//! Turn raw head outputs into scored instances: objectness gating, box
//! reconstruction, greedy NMS, keypoint argmax, and mask-contour extraction.

use crate::annot::{box_iou, Instance, Keypoint, VIS_VISIBLE};
use crate::error::Result;

use super::contour::largest_iso_contour;
use super::loss::cell_center;
use super::{DetectorConfig, ImagePreds};

/// One decoded instance with everything downstream consumers need: the box
/// score for Γ's box threshold, per-keypoint softmax scores for Γ's keypoint
/// threshold, and the sigmoid mask probability grid for Γ's mask threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: [f64; 4],
    pub score: f64,
    /// Keypoint positions in image coordinates, one per keypoint channel.
    pub keypoints: Vec<[f64; 2]>,
    /// Softmax probability at each keypoint's argmax pixel.
    pub kp_scores: Vec<f64>,
    /// Row-major `mask_size` grid of sigmoid probabilities in the box window.
    pub mask_probs: Vec<f64>,
    /// Mask outline in image coordinates (box corners when no 0.5-level
    /// contour exists).
    pub polygon: Vec<[f64; 2]>,
}

impl Detection {
    /// Collapse to an annotation instance: mask binarized at `mask_level`
    /// (the polygon is re-traced at that level), keypoints below
    /// `kp_floor` marked absent.
    pub fn to_instance(
        &self,
        cfg: &DetectorConfig,
        mask_level: f64,
        kp_floor: f64,
    ) -> Instance {
        let polygon = if (mask_level - 0.5).abs() < 1e-12 {
            self.polygon.clone()
        } else {
            mask_polygon(cfg, &self.bbox, &self.mask_probs, mask_level)
                .unwrap_or_else(|| box_polygon(&self.bbox))
        };
        Instance {
            bbox: self.bbox,
            keypoints: self
                .keypoints
                .iter()
                .zip(&self.kp_scores)
                .map(|(p, &s)| Keypoint {
                    x: p[0],
                    y: p[1],
                    v: if s >= kp_floor { VIS_VISIBLE } else { 0 },
                })
                .collect(),
            polygon,
            score: Some(self.score),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn box_polygon(bbox: &[f64; 4]) -> Vec<[f64; 2]> {
    let [x1, y1, x2, y2] = *bbox;
    vec![[x1, y1], [x2, y1], [x2, y2], [x1, y2]]
}

/// Trace the mask probability grid at `level` and map the contour from the
/// grid frame into image coordinates within `bbox`.
pub(crate) fn mask_polygon(
    cfg: &DetectorConfig,
    bbox: &[f64; 4],
    probs: &[f64],
    level: f64,
) -> Option<Vec<[f64; 2]>> {
    let (mh, mw) = cfg.mask_size;
    let contour = largest_iso_contour(probs, mw, mh, level);
    if contour.len() < 3 {
        return None;
    }
    let [x1, y1, x2, y2] = *bbox;
    let bw = x2 - x1;
    let bh = y2 - y1;
    // Contour coordinates put mask sample (r, c) at (c + 0.5, r + 0.5);
    // mask samples live at box fractions ((c + 0.5) / mw, (r + 0.5) / mh).
    Some(
        contour
            .iter()
            .map(|&[gx, gy]| [x1 + gx * bw / mw as f64, y1 + gy * bh / mh as f64])
            .collect(),
    )
}

/// Decode one image's predictions into scored detections.
///
/// Cells with `sigmoid(objectness) >= score_floor` become candidates; boxes
/// are rebuilt from cell centers plus predicted offsets and clamped to the
/// image; greedy NMS keeps the highest-scoring box of any overlapping pair
/// with IoU strictly above `nms_iou`. Ties in score break toward the lower
/// cell index so decoding is deterministic.
pub fn decode(cfg: &DetectorConfig, preds: &ImagePreds) -> Result<Vec<Detection>> {
    let (gw, gh) = (preds.grid_w, preds.grid_h);
    let gwh = gw * gh;
    let obj = preds.obj.data_ref();
    let bbox = preds.bbox.data_ref();

    // Candidate cells above the score floor, boxes rebuilt and clamped.
    let mut candidates: Vec<(usize, f64, [f64; 4])> = Vec::new();
    for cell in 0..gwh {
        let score = sigmoid(obj[cell]);
        if score < cfg.score_floor {
            continue;
        }
        let (cy, cx) = (cell / gw, cell % gw);
        let (ccx, ccy) = cell_center(cx, cy, cfg.grid_stride);
        let s = cfg.grid_stride as f64;
        let x1 = (ccx + bbox[cell] * s).clamp(0.0, preds.img_w as f64);
        let y1 = (ccy + bbox[gwh + cell] * s).clamp(0.0, preds.img_h as f64);
        let x2 = (ccx + bbox[2 * gwh + cell] * s).clamp(0.0, preds.img_w as f64);
        let y2 = (ccy + bbox[3 * gwh + cell] * s).clamp(0.0, preds.img_h as f64);
        if x1 < x2 && y1 < y2 {
            candidates.push((cell, score, [x1, y1, x2, y2]));
        }
    }
    candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

    // Greedy NMS.
    let mut kept: Vec<(usize, f64, [f64; 4])> = Vec::new();
    'cand: for c in candidates {
        for k in &kept {
            if box_iou(&c.2, &k.2) > cfg.nms_iou {
                continue 'cand;
            }
        }
        kept.push(c);
    }

    let kp = preds.kp.data_ref();
    let mask = preds.mask.data_ref();
    let (hh, hw) = cfg.heatmap_size;
    let window = hh * hw;
    let mut out = Vec::with_capacity(kept.len());
    for (cell, score, b) in kept {
        let [x1, y1, x2, y2] = b;
        let (bw, bh) = (x2 - x1, y2 - y1);

        // Keypoints: per-channel argmax over the heatmap window, scored by
        // the softmax probability at the argmax.
        let mut keypoints = Vec::with_capacity(cfg.num_keypoints);
        let mut kp_scores = Vec::with_capacity(cfg.num_keypoints);
        for ki in 0..cfg.num_keypoints {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            let mut mx = f64::NEG_INFINITY;
            for pix in 0..window {
                let v = kp[(ki * window + pix) * gwh + cell];
                mx = mx.max(v);
                if v > best_v {
                    best_v = v;
                    best = pix;
                }
            }
            let mut denom = 0.0;
            for pix in 0..window {
                denom += (kp[(ki * window + pix) * gwh + cell] - mx).exp();
            }
            let prob = (best_v - mx).exp() / denom;
            let (row, col) = (best / hw, best % hw);
            keypoints.push([
                x1 + (col as f64 + 0.5) / hw as f64 * bw,
                y1 + (row as f64 + 0.5) / hh as f64 * bh,
            ]);
            kp_scores.push(prob);
        }

        let mask_probs: Vec<f64> = (0..cfg.mask_channels())
            .map(|pi| sigmoid(mask[pi * gwh + cell]))
            .collect();
        let polygon =
            mask_polygon(cfg, &b, &mask_probs, 0.5).unwrap_or_else(|| box_polygon(&b));
        out.push(Detection {
            bbox: b,
            score,
            keypoints,
            kp_scores,
            mask_probs,
            polygon,
        });
    }
    Ok(out)
}
