//! Confidence-thresholded pseudo labels and multi-transform aggregation.
//!
//! The Γ step ([`gamma`]) turns decoded teacher detections into training
//! targets: instances below the box-score threshold are dropped, surviving
//! instances keep only keypoints above the keypoint threshold, and mask
//! probability grids are binarized. Thresholds are inclusive (score ≥ δ
//! keeps), Γ is monotone in every threshold, and Γ∘Γ = Γ bit-exactly.
//!
//! [`aggregate_multi_transform`] runs the frozen teacher over several resized
//! (and optionally mirrored) views of one image, maps every detection back to
//! original coordinates — un-swapping laterally paired keypoints and
//! unmirroring mask grids for flipped views — greedily clusters boxes by IoU,
//! merges each cluster by score-weighted averaging (masks by probability
//! max-pool), and finally applies Γ. The merge order is fixed by a total
//! ordering on detections, so the output is invariant to the order of the
//! scale list.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annot::{box_iou, AnnotationFile, AnnotationRecord, ImageRecord, Instance, MetaRecord};
use crate::error::{CoreError, Result};
use crate::geomaug::{validate_chirality, GeoTransform};
use crate::imagebuf::ImageF;
use crate::micrograd::Tape;
use crate::model::decode::{box_polygon, decode, mask_polygon, Detection};
use crate::model::{forward, Bank, DetectorConfig, Domain, ForwardMode, ModelWeights};

/// Score thresholds of the prediction-to-pseudo-label conversion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub delta_bbox: f64,
    pub delta_kp: f64,
    pub delta_mask: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { delta_bbox: 0.7, delta_kp: 0.1, delta_mask: 0.5 }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("delta_bbox", self.delta_bbox),
            ("delta_kp", self.delta_kp),
            ("delta_mask", self.delta_mask),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(CoreError::Config(format!(
                    "thresholds: {name} = {v} outside (0, 1)"
                )));
            }
        }
        Ok(())
    }
}

/// Γ: filter detections into pseudo-label form.
///
/// Keeps detections with `score >= delta_bbox`. On survivors, keypoint scores
/// below `delta_kp` are zeroed (the keypoint is dropped; its coordinates are
/// ignored downstream), and the mask probability grid is binarized to
/// {0, 1} at `delta_mask`, with the outline polygon re-traced around the
/// binarized cells. All comparisons are inclusive: a score exactly equal to
/// its threshold is kept. Applying Γ twice equals applying it once.
pub fn gamma(cfg: &DetectorConfig, dets: &[Detection], t: &Thresholds) -> Result<Vec<Detection>> {
    t.validate()?;
    let mut out = Vec::new();
    for det in dets {
        if det.score < t.delta_bbox {
            continue;
        }
        let mut kept = det.clone();
        for s in &mut kept.kp_scores {
            if *s < t.delta_kp {
                *s = 0.0;
            }
        }
        for p in &mut kept.mask_probs {
            *p = if *p >= t.delta_mask { 1.0 } else { 0.0 };
        }
        kept.polygon = mask_polygon(cfg, &kept.bbox, &kept.mask_probs, 0.5)
            .unwrap_or_else(|| box_polygon(&kept.bbox));
        out.push(kept);
    }
    Ok(out)
}

/// Materialize Γ output as annotation instances (the training-target form).
/// Keypoints with zeroed scores become absent; polygons come from the
/// binarized masks.
pub fn to_instances(cfg: &DetectorConfig, dets: &[Detection], t: &Thresholds) -> Vec<Instance> {
    dets.iter().map(|d| d.to_instance(cfg, 0.5, t.delta_kp)).collect()
}

/// Multi-view aggregation settings: shorter-side scales in pixels, optional
/// mirrored copies, and the greedy clustering IoU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregationConfig {
    pub scales: Vec<usize>,
    pub with_flip: bool,
    pub merge_iou: f64,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig { scales: vec![108, 144, 180], with_flip: true, merge_iou: 0.5 }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(CoreError::Config("aggregation: empty scale list".into()));
        }
        if self.scales.iter().any(|&s| s < 8) {
            return Err(CoreError::Config("aggregation: scales must be >= 8 px".into()));
        }
        if !(self.merge_iou > 0.0 && self.merge_iou < 1.0) {
            return Err(CoreError::Config(format!(
                "aggregation: merge_iou {} outside (0, 1)",
                self.merge_iou
            )));
        }
        Ok(())
    }
}

/// Map a detection from a resized/flipped view back to original image
/// coordinates. When the view was mirrored, laterally paired keypoint slots
/// swap back and mask grid columns are reversed, so the returned detection
/// reads left-to-right in the original frame.
pub fn unmap_detection(
    cfg: &DetectorConfig,
    det: &Detection,
    view: &GeoTransform,
    chirality: &[[usize; 2]],
) -> Detection {
    let inv = view.invert();
    let (ax, ay) = inv.apply_point(det.bbox[0], det.bbox[1]);
    let (bx, by) = inv.apply_point(det.bbox[2], det.bbox[3]);
    let bbox = [ax.min(bx), ay.min(by), ax.max(bx), ay.max(by)];
    let mut keypoints: Vec<[f64; 2]> = det
        .keypoints
        .iter()
        .map(|&[x, y]| {
            let (ox, oy) = inv.apply_point(x, y);
            [ox, oy]
        })
        .collect();
    let mut kp_scores = det.kp_scores.clone();
    let mut mask_probs = det.mask_probs.clone();
    if view.flip_h {
        for &[l, r] in chirality {
            keypoints.swap(l, r);
            kp_scores.swap(l, r);
        }
        let (mh, mw) = cfg.mask_size;
        for row in 0..mh {
            mask_probs[row * mw..(row + 1) * mw].reverse();
        }
    }
    let polygon = det
        .polygon
        .iter()
        .map(|&[x, y]| {
            let (ox, oy) = inv.apply_point(x, y);
            [ox, oy]
        })
        .collect();
    Detection { bbox, score: det.score, keypoints, kp_scores, mask_probs, polygon }
}

/// Total ordering for deterministic clustering: score descending, then box
/// corners, then keypoint coordinates. Candidates from any view order sort to
/// the same sequence.
fn det_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .expect("finite scores")
        .then_with(|| a.bbox.partial_cmp(&b.bbox).expect("finite boxes"))
        .then_with(|| a.keypoints.partial_cmp(&b.keypoints).expect("finite keypoints"))
}

/// Greedy IoU clustering + cluster merge.
///
/// Candidates are sorted by the total detection order; the best-scoring
/// unused candidate seeds a cluster that absorbs every remaining candidate
/// whose box IoU with the seed is `>= merge_iou` (inclusive). Each cluster
/// merges into one detection: box corners and keypoint coordinates (and
/// keypoint scores) are averaged weighted by normalized member box scores,
/// the score is the cluster maximum, mask probabilities are element-wise
/// max-pooled, and the polygon is re-traced from the merged mask.
/// Single-member clusters pass through unchanged.
pub fn merge_detections(
    cfg: &DetectorConfig,
    mut candidates: Vec<Detection>,
    merge_iou: f64,
) -> Result<Vec<Detection>> {
    if !(merge_iou > 0.0 && merge_iou < 1.0) {
        return Err(CoreError::Config(format!("merge_iou {merge_iou} outside (0, 1)")));
    }
    candidates.sort_by(det_order);
    let mut used = vec![false; candidates.len()];
    let mut out = Vec::new();
    for i in 0..candidates.len() {
        if used[i] {
            continue;
        }
        used[i] = true;
        let mut members = vec![i];
        for j in i + 1..candidates.len() {
            if !used[j] && box_iou(&candidates[i].bbox, &candidates[j].bbox) >= merge_iou {
                used[j] = true;
                members.push(j);
            }
        }
        out.push(merge_cluster(cfg, &candidates, &members));
    }
    Ok(out)
}

fn merge_cluster(cfg: &DetectorConfig, candidates: &[Detection], members: &[usize]) -> Detection {
    if members.len() == 1 {
        return candidates[members[0]].clone();
    }
    let total: f64 = members.iter().map(|&m| candidates[m].score).sum();
    let k = cfg.num_keypoints;
    let mlen = candidates[members[0]].mask_probs.len();
    let mut bbox = [0.0; 4];
    let mut keypoints = vec![[0.0; 2]; k];
    let mut kp_scores = vec![0.0; k];
    let mut mask_probs = vec![0.0f64; mlen];
    for &m in members {
        let det = &candidates[m];
        let w = det.score / total;
        for c in 0..4 {
            bbox[c] += w * det.bbox[c];
        }
        for ki in 0..k {
            keypoints[ki][0] += w * det.keypoints[ki][0];
            keypoints[ki][1] += w * det.keypoints[ki][1];
            kp_scores[ki] += w * det.kp_scores[ki];
        }
        for (acc, &p) in mask_probs.iter_mut().zip(&det.mask_probs) {
            *acc = acc.max(p);
        }
    }
    // Candidates are sorted by score, so the first member holds the max.
    let score = candidates[members[0]].score;
    let polygon =
        mask_polygon(cfg, &bbox, &mask_probs, 0.5).unwrap_or_else(|| box_polygon(&bbox));
    Detection { bbox, score, keypoints, kp_scores, mask_probs, polygon }
}

/// Run the frozen model over every scale (and mirrored copy when
/// `with_flip`), map detections back to original coordinates, merge, and
/// apply Γ. With a single scale equal to the image's shorter side and no
/// flip, this reduces exactly to Γ of a plain single inference.
pub fn aggregate_multi_transform(
    weights: &ModelWeights,
    bank: Bank,
    image: &ImageF,
    chirality: &[[usize; 2]],
    agg: &AggregationConfig,
    t: &Thresholds,
) -> Result<Vec<Detection>> {
    agg.validate()?;
    t.validate()?;
    let cfg = &weights.config;
    validate_chirality(chirality, cfg.num_keypoints)?;
    let shorter = image.width.min(image.height);
    let domain = match bank {
        Bank::Source => Domain::Source,
        Bank::Target => Domain::Target,
    };
    let flips: &[bool] = if agg.with_flip { &[false, true] } else { &[false] };
    let mut candidates = Vec::new();
    for &scale in &agg.scales {
        let f = scale as f64 / shorter as f64;
        let dst_w = ((image.width as f64 * f).round() as usize).max(1);
        let dst_h = ((image.height as f64 * f).round() as usize).max(1);
        for &flip in flips {
            let view = GeoTransform {
                src_w: image.width,
                src_h: image.height,
                dst_w,
                dst_h,
                flip_h: flip,
            };
            let img_v = view.apply_to_image(image)?;
            let mut tape = Tape::new();
            let preds =
                forward(&mut tape, weights, &[&img_v], &[domain], ForwardMode::Infer(bank))?;
            let dets = decode(cfg, &preds.per_image[0])?;
            candidates.extend(dets.iter().map(|d| unmap_detection(cfg, d, &view, chirality)));
        }
    }
    let merged = merge_detections(cfg, candidates, agg.merge_iou)?;
    gamma(cfg, &merged, t)
}

// ---------------------------------------------------------------------------
// Pseudo-label files

/// Pseudo labels for one image, in the coordinate frame given by `weak`
/// (a transform from original image coordinates; identity for offline files,
/// the weak-view transform inside the training loop).
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelSet {
    pub image_id: u64,
    pub image_file: String,
    pub width: usize,
    pub height: usize,
    pub weak: GeoTransform,
    pub instances: Vec<Instance>,
}

impl PseudoLabelSet {
    /// Wrap Γ-filtered detections (already in original image coordinates)
    /// as an original-frame label set.
    pub fn from_detections(
        cfg: &DetectorConfig,
        image_id: u64,
        image_file: impl Into<String>,
        width: usize,
        height: usize,
        dets: &[Detection],
        t: &Thresholds,
    ) -> PseudoLabelSet {
        PseudoLabelSet {
            image_id,
            image_file: image_file.into(),
            width,
            height,
            weak: GeoTransform::identity(width, height),
            instances: to_instances(cfg, dets, t),
        }
    }
}

/// How a pseudo-label file was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoProvenance {
    /// SHA-256 of the teacher checkpoint that produced the labels.
    pub teacher_checkpoint_sha256: String,
    pub thresholds: Thresholds,
    pub aggregation: AggregationConfig,
}

/// Write pseudo labels in the shared annotation schema plus a provenance
/// block. Label sets must be in original image coordinates.
pub fn save_pseudo_labels(
    path: &Path,
    sets: &[PseudoLabelSet],
    meta: &MetaRecord,
    provenance: &PseudoProvenance,
) -> Result<()> {
    let mut images = Vec::with_capacity(sets.len());
    let mut annotations = Vec::new();
    for set in sets {
        if !set.weak.is_identity() {
            return Err(CoreError::Config(format!(
                "pseudo labels for image {} are not in original coordinates",
                set.image_id
            )));
        }
        images.push(ImageRecord {
            id: set.image_id,
            file: set.image_file.clone(),
            width: set.width,
            height: set.height,
        });
        for inst in &set.instances {
            annotations.push(AnnotationRecord::from_instance(set.image_id, inst));
        }
    }
    let prov = serde_json::to_value(provenance)
        .map_err(|e| CoreError::format("pseudo provenance", e.to_string()))?;
    AnnotationFile { images, annotations, meta: meta.clone(), provenance: Some(prov) }.save(path)
}

/// Read a pseudo-label file back; fails if the provenance block is missing
/// or malformed.
pub fn load_pseudo_labels(path: &Path) -> Result<(Vec<PseudoLabelSet>, PseudoProvenance)> {
    let file = AnnotationFile::load(path)?;
    let prov = file
        .provenance
        .clone()
        .ok_or_else(|| CoreError::format(path.display().to_string(), "missing provenance block"))?;
    let provenance: PseudoProvenance = serde_json::from_value(prov)
        .map_err(|e| CoreError::format(path.display().to_string(), e.to_string()))?;
    let per_image = file.instances_per_image()?;
    let sets = file
        .images
        .iter()
        .zip(per_image)
        .map(|(rec, instances)| PseudoLabelSet {
            image_id: rec.id,
            image_file: rec.file.clone(),
            width: rec.width,
            height: rec.height,
            weak: GeoTransform::identity(rec.width, rec.height),
            instances,
        })
        .collect();
    Ok((sets, provenance))
}
