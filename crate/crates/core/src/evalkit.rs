//! COCO-style evaluation: box AP over IoU 0.5:0.95, keypoint AP over OKS,
//! box-from-mask AP, and (because the synthetic ground truth has exact masks)
//! an extra mask-IoU AP. Includes the low-resolution protocol: downsample an
//! image by a factor, upsample to a target resolution, run inference there,
//! map predictions back to original coordinates, and report mean ± std of
//! each AP across the resolution axis per factor.
//!
//! Matching is greedy in score order with deterministic tie-breaks: equal
//! scores order by (image index, detection id), and equal similarities match
//! the lower ground-truth index. A detection matches a ground truth when
//! their similarity is `>=` the threshold (inclusive).

use serde::{Deserialize, Serialize};

use crate::annot::{box_iou, polygon_bbox, polygon_raster_iou, Instance, Keypoint};
use crate::error::{CoreError, Result};
use crate::geomaug::GeoTransform;
use crate::imagebuf::ImageF;
use crate::micrograd::Tape;
use crate::model::decode::{decode, Detection};
use crate::model::{forward, Bank, Domain, ForwardMode, ModelWeights};

/// Axis-aligned box intersection over union.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    box_iou(a, b)
}

/// The ten COCO match thresholds, 0.50 to 0.95 in steps of 0.05.
pub fn match_thresholds() -> Vec<f64> {
    vec![0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95]
}

/// Published COCO per-keypoint OKS falloff constants (17 keypoints), for
/// plugging real 17-keypoint data into the same evaluator.
pub fn coco_oks_constants() -> Vec<f64> {
    vec![
        0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107,
        0.107, 0.087, 0.087, 0.089, 0.089,
    ]
}

/// Object keypoint similarity: mean over labeled ground-truth keypoints of
/// `exp(-d^2 / (2 * s^2 * k_i^2))` with `s^2 = gt_area`. `k` holds one
/// constant per keypoint, or a single value broadcast to all. Returns
/// `Ok(None)` when the ground truth has no labeled keypoints (the instance
/// is excluded from matching, not an error).
pub fn oks(
    pred: &[[f64; 2]],
    gt: &[Keypoint],
    gt_area: f64,
    k: &[f64],
) -> Result<Option<f64>> {
    if pred.len() != gt.len() {
        return Err(CoreError::Shape(format!(
            "oks: {} predicted vs {} ground-truth keypoints",
            pred.len(),
            gt.len()
        )));
    }
    if k.len() != gt.len() && k.len() != 1 {
        return Err(CoreError::Config(format!(
            "oks: {} falloff constants for {} keypoints",
            k.len(),
            gt.len()
        )));
    }
    if gt_area <= 0.0 || gt_area.is_nan() {
        return Err(CoreError::Config(format!("oks: ground-truth area {gt_area} must be > 0")));
    }
    let mut sum = 0.0;
    let mut labeled = 0usize;
    for (i, g) in gt.iter().enumerate() {
        if g.v == 0 {
            continue;
        }
        let ki = if k.len() == 1 { k[0] } else { k[i] };
        let dx = pred[i][0] - g.x;
        let dy = pred[i][1] - g.y;
        sum += (-(dx * dx + dy * dy) / (2.0 * gt_area * ki * ki)).exp();
        labeled += 1;
    }
    if labeled == 0 {
        Ok(None)
    } else {
        Ok(Some(sum / labeled as f64))
    }
}

/// Tight axis-aligned box of a polygon: min/max over vertices. Degenerate
/// polygons (zero extent on either axis) are rejected.
pub fn box_from_mask(polygon: &[[f64; 2]]) -> Result<[f64; 4]> {
    if polygon.len() < 3 {
        return Err(CoreError::Shape(format!(
            "box_from_mask: polygon has {} vertices",
            polygon.len()
        )));
    }
    let b = polygon_bbox(polygon);
    if !(b[2] > b[0] && b[3] > b[1]) {
        return Err(CoreError::Shape("box_from_mask: polygon has zero extent".into()));
    }
    Ok(b)
}

// ---------------------------------------------------------------------------
// Average precision

/// One image's detections and ground truths reduced to what matching needs:
/// per-detection `(id, score)` (the id is the deterministic tie-break for
/// equal scores) and a detection x ground-truth similarity matrix.
#[derive(Clone, Debug)]
pub struct ImageEval {
    pub dets: Vec<(u64, f64)>,
    /// `sim[d][g]` for every detection d and ground truth g.
    pub sim: Vec<Vec<f64>>,
    pub num_gt: usize,
}

/// COCO-style AP: greedy score-ordered matching per threshold (each ground
/// truth used at most once; the eligible ground truth with the highest
/// similarity wins, ties to the lower index), 101-point interpolated area
/// under the precision-recall curve, averaged over the thresholds.
///
/// With zero ground truths the result is 1.0 when there are no detections
/// and 0.0 otherwise.
pub fn average_precision(images: &[ImageEval], thresholds: &[f64]) -> f64 {
    let total_gt: usize = images.iter().map(|im| im.num_gt).sum();
    let total_det: usize = images.iter().map(|im| im.dets.len()).sum();
    if total_gt == 0 {
        return if total_det == 0 { 1.0 } else { 0.0 };
    }
    if total_det == 0 {
        return 0.0;
    }

    // Global detection order: score descending, ties by (image, id).
    let mut order: Vec<(usize, usize)> = Vec::with_capacity(total_det);
    for (ii, im) in images.iter().enumerate() {
        for di in 0..im.dets.len() {
            order.push((ii, di));
        }
    }
    order.sort_by(|&(ia, da), &(ib, db)| {
        let (sa, sb) = (images[ia].dets[da].1, images[ib].dets[db].1);
        sb.partial_cmp(&sa)
            .expect("finite scores")
            .then(ia.cmp(&ib))
            .then(images[ia].dets[da].0.cmp(&images[ib].dets[db].0))
    });

    let mut ap_sum = 0.0;
    for &thr in thresholds {
        let mut gt_used: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.num_gt]).collect();
        // Cumulative precision/recall after each detection.
        let mut tp = 0usize;
        let mut precision = Vec::with_capacity(order.len());
        let mut recall = Vec::with_capacity(order.len());
        for (rank, &(ii, di)) in order.iter().enumerate() {
            let sim = &images[ii].sim[di];
            let mut best: Option<usize> = None;
            for g in 0..images[ii].num_gt {
                if gt_used[ii][g] || sim[g] < thr {
                    continue;
                }
                // Strict > keeps the lower index on similarity ties.
                if best.is_none_or(|b| sim[g] > sim[b]) {
                    best = Some(g);
                }
            }
            if let Some(g) = best {
                gt_used[ii][g] = true;
                tp += 1;
            }
            precision.push(tp as f64 / (rank + 1) as f64);
            recall.push(tp as f64 / total_gt as f64);
        }
        // Monotone precision envelope from the right.
        let mut envelope = precision.clone();
        for i in (0..envelope.len().saturating_sub(1)).rev() {
            envelope[i] = envelope[i].max(envelope[i + 1]);
        }
        // 101-point interpolation: mean of max precision at recall >= r.
        let mut acc = 0.0;
        let mut idx = 0usize;
        for step in 0..=100 {
            let r = step as f64 / 100.0;
            while idx < recall.len() && recall[idx] < r {
                idx += 1;
            }
            if idx < envelope.len() {
                acc += envelope[idx];
            }
        }
        ap_sum += acc / 101.0;
    }
    ap_sum / thresholds.len() as f64
}

fn det_ids(dets: &[Detection]) -> Vec<(u64, f64)> {
    dets.iter().enumerate().map(|(i, d)| (i as u64, d.score)).collect()
}

/// Box AP: IoU similarity between predicted and ground-truth boxes.
pub fn ap_box(preds: &[Vec<Detection>], gts: &[Vec<Instance>], thresholds: &[f64]) -> f64 {
    let images: Vec<ImageEval> = preds
        .iter()
        .zip(gts)
        .map(|(ds, gs)| ImageEval {
            dets: det_ids(ds),
            sim: ds
                .iter()
                .map(|d| gs.iter().map(|g| box_iou(&d.bbox, &g.bbox)).collect())
                .collect(),
            num_gt: gs.len(),
        })
        .collect();
    average_precision(&images, thresholds)
}

/// Keypoint AP: OKS similarity. Ground truths without a single labeled
/// keypoint are excluded from matching; the count of such skips is returned
/// alongside the AP for logging.
pub fn ap_oks(
    preds: &[Vec<Detection>],
    gts: &[Vec<Instance>],
    oks_k: &[f64],
    thresholds: &[f64],
) -> Result<(f64, usize)> {
    let mut skipped = 0usize;
    let mut images = Vec::with_capacity(preds.len());
    for (ds, gs) in preds.iter().zip(gts) {
        // Eligible ground truths: positive box area and >= 1 labeled keypoint.
        let eligible: Vec<&Instance> = gs
            .iter()
            .filter(|g| {
                let area = (g.bbox[2] - g.bbox[0]) * (g.bbox[3] - g.bbox[1]);
                let ok = area > 0.0 && g.keypoints.iter().any(|kp| kp.v > 0);
                if !ok {
                    skipped += 1;
                }
                ok
            })
            .collect();
        let mut sim = Vec::with_capacity(ds.len());
        for d in ds {
            let mut row = Vec::with_capacity(eligible.len());
            for g in &eligible {
                let area = (g.bbox[2] - g.bbox[0]) * (g.bbox[3] - g.bbox[1]);
                let s = oks(&d.keypoints, &g.keypoints, area, oks_k)?
                    .expect("eligible ground truth has labeled keypoints");
                row.push(s);
            }
            sim.push(row);
        }
        images.push(ImageEval { dets: det_ids(ds), sim, num_gt: eligible.len() });
    }
    Ok((average_precision(&images, thresholds), skipped))
}

/// Box-from-mask AP: the tight box of the predicted mask polygon against
/// ground-truth boxes. Detections with degenerate polygons stay in the list
/// (they count as unmatched false positives) with zero similarity.
pub fn ap_box_from_mask(
    preds: &[Vec<Detection>],
    gts: &[Vec<Instance>],
    thresholds: &[f64],
) -> f64 {
    let images: Vec<ImageEval> = preds
        .iter()
        .zip(gts)
        .map(|(ds, gs)| ImageEval {
            dets: det_ids(ds),
            sim: ds
                .iter()
                .map(|d| match box_from_mask(&d.polygon) {
                    Ok(mb) => gs.iter().map(|g| box_iou(&mb, &g.bbox)).collect(),
                    Err(_) => vec![0.0; gs.len()],
                })
                .collect(),
            num_gt: gs.len(),
        })
        .collect();
    average_precision(&images, thresholds)
}

/// Mask AP with rasterized polygon IoU, evaluated on the original pixel
/// grid. The synthetic ground truth has exact masks, so this extra metric is
/// available even though box-from-mask is the headline mask metric.
pub fn ap_mask_iou(
    preds: &[Vec<Detection>],
    gts: &[Vec<Instance>],
    dims: &[(usize, usize)],
    thresholds: &[f64],
) -> f64 {
    let images: Vec<ImageEval> = preds
        .iter()
        .zip(gts.iter().zip(dims))
        .map(|(ds, (gs, &(w, h)))| ImageEval {
            dets: det_ids(ds),
            sim: ds
                .iter()
                .map(|d| {
                    gs.iter()
                        .map(|g| polygon_raster_iou(&d.polygon, &g.polygon, w, h))
                        .collect()
                })
                .collect(),
            num_gt: gs.len(),
        })
        .collect();
    average_precision(&images, thresholds)
}

// ---------------------------------------------------------------------------
// Low-resolution protocol

/// The evaluation grid: downsample factors and target shorter-side
/// resolutions. Match thresholds are fixed to the ten COCO values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub factors: Vec<u32>,
    pub resolutions: Vec<usize>,
    /// OKS falloff constants: one per keypoint or a single broadcast value.
    pub oks_k: Vec<f64>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            factors: vec![1, 8, 10, 12],
            resolutions: vec![96, 108, 120, 132, 144, 156, 168, 180, 192],
            oks_k: vec![0.08],
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.factors.is_empty() || self.resolutions.is_empty() {
            return Err(CoreError::Config("protocol: empty factor/resolution list".into()));
        }
        if self.factors.contains(&0) {
            return Err(CoreError::Config("protocol: factor 0".into()));
        }
        if self.resolutions.iter().any(|&r| r < 8) {
            return Err(CoreError::Config("protocol: resolution < 8 px".into()));
        }
        if self.oks_k.is_empty() || self.oks_k.iter().any(|&k| k <= 0.0 || k.is_nan()) {
            return Err(CoreError::Config("protocol: OKS constants must be > 0".into()));
        }
        Ok(())
    }
}

/// APs of one (factor, resolution) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub factor: u32,
    pub resolution: usize,
    pub ap_box: f64,
    pub ap_kp: f64,
    pub ap_box_from_mask: f64,
    pub ap_mask_iou: f64,
    pub oks_skipped_gts: usize,
}

/// Mean ± standard deviation across the resolution axis for one factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorSummary {
    pub factor: u32,
    /// Means of (box, keypoint, box-from-mask, mask-IoU) AP.
    pub mean: [f64; 4],
    /// Population standard deviations in the same order.
    pub std: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub cells: Vec<CellMetrics>,
    pub summaries: Vec<FactorSummary>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalResult {
    pub fn summary_for(&self, factor: u32) -> Option<&FactorSummary> {
        self.summaries.iter().find(|s| s.factor == factor)
    }

    /// One `cell` row per (factor, resolution), then `mean` and `std` rows
    /// per factor.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("kind,factor,resolution,ap_box,ap_kp,ap_box_from_mask,ap_mask_iou,oks_skipped_gts\n");
        for c in &self.cells {
            out.push_str(&format!(
                "cell,{},{},{},{},{},{},{}\n",
                c.factor,
                c.resolution,
                c.ap_box,
                c.ap_kp,
                c.ap_box_from_mask,
                c.ap_mask_iou,
                c.oks_skipped_gts
            ));
        }
        for s in &self.summaries {
            out.push_str(&format!(
                "mean,{},,{},{},{},{},\n",
                s.factor, s.mean[0], s.mean[1], s.mean[2], s.mean[3]
            ));
            out.push_str(&format!(
                "std,{},,{},{},{},{},\n",
                s.factor, s.std[0], s.std[1], s.std[2], s.std[3]
            ));
        }
        out
    }
}

/// Degrade an image for one protocol cell: bilinear downsample by `factor`
/// (floor division of each side, min 1 px), then bilinear upsample so the
/// shorter side hits `resolution` with aspect ratio preserved. Returns the
/// degraded view and the original-to-view transform for mapping labels.
pub fn degrade_view(img: &ImageF, factor: u32, resolution: usize) -> (ImageF, GeoTransform) {
    let (w, h) = (img.width, img.height);
    let low_w = (w / factor as usize).max(1);
    let low_h = (h / factor as usize).max(1);
    let low = img.resize_bilinear(low_w, low_h);
    let s = resolution as f64 / w.min(h) as f64;
    let dst_w = ((w as f64 * s).round() as usize).max(1);
    let dst_h = ((h as f64 * s).round() as usize).max(1);
    let view = GeoTransform { src_w: w, src_h: h, dst_w, dst_h, flip_h: false };
    (low.resize_bilinear(dst_w, dst_h), view)
}

/// Map a detection produced in a resized (never flipped) view back to
/// original image coordinates.
fn unscale_detection(det: &Detection, view: &GeoTransform) -> Detection {
    let inv = view.invert();
    let (ax, ay) = inv.apply_point(det.bbox[0], det.bbox[1]);
    let (bx, by) = inv.apply_point(det.bbox[2], det.bbox[3]);
    let map = |pts: &[[f64; 2]]| {
        pts.iter()
            .map(|&[x, y]| {
                let (ox, oy) = inv.apply_point(x, y);
                [ox, oy]
            })
            .collect::<Vec<_>>()
    };
    Detection {
        bbox: [ax.min(bx), ay.min(by), ax.max(bx), ay.max(by)],
        score: det.score,
        keypoints: map(&det.keypoints),
        kp_scores: det.kp_scores.clone(),
        mask_probs: det.mask_probs.clone(),
        polygon: map(&det.polygon),
    }
}

/// Inference closure for a model checkpoint: runs the forward pass on the
/// given normalization bank and decodes detections in the view frame.
pub fn model_infer(
    weights: &ModelWeights,
    bank: Bank,
) -> impl FnMut(&ImageF, &GeoTransform) -> Result<Vec<Detection>> + '_ {
    let domain = match bank {
        Bank::Source => Domain::Source,
        Bank::Target => Domain::Target,
    };
    move |img: &ImageF, _view: &GeoTransform| {
        let mut tape = Tape::new();
        let preds = forward(&mut tape, weights, &[img], &[domain], ForwardMode::Infer(bank))?;
        decode(&weights.config, &preds.per_image[0])
    }
}

/// Evaluate all three (plus mask-IoU) APs on one degradation cell.
pub fn evaluate_cell<F>(
    images: &[ImageF],
    gts: &[Vec<Instance>],
    infer: &mut F,
    factor: u32,
    resolution: usize,
    oks_k: &[f64],
) -> Result<CellMetrics>
where
    F: FnMut(&ImageF, &GeoTransform) -> Result<Vec<Detection>>,
{
    let thresholds = match_thresholds();
    let mut preds: Vec<Vec<Detection>> = Vec::with_capacity(images.len());
    let mut dims: Vec<(usize, usize)> = Vec::with_capacity(images.len());
    for img in images {
        let (view_img, view) = degrade_view(img, factor, resolution);
        let dets = infer(&view_img, &view)?;
        preds.push(dets.iter().map(|d| unscale_detection(d, &view)).collect());
        dims.push((img.width, img.height));
    }
    let (kp_ap, skipped) = ap_oks(&preds, gts, oks_k, &thresholds)?;
    Ok(CellMetrics {
        factor,
        resolution,
        ap_box: ap_box(&preds, gts, &thresholds),
        ap_kp: kp_ap,
        ap_box_from_mask: ap_box_from_mask(&preds, gts, &thresholds),
        ap_mask_iou: ap_mask_iou(&preds, gts, &dims, &thresholds),
        oks_skipped_gts: skipped,
    })
}

/// Sweep the full protocol grid and summarize each factor across the
/// resolution axis.
pub fn evaluate_protocol<F>(
    images: &[ImageF],
    gts: &[Vec<Instance>],
    infer: &mut F,
    protocol: &EvalProtocol,
) -> Result<EvalResult>
where
    F: FnMut(&ImageF, &GeoTransform) -> Result<Vec<Detection>>,
{
    protocol.validate()?;
    if images.len() != gts.len() {
        return Err(CoreError::Shape(format!(
            "evaluate: {} images vs {} ground-truth lists",
            images.len(),
            gts.len()
        )));
    }
    if images.is_empty() {
        return Err(CoreError::Config("evaluate: empty dataset".into()));
    }
    let mut cells = Vec::new();
    let mut summaries = Vec::new();
    for &factor in &protocol.factors {
        let mut per_metric: [Vec<f64>; 4] = Default::default();
        for &resolution in &protocol.resolutions {
            let cell = evaluate_cell(images, gts, infer, factor, resolution, &protocol.oks_k)?;
            per_metric[0].push(cell.ap_box);
            per_metric[1].push(cell.ap_kp);
            per_metric[2].push(cell.ap_box_from_mask);
            per_metric[3].push(cell.ap_mask_iou);
            cells.push(cell);
        }
        let stats: Vec<(f64, f64)> = per_metric.iter().map(|v| mean_std(v)).collect();
        summaries.push(FactorSummary {
            factor,
            mean: [stats[0].0, stats[1].0, stats[2].0, stats[3].0],
            std: [stats[0].1, stats[1].1, stats[2].1, stats[3].1],
        });
    }
    Ok(EvalResult { cells, summaries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annot::rasterize_polygon;
    use crate::rng::{derive_seed, stream};
    use crate::synthor::{generate_scene, DomainParams, SceneConfig};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn match_thresholds_are_the_ten_coco_values() {
        assert_eq!(
            match_thresholds(),
            vec![0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95]
        );
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&[3.0, 4.0, 10.0, 12.0], &[3.0, 4.0, 10.0, 12.0]), 1.0);
        assert_eq!(iou(&[0.0, 0.0, 2.0, 2.0], &[5.0, 5.0, 7.0, 9.0]), 0.0);
        let analytic = iou(&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 3.0, 3.0]);
        assert!((analytic - 1.0 / 7.0).abs() < 1e-12);

        // Pixel-counting oracle on a fine grid.
        let n = 600; // 0.005-unit cells over [0, 3]^2
        let inside = |b: &[f64; 4], x: f64, y: f64| x > b[0] && x < b[2] && y > b[1] && y < b[3];
        let (mut inter, mut union) = (0u64, 0u64);
        for yi in 0..n {
            for xi in 0..n {
                let x = (xi as f64 + 0.5) * 3.0 / n as f64;
                let y = (yi as f64 + 0.5) * 3.0 / n as f64;
                let a = inside(&[0.0, 0.0, 2.0, 2.0], x, y);
                let b = inside(&[1.0, 1.0, 3.0, 3.0], x, y);
                inter += (a && b) as u64;
                union += (a || b) as u64;
            }
        }
        let raster = inter as f64 / union as f64;
        assert!((analytic - raster).abs() < 5e-3, "analytic {analytic} vs raster {raster}");
    }

    #[test]
    fn oks_examples() {
        let gt = vec![
            Keypoint { x: 10.0, y: 20.0, v: 2 },
            Keypoint { x: 30.0, y: 15.0, v: 1 },
            Keypoint { x: 0.0, y: 0.0, v: 0 },
        ];
        let exact = vec![[10.0, 20.0], [30.0, 15.0], [99.0, 99.0]];
        assert_eq!(oks(&exact, &gt, 400.0, &[0.08]).unwrap(), Some(1.0));

        let far = vec![[1e9, 1e9], [1e9, 1e9], [0.0, 0.0]];
        assert!(oks(&far, &gt, 400.0, &[0.08]).unwrap().unwrap() < 1e-12);

        // Single labeled keypoint offset by a known distance.
        let gt1 = vec![Keypoint { x: 5.0, y: 5.0, v: 2 }];
        let (d, s2, k) = (3.0f64, 250.0f64, 0.08f64);
        let got = oks(&[[5.0, 5.0 + d]], &gt1, s2, &[k]).unwrap().unwrap();
        let want = (-(d * d) / (2.0 * s2 * k * k)).exp();
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");

        // Unlabeled ground truth is a skip, not an error.
        let none = vec![Keypoint { x: 1.0, y: 1.0, v: 0 }];
        assert_eq!(oks(&[[0.0, 0.0]], &none, 100.0, &[0.08]).unwrap(), None);

        // Broadcast k equals explicit uniform constants.
        let per_kp = oks(&exact, &gt, 400.0, &[0.08, 0.08, 0.08]).unwrap();
        assert_eq!(per_kp, oks(&exact, &gt, 400.0, &[0.08]).unwrap());

        assert!(oks(&exact, &gt, 0.0, &[0.08]).is_err(), "zero area rejected");
        assert!(oks(&exact[..2], &gt, 400.0, &[0.08]).is_err(), "K mismatch rejected");
    }

    #[test]
    fn box_from_mask_examples() {
        let square = vec![[2.0, 3.0], [8.0, 3.0], [8.0, 9.0], [2.0, 9.0]];
        assert_eq!(box_from_mask(&square).unwrap(), [2.0, 3.0, 8.0, 9.0]);

        let tri = vec![[0.0, 0.0], [4.0, 0.0], [2.0, 3.0]];
        assert_eq!(box_from_mask(&tri).unwrap(), [0.0, 0.0, 4.0, 3.0]);

        let flat = vec![[0.0, 5.0], [4.0, 5.0], [2.0, 5.0]];
        assert!(box_from_mask(&flat).is_err(), "zero-height polygon rejected");

        // Random mask-like polygons (wide vertex angles, no needle spikes):
        // vertex min/max matches the rasterized foreground extent to within
        // one pixel.
        let mut rng = stream(21, "bfm", 0);
        for case in 0..50 {
            let cx = rng.random_range(20.0..40.0);
            let cy = rng.random_range(20.0..40.0);
            let n = rng.random_range(6..13);
            let poly: Vec<[f64; 2]> = (0..n)
                .map(|i| {
                    let ang = i as f64 / n as f64 * std::f64::consts::TAU;
                    let r = rng.random_range(8.0..11.0);
                    [cx + r * ang.cos(), cy + r * ang.sin()]
                })
                .collect();
            let b = box_from_mask(&poly).unwrap();
            let raster = rasterize_polygon(&poly, 64, 64);
            let mut lo = [f64::INFINITY; 2];
            let mut hi = [f64::NEG_INFINITY; 2];
            // Foreground pixel (x, y) covers the unit square [x, x+1] x [y, y+1].
            for y in 0..64 {
                for x in 0..64 {
                    if raster[y * 64 + x] > 0.5 {
                        lo[0] = lo[0].min(x as f64);
                        lo[1] = lo[1].min(y as f64);
                        hi[0] = hi[0].max(x as f64 + 1.0);
                        hi[1] = hi[1].max(y as f64 + 1.0);
                    }
                }
            }
            assert!(lo[0].is_finite(), "case {case}: empty raster");
            for (got, want) in [b[0], b[1]].iter().zip(&lo) {
                assert!((got - want).abs() <= 1.0, "case {case}: min {got} vs {want}");
            }
            for (got, want) in [b[2], b[3]].iter().zip(&hi) {
                assert!((got - want).abs() <= 1.0, "case {case}: max {got} vs {want}");
            }
        }
    }

    // -- AP core ------------------------------------------------------------

    /// Straight-line reference evaluator: same matching semantics, written
    /// as direct loops (selection-based ordering, full rescan per recall
    /// grid point) rather than sorted arrays and envelopes.
    fn reference_ap(images: &[ImageEval], thresholds: &[f64]) -> f64 {
        let total_gt: usize = images.iter().map(|im| im.num_gt).sum();
        let total_det: usize = images.iter().map(|im| im.dets.len()).sum();
        if total_gt == 0 {
            return if total_det == 0 { 1.0 } else { 0.0 };
        }
        if total_det == 0 {
            return 0.0;
        }
        // Selection sort of detection references.
        let mut pool: Vec<(usize, usize)> = images
            .iter()
            .enumerate()
            .flat_map(|(ii, im)| (0..im.dets.len()).map(move |di| (ii, di)))
            .collect();
        let mut order = Vec::with_capacity(pool.len());
        while !pool.is_empty() {
            let mut best = 0;
            for i in 1..pool.len() {
                let (ia, da) = pool[best];
                let (ib, db) = pool[i];
                let ka = (
                    -images[ia].dets[da].1,
                    ia,
                    images[ia].dets[da].0,
                );
                let kb = (
                    -images[ib].dets[db].1,
                    ib,
                    images[ib].dets[db].0,
                );
                if kb.partial_cmp(&ka).unwrap() == std::cmp::Ordering::Less {
                    best = i;
                }
            }
            order.push(pool.remove(best));
        }

        let mut total = 0.0;
        for &thr in thresholds {
            let mut used: Vec<Vec<bool>> =
                images.iter().map(|im| vec![false; im.num_gt]).collect();
            let mut is_tp = Vec::new();
            for &(ii, di) in &order {
                let mut chosen = usize::MAX;
                let mut chosen_sim = f64::NEG_INFINITY;
                for g in 0..images[ii].num_gt {
                    let s = images[ii].sim[di][g];
                    if !used[ii][g] && s >= thr && s > chosen_sim {
                        chosen = g;
                        chosen_sim = s;
                    }
                }
                if chosen != usize::MAX {
                    used[ii][chosen] = true;
                    is_tp.push(true);
                } else {
                    is_tp.push(false);
                }
            }
            let mut ap = 0.0;
            for step in 0..=100 {
                let r = step as f64 / 100.0;
                // Max precision over prefixes whose recall reaches r.
                let mut best_p = 0.0f64;
                let mut tp = 0usize;
                for (i, &t) in is_tp.iter().enumerate() {
                    tp += t as usize;
                    let recall = tp as f64 / total_gt as f64;
                    let precision = tp as f64 / (i + 1) as f64;
                    if recall >= r {
                        best_p = best_p.max(precision);
                    }
                }
                ap += best_p;
            }
            total += ap / 101.0;
        }
        total / thresholds.len() as f64
    }

    fn random_images(seed: u64, quantized: bool) -> Vec<ImageEval> {
        let mut rng = stream(seed, "ap-cases", 0);
        let n_images = rng.random_range(1..3);
        (0..n_images)
            .map(|_| {
                let nd = rng.random_range(0..6);
                let ng = rng.random_range(0..5);
                let draw = |rng: &mut ChaCha8Rng| -> f64 {
                    if quantized {
                        [0.0, 0.25, 0.5, 0.55, 0.75, 0.95, 1.0]
                            [rng.random_range(0..7)]
                    } else {
                        rng.random_range(0.0..1.0)
                    }
                };
                let dets = (0..nd as u64).map(|i| (i, draw(&mut rng))).collect();
                let sim = (0..nd)
                    .map(|_| (0..ng).map(|_| draw(&mut rng)).collect())
                    .collect();
                ImageEval { dets, sim, num_gt: ng }
            })
            .collect()
    }

    #[test]
    fn ap_perfect_and_empty_cases() {
        let thr = match_thresholds();
        // Perfect: similarity 1.0 on the diagonal, arbitrary scores.
        let images = vec![ImageEval {
            dets: vec![(0, 0.2), (1, 0.9), (2, 0.5)],
            sim: vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
            num_gt: 3,
        }];
        assert_eq!(average_precision(&images, &thr), 1.0);

        let no_dets =
            vec![ImageEval { dets: vec![], sim: vec![], num_gt: 2 }];
        assert_eq!(average_precision(&no_dets, &thr), 0.0);
    }

    #[test]
    fn ap_single_detection_hand_case() {
        // One detection matching the one gt at similarity exactly 0.60:
        // thresholds 0.50/0.55/0.60 give AP 1, the other seven give 0.
        let images = vec![ImageEval {
            dets: vec![(0, 0.7)],
            sim: vec![vec![0.60]],
            num_gt: 1,
        }];
        let got = average_precision(&images, &match_thresholds());
        assert!((got - 0.3).abs() < 1e-15, "inclusive threshold: {got}");
    }

    #[test]
    fn ap_handcrafted_matches_reference() {
        // 4 detections / 3 gts with score-order inversions, a detection
        // overlapping two gts, and a pure false positive.
        let images = vec![ImageEval {
            dets: vec![(0, 0.95), (1, 0.90), (2, 0.80), (3, 0.60)],
            sim: vec![
                vec![0.85, 0.60, 0.00], // overlaps gt0 and gt1
                vec![0.70, 0.00, 0.00], // fights for gt0
                vec![0.00, 0.00, 0.00], // false positive
                vec![0.00, 0.00, 0.92], // low score, great match
            ],
            num_gt: 3,
        }];
        let thr = match_thresholds();
        let got = average_precision(&images, &thr);
        let want = reference_ap(&images, &thr);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!(got > 0.0 && got < 1.0, "case should be non-trivial, got {got}");
    }

    #[test]
    fn ap_equals_reference_on_exhaustive_small_sweep() {
        let thr = match_thresholds();
        let mut non_trivial = 0;
        for case in 0..400u64 {
            let images = random_images(5000 + case, case % 2 == 0);
            let got = average_precision(&images, &thr);
            let want = reference_ap(&images, &thr);
            assert!(
                (got - want).abs() < 1e-12,
                "case {case}: {got} vs {want} on {images:?}"
            );
            if got > 0.0 && got < 1.0 {
                non_trivial += 1;
            }
        }
        assert!(non_trivial > 100, "sweep too easy: {non_trivial} non-trivial cases");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Strictly monotone score transforms leave AP unchanged.
        #[test]
        fn ap_invariant_to_monotone_score_transform(seed in any::<u64>()) {
            let thr = match_thresholds();
            let images = random_images(seed, false);
            let base = average_precision(&images, &thr);
            let transformed: Vec<ImageEval> = images
                .iter()
                .map(|im| ImageEval {
                    dets: im.dets.iter().map(|&(id, s)| (id, 0.1 + 2.0 * s * s * s)).collect(),
                    sim: im.sim.clone(),
                    num_gt: im.num_gt,
                })
                .collect();
            prop_assert_eq!(base, average_precision(&transformed, &thr));
        }

        /// Detection list order is irrelevant: ordering is re-derived from
        /// (score, id).
        #[test]
        fn ap_invariant_to_detection_permutation(seed in any::<u64>()) {
            let thr = match_thresholds();
            let images = random_images(seed, true);
            let base = average_precision(&images, &thr);
            let mut rng = stream(seed, "ap-shuffle", 1);
            let shuffled: Vec<ImageEval> = images
                .iter()
                .map(|im| {
                    let mut idx: Vec<usize> = (0..im.dets.len()).collect();
                    // Fisher-Yates.
                    for i in (1..idx.len()).rev() {
                        let j = rng.random_range(0..=i);
                        idx.swap(i, j);
                    }
                    ImageEval {
                        dets: idx.iter().map(|&i| im.dets[i]).collect(),
                        sim: idx.iter().map(|&i| im.sim[i].clone()).collect(),
                        num_gt: im.num_gt,
                    }
                })
                .collect();
            prop_assert_eq!(base, average_precision(&shuffled, &thr));
        }
    }

    // -- Protocol -----------------------------------------------------------

    fn small_corpus(n: usize, domain: &DomainParams) -> (Vec<ImageF>, Vec<Vec<Instance>>) {
        let cfg = SceneConfig::default();
        let mut images = Vec::new();
        let mut gts = Vec::new();
        for i in 0..n {
            let seed = derive_seed(7200, "eval-corpus", i as u64);
            let (img, inst) = generate_scene(seed, domain, &cfg).unwrap();
            images.push(img);
            gts.push(inst);
        }
        (images, gts)
    }

    fn instance_to_detection(inst: &Instance, view: &GeoTransform, score: f64) -> Detection {
        let map = |x: f64, y: f64| {
            let (a, b) = view.apply_point(x, y);
            [a, b]
        };
        let c1 = map(inst.bbox[0], inst.bbox[1]);
        let c2 = map(inst.bbox[2], inst.bbox[3]);
        Detection {
            bbox: [c1[0].min(c2[0]), c1[1].min(c2[1]), c1[0].max(c2[0]), c1[1].max(c2[1])],
            score,
            keypoints: inst.keypoints.iter().map(|k| map(k.x, k.y)).collect(),
            kp_scores: vec![1.0; inst.keypoints.len()],
            mask_probs: Vec::new(),
            polygon: inst.polygon.iter().map(|&[x, y]| map(x, y)).collect(),
        }
    }

    #[test]
    fn oracle_model_scores_one_on_every_cell() {
        let (images, gts) = small_corpus(6, &DomainParams::source_default());
        let mut call = 0usize;
        let n = images.len();
        let mut infer = |_img: &ImageF, view: &GeoTransform| {
            let idx = call % n;
            call += 1;
            Ok(gts[idx]
                .iter()
                .enumerate()
                .map(|(i, inst)| instance_to_detection(inst, view, 0.9 - 0.01 * i as f64))
                .collect())
        };
        let protocol = EvalProtocol {
            factors: vec![1, 12],
            resolutions: vec![96, 144],
            oks_k: vec![0.08],
        };
        let result = evaluate_protocol(&images, &gts, &mut infer, &protocol).unwrap();
        assert_eq!(result.cells.len(), 4);
        for c in &result.cells {
            assert_eq!(c.ap_box, 1.0, "box AP at {}x/{}", c.factor, c.resolution);
            assert_eq!(c.ap_kp, 1.0, "kp AP at {}x/{}", c.factor, c.resolution);
            assert_eq!(
                c.ap_box_from_mask, 1.0,
                "box-from-mask AP at {}x/{}",
                c.factor, c.resolution
            );
            assert_eq!(c.ap_mask_iou, 1.0, "mask AP at {}x/{}", c.factor, c.resolution);
            assert_eq!(c.oks_skipped_gts, 0);
        }
        for s in &result.summaries {
            assert_eq!(s.mean, [1.0, 1.0, 1.0, 1.0]);
            assert_eq!(s.std, [0.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn factor_one_native_resolution_equals_direct_evaluation() {
        let (images, gts) = small_corpus(5, &DomainParams::source_default());
        let native = images[0].height.min(images[0].width);

        // Imperfect deterministic predictions: boxes nudged, keypoints
        // shifted, so the equality below is non-trivial.
        let make_infer = |gts: &[Vec<Instance>]| {
            let gts = gts.to_vec();
            let mut call = 0usize;
            move |_img: &ImageF, view: &GeoTransform| {
                let idx = call % gts.len();
                call += 1;
                Ok(gts[idx]
                    .iter()
                    .enumerate()
                    .map(|(i, inst)| {
                        let mut inst = inst.clone();
                        inst.bbox[0] += 1.0;
                        inst.bbox[3] -= 2.0;
                        for kp in &mut inst.keypoints {
                            kp.x += 1.5;
                        }
                        instance_to_detection(&inst, view, 0.5 + 0.05 * i as f64)
                    })
                    .collect::<Vec<Detection>>())
            }
        };

        let protocol =
            EvalProtocol { factors: vec![1], resolutions: vec![native], oks_k: vec![0.08] };
        let mut infer = make_infer(&gts);
        let through_protocol =
            evaluate_protocol(&images, &gts, &mut infer, &protocol).unwrap();

        // Direct evaluation: same closure fed the raw images.
        let thr = match_thresholds();
        let mut infer2 = make_infer(&gts);
        let mut preds = Vec::new();
        let mut dims = Vec::new();
        for img in &images {
            let view = GeoTransform::identity(img.width, img.height);
            preds.push(infer2(img, &view).unwrap());
            dims.push((img.width, img.height));
        }
        let cell = &through_protocol.cells[0];
        assert_eq!(cell.ap_box, ap_box(&preds, &gts, &thr));
        let (kp, _) = ap_oks(&preds, &gts, &[0.08], &thr).unwrap();
        assert_eq!(cell.ap_kp, kp);
        assert_eq!(cell.ap_box_from_mask, ap_box_from_mask(&preds, &gts, &thr));
        assert_eq!(cell.ap_mask_iou, ap_mask_iou(&preds, &gts, &dims, &thr));
        assert!(cell.ap_box > 0.0 && cell.ap_box < 1.0, "nudges must bite: {}", cell.ap_box);
    }

    #[test]
    fn degraded_input_scores_lower_at_factor_twelve() {
        // Single clean figure per scene so a pixel detector is reliable at
        // native resolution.
        let domain = DomainParams {
            occluders: (0, 0),
            blur_sigma: (0.0, 0.2),
            ..DomainParams::source_default()
        };
        let cfg = SceneConfig { instances: (1, 1), ..SceneConfig::default() };
        let mut images = Vec::new();
        let mut gts = Vec::new();
        for i in 0..12u64 {
            let (img, inst) =
                generate_scene(derive_seed(7300, "blob", i), &domain, &cfg).unwrap();
            if inst.len() == 1 {
                images.push(img);
                gts.push(inst);
            }
        }
        assert!(images.len() >= 8, "need enough single-figure scenes");

        // Detector: threshold color distance to the median border color,
        // box the foreground pixels.
        let mut infer = |img: &ImageF, _view: &GeoTransform| -> Result<Vec<Detection>> {
            let (w, h) = (img.width, img.height);
            let mut border: Vec<[f64; 3]> = Vec::new();
            for x in 0..w {
                border.push([img.get(0, x, 0), img.get(1, x, 0), img.get(2, x, 0)]);
                border.push([
                    img.get(0, x, h - 1),
                    img.get(1, x, h - 1),
                    img.get(2, x, h - 1),
                ]);
            }
            let mut med = [0.0; 3];
            for c in 0..3 {
                let mut vals: Vec<f64> = border.iter().map(|p| p[c]).collect();
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                med[c] = vals[vals.len() / 2];
            }
            let mut lo = [f64::INFINITY; 2];
            let mut hi = [f64::NEG_INFINITY; 2];
            for y in 0..h {
                for x in 0..w {
                    let dist = (0..3)
                        .map(|c| (img.get(c, x, y) - med[c]).abs())
                        .fold(0.0f64, f64::max);
                    if dist > 0.12 {
                        lo[0] = lo[0].min(x as f64);
                        lo[1] = lo[1].min(y as f64);
                        hi[0] = hi[0].max(x as f64 + 1.0);
                        hi[1] = hi[1].max(y as f64 + 1.0);
                    }
                }
            }
            if !lo[0].is_finite() || hi[0] - lo[0] < 2.0 || hi[1] - lo[1] < 2.0 {
                return Ok(Vec::new());
            }
            let bbox = [lo[0], lo[1], hi[0], hi[1]];
            Ok(vec![Detection {
                bbox,
                score: 0.9,
                keypoints: vec![[(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0]; 7],
                kp_scores: vec![1.0; 7],
                mask_probs: Vec::new(),
                polygon: vec![
                    [bbox[0], bbox[1]],
                    [bbox[2], bbox[1]],
                    [bbox[2], bbox[3]],
                    [bbox[0], bbox[3]],
                ],
            }])
        };

        let protocol = EvalProtocol {
            factors: vec![1, 12],
            resolutions: vec![120, 144, 168],
            oks_k: vec![0.08],
        };
        let result = evaluate_protocol(&images, &gts, &mut infer, &protocol).unwrap();
        let clean = result.summary_for(1).unwrap().mean[0];
        let degraded = result.summary_for(12).unwrap().mean[0];
        assert!(
            degraded < clean,
            "12x should hurt the pixel detector: {degraded} !< {clean}"
        );
        assert!(clean > 0.2, "detector must work at native resolution: {clean}");
    }

    #[test]
    fn csv_has_cell_and_summary_rows() {
        let result = EvalResult {
            cells: vec![CellMetrics {
                factor: 1,
                resolution: 144,
                ap_box: 0.5,
                ap_kp: 0.25,
                ap_box_from_mask: 0.5,
                ap_mask_iou: 0.125,
                oks_skipped_gts: 0,
            }],
            summaries: vec![FactorSummary {
                factor: 1,
                mean: [0.5, 0.25, 0.5, 0.125],
                std: [0.0, 0.0, 0.0, 0.0],
            }],
        };
        let csv = result.to_csv();
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 4, "header + cell + mean + std");
        assert!(lines[0].starts_with("kind,factor,resolution,ap_box"));
        assert_eq!(lines[1], "cell,1,144,0.5,0.25,0.5,0.125,0");
        assert_eq!(lines[2], "mean,1,,0.5,0.25,0.5,0.125,");
        assert_eq!(lines[3], "std,1,,0,0,0,0,");
    }

    #[test]
    fn protocol_validation() {
        assert!(EvalProtocol::default().validate().is_ok());
        let bad = EvalProtocol { factors: vec![], ..EvalProtocol::default() };
        assert!(bad.validate().is_err());
        let bad = EvalProtocol { factors: vec![0], ..EvalProtocol::default() };
        assert!(bad.validate().is_err());
        let bad = EvalProtocol { oks_k: vec![0.0], ..EvalProtocol::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn model_closure_runs_end_to_end() {
        // Smoke check that the model-backed closure satisfies the protocol
        // plumbing (APs are whatever an untrained model earns).
        let det_cfg = crate::model::tests::tiny_config();
        let mut rng = stream(31, "eval-model", 0);
        let weights = ModelWeights::init(&det_cfg, &mut rng).unwrap();
        let (images, gts) = small_corpus(2, &DomainParams::source_default());
        let protocol =
            EvalProtocol { factors: vec![1], resolutions: vec![64], oks_k: vec![0.08] };
        // The tiny model expects 7 keypoints? It predicts 3; OKS needs equal
        // K, so restrict to boxes by replacing keypoint lists.
        let mut infer = model_infer(&weights, Bank::Source);
        let mut wrapped = |img: &ImageF, view: &GeoTransform| {
            let mut dets = infer(img, view)?;
            for d in &mut dets {
                d.keypoints = vec![[0.0, 0.0]; 7];
                d.kp_scores = vec![0.0; 7];
            }
            Ok(dets)
        };
        let result = evaluate_protocol(&images, &gts, &mut wrapped, &protocol).unwrap();
        assert_eq!(result.cells.len(), 1);
        for c in &result.cells {
            for v in [c.ap_box, c.ap_kp, c.ap_box_from_mask, c.ap_mask_iou] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
