//! Multi-task detection loss: focal objectness over the full grid, plus
//! smooth-L1 box offsets, softmax cross-entropy keypoint heatmaps, and
//! binary cross-entropy masks on positive cells only.

use crate::annot::{point_in_polygon, Instance};
use crate::error::{CoreError, Result};
use crate::micrograd::{ops, Tape, Tensor};

use super::{DetectorConfig, ImagePreds, Predictions};

/// Instance-to-grid-cell assignment (by box center). Collisions keep the
/// first instance; later instances at the same cell are not regressed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellAssign {
    pub instance: usize,
    pub cell_x: usize,
    pub cell_y: usize,
}

/// Cell index along one axis for a coordinate, with exact-boundary ties going
/// to the lower cell.
fn axis_cell(coord: f64, stride: usize) -> i64 {
    let s = stride as f64;
    let mut cell = (coord / s).floor() as i64;
    if coord == cell as f64 * s && cell > 0 {
        cell -= 1;
    }
    cell
}

/// Assign each instance to the grid cell containing its box center.
pub fn assign_cells(
    cfg: &DetectorConfig,
    grid_w: usize,
    grid_h: usize,
    labels: &[Instance],
) -> Result<Vec<CellAssign>> {
    let mut taken = vec![false; grid_w * grid_h];
    let mut out = Vec::new();
    for (i, inst) in labels.iter().enumerate() {
        let [x1, y1, x2, y2] = inst.bbox;
        let cx = 0.5 * (x1 + x2);
        let cy = 0.5 * (y1 + y2);
        let gx = axis_cell(cx, cfg.grid_stride);
        let gy = axis_cell(cy, cfg.grid_stride);
        if gx < 0 || gy < 0 || gx as usize >= grid_w || gy as usize >= grid_h {
            return Err(CoreError::Shape(format!(
                "loss: instance {i} center ({cx:.1}, {cy:.1}) maps to cell ({gx}, {gy}) outside {grid_w}x{grid_h} grid"
            )));
        }
        let (gx, gy) = (gx as usize, gy as usize);
        let slot = gy * grid_w + gx;
        if taken[slot] {
            continue;
        }
        taken[slot] = true;
        out.push(CellAssign { instance: i, cell_x: gx, cell_y: gy });
    }
    Ok(out)
}

/// Center of a grid cell in image pixels.
pub fn cell_center(cell_x: usize, cell_y: usize, stride: usize) -> (f64, f64) {
    (
        (cell_x as f64 + 0.5) * stride as f64,
        (cell_y as f64 + 0.5) * stride as f64,
    )
}

/// Regression target: box corners as offsets from the cell center in
/// grid-stride units, `[dx1, dy1, dx2, dy2]`.
pub fn box_offsets(bbox: &[f64; 4], cell_x: usize, cell_y: usize, stride: usize) -> [f64; 4] {
    let (ccx, ccy) = cell_center(cell_x, cell_y, stride);
    let s = stride as f64;
    [
        (bbox[0] - ccx) / s,
        (bbox[1] - ccy) / s,
        (bbox[2] - ccx) / s,
        (bbox[3] - ccy) / s,
    ]
}

/// Heatmap pixel index for a keypoint, in the box-normalized window. Labeled
/// keypoints that fall outside the box are clamped onto the border cell.
pub fn kp_target_index(
    kp_x: f64,
    kp_y: f64,
    bbox: &[f64; 4],
    heatmap: (usize, usize),
) -> usize {
    let (hh, hw) = heatmap;
    let bw = (bbox[2] - bbox[0]).max(1e-9);
    let bh = (bbox[3] - bbox[1]).max(1e-9);
    let u = (kp_x - bbox[0]) / bw;
    let v = (kp_y - bbox[1]) / bh;
    let col = ((u * hw as f64).floor() as i64).clamp(0, hw as i64 - 1) as usize;
    let row = ((v * hh as f64).floor() as i64).clamp(0, hh as i64 - 1) as usize;
    row * hw + col
}

/// Mask target grid: the instance polygon sampled at mask-cell centers in the
/// box-normalized window, 1.0 inside / 0.0 outside.
pub fn mask_targets(inst: &Instance, mask: (usize, usize)) -> Vec<f64> {
    let (mh, mw) = mask;
    let [x1, y1, x2, y2] = inst.bbox;
    let bw = x2 - x1;
    let bh = y2 - y1;
    let mut out = vec![0.0; mh * mw];
    for r in 0..mh {
        for c in 0..mw {
            let px = x1 + (c as f64 + 0.5) / mw as f64 * bw;
            let py = y1 + (r as f64 + 0.5) / mh as f64 * bh;
            if point_in_polygon(px, py, &inst.polygon) {
                out[r * mw + c] = 1.0;
            }
        }
    }
    out
}

/// Per-component loss values (plain numbers, for logging).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub objectness: f64,
    pub bbox: f64,
    pub keypoint: f64,
    pub mask: f64,
    pub positives: usize,
}

/// Loss for one image. Box/keypoint/mask terms are exactly zero (constant,
/// no gradient) when the image has no assigned instances.
pub fn image_loss(
    tape: &mut Tape,
    cfg: &DetectorConfig,
    preds: &ImagePreds,
    labels: &[Instance],
) -> Result<(Tensor, LossBreakdown)> {
    let (gw, gh) = (preds.grid_w, preds.grid_h);
    let assigns = assign_cells(cfg, gw, gh, labels)?;

    // Objectness: focal loss against a {0,1} grid.
    let mut obj_targets = vec![0.0; gh * gw];
    for a in &assigns {
        obj_targets[a.cell_y * gw + a.cell_x] = 1.0;
    }
    let obj_t = Tensor::new(&[1, 1, gh, gw], obj_targets, false)?;
    let l_obj = ops::focal_loss(tape, &preds.obj, &obj_t, cfg.focal_gamma, cfg.focal_alpha)?;

    let (l_box, l_kp, l_mask) = if assigns.is_empty() {
        (Tensor::scalar(0.0), Tensor::scalar(0.0), Tensor::scalar(0.0))
    } else {
        let picks: Vec<(usize, usize, usize)> =
            assigns.iter().map(|a| (0, a.cell_y, a.cell_x)).collect();
        let m = assigns.len();

        // Box offsets at positive cells.
        let box_pred = ops::gather_cells(tape, &preds.bbox, &picks)?;
        let mut box_tgt = Vec::with_capacity(m * 4);
        for a in &assigns {
            box_tgt.extend(box_offsets(
                &labels[a.instance].bbox,
                a.cell_x,
                a.cell_y,
                cfg.grid_stride,
            ));
        }
        let box_t = Tensor::new(&[m, 4], box_tgt, false)?;
        let l_box = ops::smooth_l1(tape, &box_pred, &box_t, cfg.smooth_l1_beta)?;

        // Keypoint heatmaps: one softmax per (instance, keypoint); only
        // labeled keypoints supervise.
        let (hh, hw) = cfg.heatmap_size;
        let k = cfg.num_keypoints;
        let kp_flat = ops::gather_cells(tape, &preds.kp, &picks)?;
        let kp_logits = ops::reshape(tape, &kp_flat, &[m, k, hh, hw])?;
        let mut kp_tgt: Vec<Option<usize>> = Vec::with_capacity(m * k);
        for a in &assigns {
            let inst = &labels[a.instance];
            for ki in 0..k {
                let t = inst.keypoints.get(ki).and_then(|p| {
                    (p.v > 0).then(|| kp_target_index(p.x, p.y, &inst.bbox, cfg.heatmap_size))
                });
                kp_tgt.push(t);
            }
        }
        let l_kp = ops::spatial_softmax_ce(tape, &kp_logits, &kp_tgt)?;

        // Masks in the box-normalized window.
        let mask_pred = ops::gather_cells(tape, &preds.mask, &picks)?;
        let mut mask_tgt = Vec::with_capacity(m * cfg.mask_channels());
        for a in &assigns {
            mask_tgt.extend(mask_targets(&labels[a.instance], cfg.mask_size));
        }
        let mask_t = Tensor::new(&[m, cfg.mask_channels()], mask_tgt, false)?;
        let l_mask = ops::bce_mask(tape, &mask_pred, &mask_t)?;
        (l_box, l_kp, l_mask)
    };

    let w = &cfg.loss_weights;
    let breakdown = LossBreakdown {
        total: w.objectness * l_obj.value()
            + w.bbox * l_box.value()
            + w.keypoint * l_kp.value()
            + w.mask * l_mask.value(),
        objectness: l_obj.value(),
        bbox: l_box.value(),
        keypoint: l_kp.value(),
        mask: l_mask.value(),
        positives: assigns.len(),
    };
    let t1 = ops::scale(tape, &l_obj, w.objectness)?;
    let t2 = ops::scale(tape, &l_box, w.bbox)?;
    let t3 = ops::scale(tape, &l_kp, w.keypoint)?;
    let t4 = ops::scale(tape, &l_mask, w.mask)?;
    let left = ops::add(tape, &t1, &t2)?;
    let right = ops::add(tape, &t3, &t4)?;
    let total = ops::add(tape, &left, &right)?;
    Ok((total, breakdown))
}

/// Mean loss over a batch (per-image labels aligned with predictions).
pub fn batch_loss(
    tape: &mut Tape,
    cfg: &DetectorConfig,
    preds: &Predictions,
    labels: &[Vec<Instance>],
) -> Result<(Tensor, LossBreakdown)> {
    if preds.per_image.len() != labels.len() {
        return Err(CoreError::Shape(format!(
            "batch_loss: {} predictions vs {} label sets",
            preds.per_image.len(),
            labels.len()
        )));
    }
    let mut totals = Vec::with_capacity(labels.len());
    let mut sum = LossBreakdown::default();
    for (p, l) in preds.per_image.iter().zip(labels) {
        let (t, b) = image_loss(tape, cfg, p, l)?;
        totals.push(t);
        sum.total += b.total;
        sum.objectness += b.objectness;
        sum.bbox += b.bbox;
        sum.keypoint += b.keypoint;
        sum.mask += b.mask;
        sum.positives += b.positives;
    }
    let n = labels.len() as f64;
    sum.total /= n;
    sum.objectness /= n;
    sum.bbox /= n;
    sum.keypoint /= n;
    sum.mask /= n;
    let total = ops::mean_stack(tape, &totals)?;
    Ok((total, sum))
}

/// Saturation margin used by [`perfect_predictions`] for sigmoid heads.
const SAT_LOGIT: f64 = 14.0;
/// Saturation margin for softmax heatmaps (larger: the off-pixel mass is
/// multiplied by the window size).
const SAT_KP_LOGIT: f64 = 30.0;

/// Build head outputs that decode exactly back to `labels`: saturated
/// objectness and mask logits, exact box offsets, one-hot keypoint heatmaps.
pub fn perfect_predictions(
    cfg: &DetectorConfig,
    img_w: usize,
    img_h: usize,
    grid_w: usize,
    grid_h: usize,
    labels: &[Instance],
) -> Result<ImagePreds> {
    let assigns = assign_cells(cfg, grid_w, grid_h, labels)?;
    let gwh = grid_w * grid_h;
    let mut obj = vec![-SAT_LOGIT; gwh];
    let mut bbox = vec![0.0; 4 * gwh];
    let mut kp = vec![0.0; cfg.kp_channels() * gwh];
    let mut mask = vec![-SAT_LOGIT; cfg.mask_channels() * gwh];
    let (hh, hw) = cfg.heatmap_size;
    for a in &assigns {
        let inst = &labels[a.instance];
        let cell = a.cell_y * grid_w + a.cell_x;
        obj[cell] = SAT_LOGIT;
        let offs = box_offsets(&inst.bbox, a.cell_x, a.cell_y, cfg.grid_stride);
        for (ci, o) in offs.iter().enumerate() {
            bbox[ci * gwh + cell] = *o;
        }
        for ki in 0..cfg.num_keypoints {
            if let Some(p) = inst.keypoints.get(ki) {
                if p.v > 0 {
                    let pix = kp_target_index(p.x, p.y, &inst.bbox, cfg.heatmap_size);
                    kp[(ki * hh * hw + pix) * gwh + cell] = SAT_KP_LOGIT;
                }
            }
        }
        for (pi, t) in mask_targets(inst, cfg.mask_size).iter().enumerate() {
            if *t > 0.5 {
                mask[pi * gwh + cell] = SAT_LOGIT;
            }
        }
    }
    Ok(ImagePreds {
        img_w,
        img_h,
        grid_w,
        grid_h,
        obj: Tensor::new(&[1, 1, grid_h, grid_w], obj, false)?,
        bbox: Tensor::new(&[1, 4, grid_h, grid_w], bbox, false)?,
        kp: Tensor::new(&[1, cfg.kp_channels(), grid_h, grid_w], kp, false)?,
        mask: Tensor::new(&[1, cfg.mask_channels(), grid_h, grid_w], mask, false)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annot::Keypoint;

    fn square_instance(x1: f64, y1: f64, size: f64) -> Instance {
        let (x2, y2) = (x1 + size, y1 + size);
        Instance {
            bbox: [x1, y1, x2, y2],
            keypoints: vec![
                Keypoint { x: x1 + 0.3 * size, y: y1 + 0.4 * size, v: 2 },
                Keypoint { x: x1 + 0.7 * size, y: y1 + 0.6 * size, v: 1 },
                Keypoint { x: 0.0, y: 0.0, v: 0 },
            ],
            polygon: vec![[x1, y1], [x2, y1], [x2, y2], [x1, y2]],
            score: None,
        }
    }

    fn cfg() -> DetectorConfig {
        DetectorConfig {
            num_keypoints: 3,
            heatmap_size: (4, 4),
            mask_size: (4, 4),
            grid_stride: 8,
            trunk: vec![
                super::super::TrunkStageConfig { out_channels: 8, stride: 2 },
                super::super::TrunkStageConfig { out_channels: 8, stride: 4 },
            ],
            ..DetectorConfig::default()
        }
    }

    #[test]
    fn center_assignment_with_boundary_tie() {
        let cfg = cfg();
        // Center (20, 12) -> cell (2, 1).
        let a = assign_cells(&cfg, 6, 6, &[square_instance(16.0, 8.0, 8.0)]).unwrap();
        assert_eq!(a, vec![CellAssign { instance: 0, cell_x: 2, cell_y: 1 }]);
        // Center exactly on the x = 16 boundary: tie goes to the lower cell.
        let b = assign_cells(&cfg, 6, 6, &[square_instance(12.0, 8.0, 8.0)]).unwrap();
        assert_eq!(b[0].cell_x, 1);
        // Out-of-grid center is rejected.
        assert!(assign_cells(&cfg, 2, 2, &[square_instance(40.0, 0.0, 8.0)]).is_err());
    }

    #[test]
    fn collision_keeps_first_instance() {
        let cfg = cfg();
        let a = square_instance(0.0, 0.0, 8.0);
        let mut b = square_instance(1.0, 1.0, 8.0);
        b.bbox = [2.0, 2.0, 6.0, 6.0]; // same cell (0, 0)
        let assigns = assign_cells(&cfg, 4, 4, &[a, b]).unwrap();
        assert_eq!(assigns.len(), 1);
        assert_eq!(assigns[0].instance, 0);
    }

    #[test]
    fn empty_labels_reduce_to_pure_negative_focal() {
        let cfg = cfg();
        let preds = perfect_predictions(&cfg, 32, 32, 4, 4, &[]).unwrap();
        let mut tape = Tape::new();
        let (_, b) = image_loss(&mut tape, &cfg, &preds, &[]).unwrap();
        assert_eq!(b.bbox, 0.0);
        assert_eq!(b.keypoint, 0.0);
        assert_eq!(b.mask, 0.0);
        assert_eq!(b.positives, 0);
        // bce(x=-14, t=0) = ln(1 + e^-14); focal = 0.75 * p^2 * bce.
        let p = 1.0 / (1.0 + 14.0f64.exp());
        let bce = (-14.0f64).exp().ln_1p();
        let expect = 0.75 * p * p * bce;
        assert!((b.objectness - expect).abs() < 1e-15, "{} vs {}", b.objectness, expect);
    }

    #[test]
    fn perfect_predictions_give_near_zero_loss() {
        let cfg = cfg();
        let labels = vec![square_instance(4.0, 6.0, 14.0), square_instance(20.0, 18.0, 10.0)];
        let preds = perfect_predictions(&cfg, 32, 32, 4, 4, &labels).unwrap();
        let mut tape = Tape::new();
        let (total, b) = image_loss(&mut tape, &cfg, &preds, &labels).unwrap();
        assert!(total.value() < 1e-5, "total = {}", total.value());
        assert_eq!(b.positives, 2);
        assert_eq!(b.bbox, 0.0, "offsets are exact");
    }

    #[test]
    fn mask_targets_match_polygon_interior() {
        let inst = square_instance(0.0, 0.0, 8.0);
        let t = mask_targets(&inst, (4, 4));
        // The polygon is the box itself: all mask cell centers are inside.
        assert!(t.iter().all(|&v| v == 1.0));
        let mut tri = inst.clone();
        tri.polygon = vec![[0.0, 0.0], [8.0, 0.0], [0.0, 8.0]];
        let t = mask_targets(&tri, (4, 4));
        // Upper-left triangle: cells strictly below the diagonal are empty.
        assert_eq!(t[0], 1.0);
        assert_eq!(t[15], 0.0);
        assert_eq!(t.iter().sum::<f64>(), 6.0);
    }

    #[test]
    fn kp_target_clamps_to_window() {
        let bbox = [10.0, 10.0, 20.0, 20.0];
        assert_eq!(kp_target_index(10.0, 10.0, &bbox, (4, 4)), 0);
        assert_eq!(kp_target_index(25.0, 25.0, &bbox, (4, 4)), 15);
        assert_eq!(kp_target_index(14.9, 10.1, &bbox, (4, 4)), 1);
    }
}
