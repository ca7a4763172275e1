//! Weak/strong augmentation with exact, invertible label transport.
//!
//! The geometric family is deliberately small — axis-aligned anisotropic
//! scale plus horizontal flip — so inversion and composition are exact and
//! labels can be carried between any two augmented views of the same image.
//! Strong augmentation layers photometric distortion, aggressive
//! down-up resampling, and cutout on top; none of those touch geometry, so
//! label transport reads only the geometric part of a strong record.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annot::{Instance, Keypoint};
use crate::error::{CoreError, Result};
use crate::imagebuf::ImageF;

/// Anisotropic scale (src frame -> dst frame) followed by an optional
/// horizontal flip in the dst frame. Frame sizes are stored as integers and
/// scale factors are recomputed on demand, which keeps composition exact:
/// composing transforms just rewires frames and XORs the flip bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeoTransform {
    pub src_w: usize,
    pub src_h: usize,
    pub dst_w: usize,
    pub dst_h: usize,
    pub flip_h: bool,
}

impl GeoTransform {
    pub fn identity(w: usize, h: usize) -> GeoTransform {
        GeoTransform {
            src_w: w,
            src_h: h,
            dst_w: w,
            dst_h: h,
            flip_h: false,
        }
    }

    pub fn sx(&self) -> f64 {
        self.dst_w as f64 / self.src_w as f64
    }

    pub fn sy(&self) -> f64 {
        self.dst_h as f64 / self.src_h as f64
    }

    pub fn is_identity(&self) -> bool {
        self.src_w == self.dst_w && self.src_h == self.dst_h && !self.flip_h
    }

    pub fn apply_point(&self, x: f64, y: f64) -> (f64, f64) {
        let mut xp = x * self.sx();
        let yp = y * self.sy();
        if self.flip_h {
            xp = self.dst_w as f64 - xp;
        }
        (xp, yp)
    }

    pub fn invert(&self) -> GeoTransform {
        GeoTransform {
            src_w: self.dst_w,
            src_h: self.dst_h,
            dst_w: self.src_w,
            dst_h: self.src_h,
            flip_h: self.flip_h,
        }
    }

    /// `self` followed by `then`; `then` must start in `self`'s dst frame.
    pub fn compose(&self, then: &GeoTransform) -> Result<GeoTransform> {
        if then.src_w != self.dst_w || then.src_h != self.dst_h {
            return Err(CoreError::Shape(format!(
                "compose: frame mismatch {}x{} -> {}x{}",
                self.dst_w, self.dst_h, then.src_w, then.src_h
            )));
        }
        Ok(GeoTransform {
            src_w: self.src_w,
            src_h: self.src_h,
            dst_w: then.dst_w,
            dst_h: then.dst_h,
            flip_h: self.flip_h ^ then.flip_h,
        })
    }

    /// Resize + flip applied to pixels.
    pub fn apply_to_image(&self, img: &ImageF) -> Result<ImageF> {
        if img.width != self.src_w || img.height != self.src_h {
            return Err(CoreError::Shape(format!(
                "apply_to_image: image {}x{} vs transform src {}x{}",
                img.width, img.height, self.src_w, self.src_h
            )));
        }
        let mut out = if self.src_w == self.dst_w && self.src_h == self.dst_h {
            img.clone()
        } else {
            img.resize_bilinear(self.dst_w, self.dst_h)
        };
        if self.flip_h {
            out = out.flip_horizontal();
        }
        Ok(out)
    }
}

/// Validate chirality pairs against the keypoint count: indices in range,
/// sides distinct, and no slot mentioned twice.
pub fn validate_chirality(pairs: &[[usize; 2]], num_keypoints: usize) -> Result<()> {
    let mut seen = vec![false; num_keypoints];
    for &[l, r] in pairs {
        if l >= num_keypoints || r >= num_keypoints {
            return Err(CoreError::Config(format!(
                "chirality pair ({l}, {r}) out of range for K = {num_keypoints}"
            )));
        }
        if l == r {
            return Err(CoreError::Config(format!("chirality pair ({l}, {r}) is degenerate")));
        }
        if seen[l] || seen[r] {
            return Err(CoreError::Config(format!(
                "keypoint slot reused across chirality pairs ({l}, {r})"
            )));
        }
        seen[l] = true;
        seen[r] = true;
    }
    Ok(())
}

/// Swap laterally paired keypoint slots; pure permutation, exact involution.
pub fn swap_chirality(keypoints: &mut [Keypoint], pairs: &[[usize; 2]]) {
    for &[l, r] in pairs {
        keypoints.swap(l, r);
    }
}

/// Transform boxes; boxes that collapse to zero area are dropped and counted.
pub fn apply_boxes(boxes: &[[f64; 4]], t: &GeoTransform) -> (Vec<[f64; 4]>, usize) {
    let mut out = Vec::with_capacity(boxes.len());
    let mut dropped = 0;
    for b in boxes {
        let (x0, y0) = t.apply_point(b[0], b[1]);
        let (x1, y1) = t.apply_point(b[2], b[3]);
        let bb = [x0.min(x1), y0.min(y1), x0.max(x1), y0.max(y1)];
        if bb[2] - bb[0] <= 0.0 || bb[3] - bb[1] <= 0.0 {
            dropped += 1;
        } else {
            out.push(bb);
        }
    }
    (out, dropped)
}

/// Transform keypoints: map coordinates, swap chirality pairs under flip, and
/// clamp into the dst frame (clamped points stay labeled).
pub fn apply_keypoints(
    keypoints: &[Keypoint],
    t: &GeoTransform,
    chirality_pairs: &[[usize; 2]],
) -> Vec<Keypoint> {
    let mut out: Vec<Keypoint> = keypoints
        .iter()
        .map(|k| {
            let (x, y) = t.apply_point(k.x, k.y);
            Keypoint {
                x: x.clamp(0.0, t.dst_w as f64),
                y: y.clamp(0.0, t.dst_h as f64),
                v: k.v,
            }
        })
        .collect();
    if t.flip_h {
        swap_chirality(&mut out, chirality_pairs);
    }
    out
}

/// Transform polygon vertices; under flip the vertex order is reversed so
/// orientation is preserved.
pub fn apply_mask(polygon: &[[f64; 2]], t: &GeoTransform) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = polygon
        .iter()
        .map(|p| {
            let (x, y) = t.apply_point(p[0], p[1]);
            [x, y]
        })
        .collect();
    if t.flip_h {
        out.reverse();
    }
    out
}

/// Transform whole instances; returns the surviving instances and the count
/// of instances dropped because their box degenerated.
pub fn apply_instances(
    instances: &[Instance],
    t: &GeoTransform,
    chirality_pairs: &[[usize; 2]],
) -> (Vec<Instance>, usize) {
    let mut out = Vec::with_capacity(instances.len());
    let mut dropped = 0;
    for inst in instances {
        let (boxes, d) = apply_boxes(std::slice::from_ref(&inst.bbox), t);
        if d > 0 {
            dropped += 1;
            continue;
        }
        out.push(Instance {
            bbox: boxes[0],
            keypoints: apply_keypoints(&inst.keypoints, t, chirality_pairs),
            polygon: apply_mask(&inst.polygon, t),
            score: inst.score,
        });
    }
    (out, dropped)
}

/// Carry labels expressed in `t_w`'s dst frame into `t_s`'s dst frame:
/// apply `invert(t_w)` then `t_s` as one composed transform.
pub fn transport(
    labels: &[Instance],
    t_w: &GeoTransform,
    t_s: &GeoTransform,
    chirality_pairs: &[[usize; 2]],
) -> Result<(Vec<Instance>, usize)> {
    let t = t_w.invert().compose(t_s)?;
    Ok(apply_instances(labels, &t, chirality_pairs))
}

// ---------------------------------------------------------------------------
// Sampling configuration

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WeakAugConfig {
    /// Shorter-side resize range in pixels, inclusive.
    pub resize_lo: usize,
    pub resize_hi: usize,
    pub flip_prob: f64,
}

impl Default for WeakAugConfig {
    fn default() -> Self {
        WeakAugConfig {
            resize_lo: 480,
            resize_hi: 800,
            flip_prob: 0.5,
        }
    }
}

impl WeakAugConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resize_lo == 0 || self.resize_lo > self.resize_hi {
            return Err(CoreError::Config(format!(
                "weak aug: bad resize range [{}, {}]",
                self.resize_lo, self.resize_hi
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(CoreError::Config(format!(
                "weak aug: flip_prob {} outside [0, 1]",
                self.flip_prob
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct StrongAugConfig {
    pub geo: WeakAugConfig,
    pub enable_strong_resize: bool,
    pub strong_resize_lo: f64,
    pub strong_resize_hi: f64,
    pub enable_photometric: bool,
    /// How many photometric ops each strong record applies.
    pub photometric_ops: usize,
    /// Global magnitude knob in [0, 1].
    pub photometric_magnitude: f64,
    /// Whether color inversion participates in the photometric pool.
    pub enable_inversion: bool,
    pub enable_cutout: bool,
    pub cutout_count: usize,
    /// Cutout side range in pixels of the strong (dst) frame.
    pub cutout_side_lo: f64,
    pub cutout_side_hi: f64,
}

impl Default for StrongAugConfig {
    fn default() -> Self {
        StrongAugConfig {
            geo: WeakAugConfig::default(),
            enable_strong_resize: true,
            strong_resize_lo: 1.0,
            strong_resize_hi: 12.0,
            enable_photometric: true,
            photometric_ops: 2,
            photometric_magnitude: 0.7,
            enable_inversion: true,
            enable_cutout: true,
            cutout_count: 2,
            cutout_side_lo: 40.0,
            cutout_side_hi: 80.0,
        }
    }
}

impl StrongAugConfig {
    pub fn validate(&self) -> Result<()> {
        self.geo.validate()?;
        if !(self.strong_resize_lo >= 1.0 && self.strong_resize_hi >= self.strong_resize_lo) {
            return Err(CoreError::Config(format!(
                "strong aug: bad strong-resize range [{}, {}]",
                self.strong_resize_lo, self.strong_resize_hi
            )));
        }
        if !(0.0..=1.0).contains(&self.photometric_magnitude) {
            return Err(CoreError::Config(
                "strong aug: photometric magnitude outside [0, 1]".into(),
            ));
        }
        if !(self.cutout_side_lo > 0.0 && self.cutout_side_hi >= self.cutout_side_lo) {
            return Err(CoreError::Config(format!(
                "strong aug: bad cutout side range [{}, {}]",
                self.cutout_side_lo, self.cutout_side_hi
            )));
        }
        Ok(())
    }
}

/// One concrete photometric distortion with all parameters pinned, so a
/// strong record replays bit-identically.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhotometricOp {
    Invert,
    AutoContrast,
    Equalize,
    Posterize { bits: u8 },
    Solarize { threshold: f64 },
    Contrast { factor: f64 },
    ColorJitter { factors: [f64; 3] },
    Sharpness { factor: f64 },
    Brightness { factor: f64 },
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CutoutRect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// Everything needed to replay one strong augmentation exactly.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StrongAugRecord {
    pub geo: GeoTransform,
    /// Down-up resampling factor; 1.0 disables.
    pub strong_resize_factor: f64,
    pub photometric: Vec<PhotometricOp>,
    /// Rectangles in the dst frame, filled with the dataset mean color.
    pub cutouts: Vec<CutoutRect>,
}

impl StrongAugRecord {
    /// A record that performs only the given geometry.
    pub fn geo_only(geo: GeoTransform) -> StrongAugRecord {
        StrongAugRecord {
            geo,
            strong_resize_factor: 1.0,
            photometric: Vec::new(),
            cutouts: Vec::new(),
        }
    }
}

/// Aspect-preserving resize of (src_w, src_h) so the shorter side hits
/// `target_short`.
pub fn resize_to_short_side(src_w: usize, src_h: usize, target_short: usize) -> (usize, usize) {
    let (sw, sh) = (src_w as f64, src_h as f64);
    if src_w <= src_h {
        let scale = target_short as f64 / sw;
        (target_short, (sh * scale).round().max(1.0) as usize)
    } else {
        let scale = target_short as f64 / sh;
        ((sw * scale).round().max(1.0) as usize, target_short)
    }
}

/// Sample the weak transform: shorter-side resize in `[lo, hi]` + flip.
pub fn sample_weak(
    rng: &mut ChaCha8Rng,
    cfg: &WeakAugConfig,
    src_w: usize,
    src_h: usize,
) -> GeoTransform {
    let short = rng.random_range(cfg.resize_lo..=cfg.resize_hi);
    let (dst_w, dst_h) = resize_to_short_side(src_w, src_h, short);
    let flip_h = rng.random_bool(cfg.flip_prob);
    GeoTransform {
        src_w,
        src_h,
        dst_w,
        dst_h,
        flip_h,
    }
}

fn sample_photometric(rng: &mut ChaCha8Rng, cfg: &StrongAugConfig) -> PhotometricOp {
    let m = cfg.photometric_magnitude;
    let n_kinds = if cfg.enable_inversion { 9 } else { 8 };
    // Order matches the photometric pool listing; inversion sits last so the
    // switch only truncates the pool.
    let kind = rng.random_range(0..n_kinds);
    let u: f64 = rng.random_range(0.0..1.0);
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    match kind {
        0 => PhotometricOp::AutoContrast,
        1 => PhotometricOp::Equalize,
        2 => {
            let drop = (u * m * 4.0).round() as u8;
            PhotometricOp::Posterize { bits: 8 - drop.min(4) }
        }
        3 => PhotometricOp::Solarize { threshold: 1.0 - u * m },
        4 => PhotometricOp::Contrast { factor: 1.0 + sign * u * m * 0.8 },
        5 => {
            let mut factors = [0.0; 3];
            for f in &mut factors {
                let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                *f = 1.0 + s * rng.random_range(0.0..1.0) * m * 0.5;
            }
            PhotometricOp::ColorJitter { factors }
        }
        6 => PhotometricOp::Sharpness { factor: 1.0 + sign * u * m },
        7 => PhotometricOp::Brightness { factor: 1.0 + sign * u * m * 0.8 },
        _ => PhotometricOp::Invert,
    }
}

/// Sample a full strong record: weak-style geometry plus strong-resize,
/// photometric ops, and cutout rectangles.
pub fn sample_strong(
    rng: &mut ChaCha8Rng,
    cfg: &StrongAugConfig,
    src_w: usize,
    src_h: usize,
) -> StrongAugRecord {
    let geo = sample_weak(rng, &cfg.geo, src_w, src_h);
    let strong_resize_factor = if cfg.enable_strong_resize {
        rng.random_range(cfg.strong_resize_lo..=cfg.strong_resize_hi)
    } else {
        1.0
    };
    let photometric = if cfg.enable_photometric {
        (0..cfg.photometric_ops)
            .map(|_| sample_photometric(rng, cfg))
            .collect()
    } else {
        Vec::new()
    };
    let cutouts = if cfg.enable_cutout {
        (0..cfg.cutout_count)
            .map(|_| {
                let w = rng.random_range(cfg.cutout_side_lo..=cfg.cutout_side_hi);
                let h = rng.random_range(cfg.cutout_side_lo..=cfg.cutout_side_hi);
                let x = rng.random_range(0.0..(geo.dst_w as f64 - w).max(1e-9));
                let y = rng.random_range(0.0..(geo.dst_h as f64 - h).max(1e-9));
                CutoutRect { x, y, w, h }
            })
            .collect()
    } else {
        Vec::new()
    };
    StrongAugRecord {
        geo,
        strong_resize_factor,
        photometric,
        cutouts,
    }
}

// ---------------------------------------------------------------------------
// Pixel application

fn luma_mean(img: &ImageF) -> f64 {
    let m = img.mean_rgb();
    0.299 * m[0] + 0.587 * m[1] + 0.114 * m[2]
}

fn apply_photometric(img: &mut ImageF, op: &PhotometricOp) {
    match op {
        PhotometricOp::Invert => img.map_pixels(|_, v| 1.0 - v),
        PhotometricOp::AutoContrast => {
            for c in 0..3 {
                let plane = img.plane_mut(c);
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for v in plane.iter() {
                    lo = lo.min(*v);
                    hi = hi.max(*v);
                }
                if hi > lo {
                    let scale = 1.0 / (hi - lo);
                    for v in plane.iter_mut() {
                        *v = (*v - lo) * scale;
                    }
                }
            }
        }
        PhotometricOp::Equalize => {
            for c in 0..3 {
                let plane = img.plane_mut(c);
                let mut hist = [0u32; 256];
                for v in plane.iter() {
                    hist[(v.clamp(0.0, 1.0) * 255.0).round() as usize] += 1;
                }
                let total: u32 = hist.iter().sum();
                if total == 0 {
                    continue;
                }
                let mut cdf = [0f64; 256];
                let mut acc = 0u32;
                for (i, h) in hist.iter().enumerate() {
                    acc += h;
                    cdf[i] = acc as f64 / total as f64;
                }
                for v in plane.iter_mut() {
                    *v = cdf[(v.clamp(0.0, 1.0) * 255.0).round() as usize];
                }
            }
        }
        PhotometricOp::Posterize { bits } => {
            let levels = (1u32 << bits.clamp(&1, &8)) as f64 - 1.0;
            img.map_pixels(|_, v| (v.clamp(0.0, 1.0) * levels).round() / levels);
        }
        PhotometricOp::Solarize { threshold } => {
            let t = *threshold;
            img.map_pixels(|_, v| if v >= t { 1.0 - v } else { v });
        }
        PhotometricOp::Contrast { factor } => {
            let mid = luma_mean(img);
            let f = *factor;
            img.map_pixels(|_, v| mid + (v - mid) * f);
        }
        PhotometricOp::ColorJitter { factors } => {
            let fs = *factors;
            img.map_pixels(|c, v| v * fs[c]);
        }
        PhotometricOp::Sharpness { factor } => {
            let blurred = img.gaussian_blur(1.0);
            let f = *factor;
            for i in 0..img.data.len() {
                img.data[i] = blurred.data[i] + f * (img.data[i] - blurred.data[i]);
            }
        }
        PhotometricOp::Brightness { factor } => {
            let f = *factor;
            img.map_pixels(|_, v| v * f);
        }
    }
    img.clamp01();
}

/// Intermediate size for a down-up resample by `factor`.
pub fn strong_resize_intermediate(w: usize, h: usize, factor: f64) -> (usize, usize) {
    (
        ((w as f64 / factor).round() as usize).max(1),
        ((h as f64 / factor).round() as usize).max(1),
    )
}

/// Apply a full strong record to pixels. Order: geometry (resize, flip) ->
/// strong-resize (bilinear down by the factor, bilinear back up) ->
/// photometric ops -> cutout filled with the per-channel dataset mean.
pub fn apply_image(
    img: &ImageF,
    record: &StrongAugRecord,
    dataset_mean: [f64; 3],
) -> Result<ImageF> {
    let mut out = record.geo.apply_to_image(img)?;
    if record.strong_resize_factor > 1.0 {
        let (iw, ih) = strong_resize_intermediate(out.width, out.height, record.strong_resize_factor);
        out = out.resize_bilinear(iw, ih).resize_bilinear(record.geo.dst_w, record.geo.dst_h);
    }
    for op in &record.photometric {
        apply_photometric(&mut out, op);
    }
    for rect in &record.cutouts {
        let x0 = rect.x.floor().max(0.0) as usize;
        let y0 = rect.y.floor().max(0.0) as usize;
        let x1 = ((rect.x + rect.w).ceil() as usize).min(out.width);
        let y1 = ((rect.y + rect.h).ceil() as usize).min(out.height);
        for c in 0..3 {
            for y in y0..y1 {
                for x in x0..x1 {
                    out.set(c, x, y, dataset_mean[c]);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annot::{polygon_area, rasterize_polygon};
    use crate::rng::stream;
    use proptest::prelude::*;

    const PAIRS: &[[usize; 2]] = &[[1, 2], [3, 4], [5, 6]];

    fn kp(x: f64, y: f64, v: u8) -> Keypoint {
        Keypoint { x, y, v }
    }

    #[test]
    fn flip_box_reflection_arithmetic() {
        let t = GeoTransform {
            src_w: 100,
            src_h: 50,
            dst_w: 100,
            dst_h: 50,
            flip_h: true,
        };
        let (out, dropped) = apply_boxes(&[[10.0, 5.0, 30.0, 25.0]], &t);
        assert_eq!(dropped, 0);
        assert_eq!(out[0], [70.0, 5.0, 90.0, 25.0]);
    }

    #[test]
    fn identity_leaves_instances_unchanged() {
        let t = GeoTransform::identity(64, 48);
        let inst = Instance {
            bbox: [4.0, 5.0, 20.0, 30.0],
            keypoints: vec![kp(5.0, 6.0, 2); 7],
            polygon: vec![[4.0, 5.0], [20.0, 5.0], [12.0, 30.0]],
            score: None,
        };
        let (out, dropped) = apply_instances(std::slice::from_ref(&inst), &t, PAIRS);
        assert_eq!(dropped, 0);
        assert_eq!(out[0], inst);
    }

    #[test]
    fn chirality_swap_is_exact_involution() {
        let mut kps: Vec<Keypoint> = (0..7).map(|i| kp(i as f64, 2.0 * i as f64, 2)).collect();
        let orig = kps.clone();
        swap_chirality(&mut kps, PAIRS);
        assert_ne!(kps, orig);
        swap_chirality(&mut kps, PAIRS);
        assert_eq!(kps, orig);
    }

    #[test]
    fn flip_twice_restores_pose_and_slots() {
        let t = GeoTransform {
            src_w: 97,
            src_h: 41,
            dst_w: 97,
            dst_h: 41,
            flip_h: true,
        };
        let kps: Vec<Keypoint> = vec![
            kp(10.0, 5.0, 2),
            kp(20.0, 6.0, 2),
            kp(30.0, 6.5, 1),
            kp(25.0, 20.0, 2),
            kp(35.0, 21.0, 2),
            kp(22.0, 39.0, 0),
            kp(38.0, 38.0, 2),
        ];
        let once = apply_keypoints(&kps, &t, PAIRS);
        let twice = apply_keypoints(&once, &t, PAIRS);
        for (a, b) in kps.iter().zip(&twice) {
            assert_eq!(a.v, b.v);
            assert!((a.x - b.x).abs() < 1e-12);
            assert!((a.y - b.y).abs() < 1e-12);
        }
        // Slot semantics: after one flip the left shoulder slot holds the
        // mirrored right shoulder coordinate.
        assert!((once[1].x - (97.0 - kps[2].x)).abs() < 1e-12);
        assert_eq!(once[1].v, kps[2].v);
    }

    #[test]
    fn mask_area_scales_by_sx_sy() {
        let t = GeoTransform {
            src_w: 100,
            src_h: 80,
            dst_w: 250,
            dst_h: 40,
            flip_h: false,
        };
        let poly = vec![[10.0, 10.0], [50.0, 12.0], [40.0, 60.0], [12.0, 55.0]];
        let before = polygon_area(&poly);
        let after = polygon_area(&apply_mask(&poly, &t));
        assert!((after - before * t.sx() * t.sy()).abs() < 1e-9 * before.max(1.0));
    }

    #[test]
    fn compose_is_associative_and_transport_matches_two_step() {
        let mut rng = stream(3, "assoc", 0);
        for _ in 0..200 {
            let a = GeoTransform {
                src_w: rng.random_range(20..200),
                src_h: rng.random_range(20..200),
                dst_w: rng.random_range(20..200),
                dst_h: rng.random_range(20..200),
                flip_h: rng.random_bool(0.5),
            };
            let b = GeoTransform {
                src_w: a.dst_w,
                src_h: a.dst_h,
                dst_w: rng.random_range(20..200),
                dst_h: rng.random_range(20..200),
                flip_h: rng.random_bool(0.5),
            };
            let c = GeoTransform {
                src_w: b.dst_w,
                src_h: b.dst_h,
                dst_w: rng.random_range(20..200),
                dst_h: rng.random_range(20..200),
                flip_h: rng.random_bool(0.5),
            };
            let left = a.compose(&b).unwrap().compose(&c).unwrap();
            let right = a.compose(&b.compose(&c).unwrap()).unwrap();
            assert_eq!(left, right);
            let x = rng.random_range(0.0..a.src_w as f64);
            let y = rng.random_range(0.0..a.src_h as f64);
            let (cx, cy) = left.apply_point(x, y);
            let (sx0, sy0) = a.apply_point(x, y);
            let (sx1, sy1) = b.apply_point(sx0, sy0);
            let (sx2, sy2) = c.apply_point(sx1, sy1);
            assert!((cx - sx2).abs() < 1e-9 && (cy - sy2).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn box_round_trip_within_tolerance(
            sw in 20usize..400, sh in 20usize..400,
            dw in 20usize..400, dh in 20usize..400,
            flip in proptest::bool::ANY,
            x0 in 0.0f64..0.45, y0 in 0.0f64..0.45,
            wfrac in 0.05f64..0.5, hfrac in 0.05f64..0.5,
        ) {
            let t = GeoTransform { src_w: sw, src_h: sh, dst_w: dw, dst_h: dh, flip_h: flip };
            let b = [
                x0 * sw as f64,
                y0 * sh as f64,
                (x0 + wfrac) * sw as f64,
                (y0 + hfrac) * sh as f64,
            ];
            let (fwd, d1) = apply_boxes(&[b], &t);
            prop_assert_eq!(d1, 0);
            let (back, d2) = apply_boxes(&fwd, &t.invert());
            prop_assert_eq!(d2, 0);
            for i in 0..4 {
                prop_assert!((back[0][i] - b[i]).abs() < 1e-6);
            }
        }

        #[test]
        fn polygon_round_trip_within_tolerance(
            sw in 20usize..400, sh in 20usize..400,
            dw in 20usize..400, dh in 20usize..400,
            flip in proptest::bool::ANY,
            seed in 0u64..1000,
        ) {
            let t = GeoTransform { src_w: sw, src_h: sh, dst_w: dw, dst_h: dh, flip_h: flip };
            let mut rng = stream(seed, "poly-rt", 0);
            let poly: Vec<[f64; 2]> = (0..8)
                .map(|_| [rng.random_range(0.0..sw as f64), rng.random_range(0.0..sh as f64)])
                .collect();
            let back = apply_mask(&apply_mask(&poly, &t), &t.invert());
            for (a, b) in poly.iter().zip(&back) {
                prop_assert!((a[0] - b[0]).abs() < 1e-6);
                prop_assert!((a[1] - b[1]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn transport_equals_stepwise_application_and_ignores_pixels_ops() {
        let mut rng = stream(9, "transport", 0);
        for case in 0..200 {
            let (sw, sh) = (rng.random_range(40..200), rng.random_range(40..200));
            let t_w = sample_weak(
                &mut rng,
                &WeakAugConfig { resize_lo: 30, resize_hi: 120, flip_prob: 0.5 },
                sw,
                sh,
            );
            let mut cfg = StrongAugConfig {
                geo: WeakAugConfig { resize_lo: 30, resize_hi: 120, flip_prob: 0.5 },
                ..StrongAugConfig::default()
            };
            cfg.cutout_side_lo = 4.0;
            cfg.cutout_side_hi = 9.0;
            let strong = sample_strong(&mut rng, &cfg, sw, sh);
            let inst = Instance {
                bbox: [sw as f64 * 0.1, sh as f64 * 0.1, sw as f64 * 0.6, sh as f64 * 0.7],
                keypoints: (0..7)
                    .map(|i| kp(sw as f64 * (0.15 + 0.05 * i as f64), sh as f64 * 0.3, 2))
                    .collect(),
                polygon: vec![
                    [sw as f64 * 0.1, sh as f64 * 0.1],
                    [sw as f64 * 0.6, sh as f64 * 0.15],
                    [sw as f64 * 0.5, sh as f64 * 0.7],
                ],
                score: Some(0.9),
            };
            let (weak_labels, _) = apply_instances(std::slice::from_ref(&inst), &t_w, PAIRS);
            let (transported, _) = transport(&weak_labels, &t_w, &strong.geo, PAIRS).unwrap();

            // Step-by-step: invert weak, then strong geometry.
            let (undone, _) = apply_instances(&weak_labels, &t_w.invert(), PAIRS);
            let (stepwise, _) = apply_instances(&undone, &strong.geo, PAIRS);
            assert_eq!(transported.len(), stepwise.len(), "case {case}");
            for (a, b) in transported.iter().zip(&stepwise) {
                for i in 0..4 {
                    assert!((a.bbox[i] - b.bbox[i]).abs() < 1e-6, "case {case}");
                }
                for (ka, kb) in a.keypoints.iter().zip(&b.keypoints) {
                    assert_eq!(ka.v, kb.v);
                    assert!((ka.x - kb.x).abs() < 1e-6 && (ka.y - kb.y).abs() < 1e-6);
                }
            }

            // A record with the same geometry but different pixel ops
            // transports labels bit-identically.
            let stripped = StrongAugRecord::geo_only(strong.geo);
            let (again, _) = transport(&weak_labels, &t_w, &stripped.geo, PAIRS).unwrap();
            assert_eq!(transported, again);
        }
    }

    #[test]
    fn weak_sampling_is_deterministic_and_bounded() {
        let cfg = WeakAugConfig { resize_lo: 50, resize_hi: 90, flip_prob: 0.5 };
        let a: Vec<GeoTransform> = {
            let mut rng = stream(5, "weak", 1);
            (0..50).map(|_| sample_weak(&mut rng, &cfg, 192, 144)).collect()
        };
        let b: Vec<GeoTransform> = {
            let mut rng = stream(5, "weak", 1);
            (0..50).map(|_| sample_weak(&mut rng, &cfg, 192, 144)).collect()
        };
        assert_eq!(a, b);
        for t in &a {
            let short = t.dst_w.min(t.dst_h);
            assert!((50..=90).contains(&short));
            // Aspect ratio preserved to within rounding.
            let ar_src = 192.0 / 144.0;
            let ar_dst = t.dst_w as f64 / t.dst_h as f64;
            assert!((ar_src - ar_dst).abs() < 0.05);
        }
    }

    #[test]
    fn flip_fraction_is_binomially_plausible() {
        let cfg = WeakAugConfig { resize_lo: 100, resize_hi: 100, flip_prob: 0.5 };
        let mut rng = stream(2026, "flipfrac", 0);
        let n = 10_000;
        let flips = (0..n)
            .filter(|_| sample_weak(&mut rng, &cfg, 100, 100).flip_h)
            .count();
        let frac = flips as f64 / n as f64;
        assert!((0.45..=0.55).contains(&frac), "flip fraction {frac}");
    }

    #[test]
    fn lo_eq_hi_no_flip_gives_identity() {
        let cfg = WeakAugConfig { resize_lo: 144, resize_hi: 144, flip_prob: 0.0 };
        let mut rng = stream(0, "ident", 0);
        let t = sample_weak(&mut rng, &cfg, 192, 144);
        assert!(t.is_identity());
    }

    #[test]
    fn strong_record_extras_disabled_equals_weak() {
        let cfg = StrongAugConfig {
            geo: WeakAugConfig { resize_lo: 60, resize_hi: 120, flip_prob: 0.5 },
            enable_strong_resize: false,
            enable_photometric: false,
            enable_cutout: false,
            ..StrongAugConfig::default()
        };
        let mut rng = stream(7, "strong-off", 0);
        let rec = sample_strong(&mut rng, &cfg, 192, 144);
        assert_eq!(rec.strong_resize_factor, 1.0);
        assert!(rec.photometric.is_empty());
        assert!(rec.cutouts.is_empty());
    }

    #[test]
    fn strong_resize_factor_range_and_determinism() {
        let cfg = StrongAugConfig::default();
        let mut rng = stream(13, "strong", 3);
        let recs: Vec<StrongAugRecord> =
            (0..10_000).map(|_| sample_strong(&mut rng, &cfg, 640, 480)).collect();
        for r in &recs {
            assert!((1.0..=12.0).contains(&r.strong_resize_factor));
            for ct in &r.cutouts {
                assert!((40.0..=80.0).contains(&ct.w) && (40.0..=80.0).contains(&ct.h));
            }
        }
        let mut rng2 = stream(13, "strong", 3);
        let rec2 = sample_strong(&mut rng2, &cfg, 640, 480);
        assert_eq!(recs[0], rec2);
        // Byte-identical serialization of identically sampled records.
        assert_eq!(
            serde_json::to_string(&recs[0]).unwrap(),
            serde_json::to_string(&rec2).unwrap()
        );
    }

    /// 640x480 at factor 12 passes through a 53x40 intermediate.
    #[test]
    fn strong_resize_intermediate_size_reference_case() {
        assert_eq!(strong_resize_intermediate(640, 480, 12.0), (53, 40));
    }

    #[test]
    fn apply_image_identity_and_double_flip() {
        let mut img = ImageF::new(24, 16);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 37) % 251) as f64 / 251.0;
        }
        let ident = StrongAugRecord::geo_only(GeoTransform::identity(24, 16));
        let out = apply_image(&img, &ident, [0.0; 3]).unwrap();
        assert_eq!(out, img);

        let flip = GeoTransform { src_w: 24, src_h: 16, dst_w: 24, dst_h: 16, flip_h: true };
        let once = flip.apply_to_image(&img).unwrap();
        let twice = flip.apply_to_image(&once).unwrap();
        assert_eq!(twice, img);
    }

    #[test]
    fn photometric_and_cutout_change_pixels_not_size() {
        let img = ImageF::filled(50, 40, [0.2, 0.5, 0.7]);
        let rec = StrongAugRecord {
            geo: GeoTransform::identity(50, 40),
            strong_resize_factor: 1.0,
            photometric: vec![PhotometricOp::Invert],
            cutouts: vec![CutoutRect { x: 5.0, y: 5.0, w: 10.0, h: 10.0 }],
        };
        let out = apply_image(&img, &rec, [0.0, 0.0, 0.0]).unwrap();
        assert_eq!((out.width, out.height), (50, 40));
        // Inverted everywhere...
        assert!((out.get(0, 40, 30) - 0.8).abs() < 1e-12);
        // ...except the cutout, which is the dataset mean.
        assert_eq!(out.get(0, 8, 8), 0.0);
    }

    /// Drawing labels then warping the drawing matches warping labels then
    /// drawing, up to a one-pixel boundary band.
    #[test]
    fn rasterized_equivariance_iou_above_098() {
        let mut rng = stream(21, "raster-eq", 0);
        for case in 0..25 {
            let t = GeoTransform {
                src_w: 256,
                src_h: 256,
                dst_w: rng.random_range(128..512),
                dst_h: rng.random_range(128..512),
                flip_h: rng.random_bool(0.5),
            };
            // A chunky convex-ish blob well inside the frame.
            let cx = rng.random_range(90.0..160.0);
            let cy = rng.random_range(90.0..160.0);
            let poly: Vec<[f64; 2]> = (0..12)
                .map(|i| {
                    let ang = i as f64 / 12.0 * std::f64::consts::TAU;
                    let r = rng.random_range(50.0..80.0);
                    [cx + r * ang.cos(), cy + r * ang.sin()]
                })
                .collect();

            // Path A: rasterize in src, warp the raster as an image.
            let raster_src = rasterize_polygon(&poly, 256, 256);
            let mut img = ImageF::new(256, 256);
            for c in 0..3 {
                img.plane_mut(c).copy_from_slice(&raster_src);
            }
            let warped = t.apply_to_image(&img).unwrap();

            // Path B: warp the polygon, rasterize in dst.
            let raster_dst = rasterize_polygon(&apply_mask(&poly, &t), t.dst_w, t.dst_h);

            let mut inter = 0usize;
            let mut uni = 0usize;
            for (a, b) in warped.plane(0).iter().zip(&raster_dst) {
                let (pa, pb) = (*a > 0.5, *b > 0.5);
                if pa && pb {
                    inter += 1;
                }
                if pa || pb {
                    uni += 1;
                }
            }
            let iou = inter as f64 / uni as f64;
            assert!(iou > 0.98, "case {case}: IoU {iou}");
        }
    }

    #[test]
    fn chirality_validation_rejects_bad_pairs() {
        assert!(validate_chirality(&[[1, 2], [3, 4]], 7).is_ok());
        assert!(validate_chirality(&[[1, 7]], 7).is_err());
        assert!(validate_chirality(&[[2, 2]], 7).is_err());
        assert!(validate_chirality(&[[1, 2], [2, 3]], 7).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_ranges() {
        let bad = WeakAugConfig { resize_lo: 10, resize_hi: 5, flip_prob: 0.5 };
        assert!(bad.validate().is_err());
        let mut s = StrongAugConfig::default();
        s.strong_resize_lo = 0.5;
        assert!(s.validate().is_err());
    }
}
