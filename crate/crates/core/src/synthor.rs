//! Deterministic two-domain synthetic scene generator.
//!
//! Scenes contain articulated stick figures (7 joints: head, left/right
//! shoulder, left/right hip, left/right foot) rendered as capsule-union
//! silhouettes over a flat-ish background. The "source" domain is bright and
//! clean; the "target" domain is darker, color-shifted, blurred, cluttered
//! with striped occluder rectangles, and optionally degraded by a
//! downsample-upsample cycle. Ground truth (box, keypoints, silhouette
//! polygon) is derived from the same geometry that drives rendering, so
//! annotations are exact by construction, and every scene is a pure function
//! of its seed.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annot::{
    point_in_polygon, polygon_bbox, rasterize_polygon, AnnotationFile, AnnotationRecord,
    ImageRecord, Instance, Keypoint, MetaRecord, VIS_OCCLUDED, VIS_VISIBLE,
};
use crate::error::{CoreError, Result};
use crate::imagebuf::ImageF;
use crate::model::contour::largest_iso_contour;
use crate::rng::{derive_seed, stream};

/// Keypoint slots produced by the generator.
pub const KP_HEAD: usize = 0;
pub const KP_L_SHOULDER: usize = 1;
pub const KP_R_SHOULDER: usize = 2;
pub const KP_L_HIP: usize = 3;
pub const KP_R_HIP: usize = 4;
pub const KP_L_FOOT: usize = 5;
pub const KP_R_FOOT: usize = 6;
pub const NUM_KEYPOINTS: usize = 7;

/// Left/right slot pairs that swap under horizontal mirroring.
pub fn chirality_pairs() -> Vec<[usize; 2]> {
    vec![
        [KP_L_SHOULDER, KP_R_SHOULDER],
        [KP_L_HIP, KP_R_HIP],
        [KP_L_FOOT, KP_R_FOOT],
    ]
}

/// Appearance and degradation parameters of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainParams {
    /// Per-channel background base color mean (0..1 scale).
    pub background_mean: [f64; 3],
    /// Per-channel jitter std around the base color.
    pub background_std: [f64; 3],
    /// Figure fill colors, sampled uniformly per instance.
    pub figure_palette: Vec<[f64; 3]>,
    /// Gaussian blur sigma range applied to the finished scene.
    pub blur_sigma: (f64, f64),
    /// Number of striped occluder rectangles (inclusive range).
    pub occluders: (usize, usize),
    /// Multiplicative brightness range.
    pub brightness: (f64, f64),
    /// Contrast range (scaling around the image mean).
    pub contrast: (f64, f64),
    /// Downsample-upsample factor range (1 disables the cycle).
    pub downsample: (u32, u32),
}

impl Default for DomainParams {
    fn default() -> Self {
        DomainParams::source_default()
    }
}

impl DomainParams {
    /// Bright, clean scenes.
    pub fn source_default() -> DomainParams {
        DomainParams {
            background_mean: [0.82, 0.80, 0.76],
            background_std: [0.03, 0.03, 0.03],
            figure_palette: vec![
                [0.20, 0.35, 0.70],
                [0.70, 0.25, 0.20],
                [0.20, 0.55, 0.30],
                [0.55, 0.30, 0.60],
            ],
            blur_sigma: (0.0, 0.3),
            occluders: (0, 0),
            brightness: (0.95, 1.05),
            contrast: (0.95, 1.05),
            downsample: (1, 1),
        }
    }

    /// Darker, blue-shifted, blurred, cluttered scenes.
    pub fn target_default() -> DomainParams {
        DomainParams {
            background_mean: [0.30, 0.38, 0.46],
            background_std: [0.04, 0.04, 0.04],
            figure_palette: vec![
                [0.16, 0.42, 0.46],
                [0.24, 0.46, 0.40],
                [0.38, 0.42, 0.50],
                [0.30, 0.34, 0.44],
            ],
            blur_sigma: (0.8, 1.6),
            occluders: (1, 3),
            brightness: (0.72, 0.95),
            contrast: (0.80, 1.00),
            downsample: (1, 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.figure_palette.is_empty() {
            return Err(CoreError::Config("domain: empty figure palette".into()));
        }
        let range_ok = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 <= r.1;
        if !range_ok(self.blur_sigma) || self.blur_sigma.0 < 0.0 {
            return Err(CoreError::Config("domain: bad blur_sigma range".into()));
        }
        if !range_ok(self.brightness)
            || !range_ok(self.contrast)
            || self.brightness.0 <= 0.0
            || self.contrast.0 <= 0.0
        {
            return Err(CoreError::Config("domain: bad brightness/contrast range".into()));
        }
        if self.occluders.0 > self.occluders.1 {
            return Err(CoreError::Config("domain: bad occluder range".into()));
        }
        if self.downsample.0 == 0 || self.downsample.0 > self.downsample.1 {
            return Err(CoreError::Config("domain: bad downsample range".into()));
        }
        for v in self
            .background_mean
            .iter()
            .chain(self.background_std.iter())
            .chain(self.figure_palette.iter().flatten())
        {
            if !v.is_finite() {
                return Err(CoreError::NonFinite("domain color parameter".into()));
            }
        }
        Ok(())
    }

    /// A measurable shift must exist between the two domains: palette means
    /// and blur ranges must differ.
    pub fn check_domain_gap(source: &DomainParams, target: &DomainParams) -> Result<()> {
        let mean_gap: f64 = source
            .background_mean
            .iter()
            .zip(&target.background_mean)
            .map(|(a, b)| (a - b).abs())
            .sum();
        if mean_gap < 1e-3 {
            return Err(CoreError::Config(
                "domains: background palette means are indistinguishable".into(),
            ));
        }
        if source.blur_sigma == target.blur_sigma {
            return Err(CoreError::Config("domains: blur ranges are identical".into()));
        }
        Ok(())
    }
}

/// Bone-length and pose ranges for figure sampling, as fractions of figure
/// height (pixels for nothing; everything scales with the sampled height).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FigureRanges {
    /// Figure height as a fraction of image height.
    pub height_frac: (f64, f64),
    pub torso_frac: f64,
    pub neck_frac: f64,
    pub leg_frac: f64,
    pub shoulder_halfw_frac: (f64, f64),
    pub hip_halfw_frac: (f64, f64),
    pub thickness_frac: (f64, f64),
    pub head_radius_frac: (f64, f64),
    /// Whole-figure lean angle range (radians).
    pub lean: (f64, f64),
    /// Per-leg swing angle range away from straight down (radians).
    pub leg_swing: (f64, f64),
}

impl Default for FigureRanges {
    fn default() -> Self {
        FigureRanges {
            height_frac: (0.40, 0.70),
            torso_frac: 0.42,
            neck_frac: 0.12,
            leg_frac: 0.46,
            shoulder_halfw_frac: (0.11, 0.16),
            hip_halfw_frac: (0.07, 0.11),
            thickness_frac: (0.050, 0.075),
            head_radius_frac: (0.09, 0.13),
            lean: (-0.30, 0.30),
            leg_swing: (-0.40, 0.40),
        }
    }
}

/// Scene-level generation settings shared by both domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub image_width: usize,
    pub image_height: usize,
    /// Inclusive range of figures per scene.
    pub instances: (usize, usize),
    pub figure: FigureRanges,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_width: 192,
            image_height: 144,
            instances: (1, 4),
            figure: FigureRanges::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_width < 32 || self.image_height < 32 {
            return Err(CoreError::Config("scene: image smaller than 32x32".into()));
        }
        if self.instances.0 > self.instances.1 {
            return Err(CoreError::Config("scene: bad instance count range".into()));
        }
        let f = &self.figure;
        if !(f.height_frac.0 > 0.0 && f.height_frac.0 <= f.height_frac.1 && f.height_frac.1 <= 1.0)
        {
            return Err(CoreError::Config("scene: bad figure height range".into()));
        }
        Ok(())
    }
}

/// A fully determined figure: concrete bone lengths, pose angles, placement,
/// and color. Building one from explicit values (rather than an RNG) is what
/// makes mirror-symmetry checks possible.
#[derive(Clone, Debug, PartialEq)]
pub struct FigurePose {
    /// Torso center in image coordinates.
    pub center: [f64; 2],
    pub height: f64,
    pub lean: f64,
    pub leg_swing_l: f64,
    pub leg_swing_r: f64,
    pub shoulder_halfw: f64,
    pub hip_halfw: f64,
    pub thickness: f64,
    pub head_radius: f64,
    pub torso_len: f64,
    pub neck_len: f64,
    pub leg_len: f64,
    pub color: [f64; 3],
}

impl FigurePose {
    pub fn sample(rng: &mut ChaCha8Rng, cfg: &SceneConfig, palette: &[[f64; 3]]) -> FigurePose {
        fn draw(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
            if r.0 == r.1 {
                r.0
            } else {
                rng.random_range(r.0..r.1)
            }
        }
        let f = &cfg.figure;
        let h = cfg.image_height as f64;
        let height = rng.random_range(f.height_frac.0..=f.height_frac.1) * h;
        let cx = rng.random_range(0.18..0.82) * cfg.image_width as f64;
        let cy = rng.random_range(0.30..0.70) * h;
        let color = palette[rng.random_range(0..palette.len())];
        FigurePose {
            center: [cx, cy],
            height,
            lean: draw(rng, f.lean),
            leg_swing_l: draw(rng, f.leg_swing),
            leg_swing_r: draw(rng, f.leg_swing),
            shoulder_halfw: draw(rng, f.shoulder_halfw_frac) * height,
            hip_halfw: draw(rng, f.hip_halfw_frac) * height,
            thickness: draw(rng, f.thickness_frac) * height,
            head_radius: draw(rng, f.head_radius_frac) * height,
            torso_len: f.torso_frac * height,
            neck_len: f.neck_frac * height,
            leg_len: f.leg_frac * height,
            color,
        }
    }

    /// The same figure mirrored about the vertical line `x = image_width / 2`.
    pub fn mirrored(&self, image_width: usize) -> FigurePose {
        FigurePose {
            center: [image_width as f64 - self.center[0], self.center[1]],
            lean: -self.lean,
            leg_swing_l: -self.leg_swing_r,
            leg_swing_r: -self.leg_swing_l,
            ..self.clone()
        }
    }

    /// Joint positions in image coordinates, in keypoint-slot order.
    pub fn joints(&self) -> [[f64; 2]; NUM_KEYPOINTS] {
        let t2 = self.torso_len / 2.0;
        // Local coordinates, y down, before lean.
        let local: [[f64; 2]; NUM_KEYPOINTS] = [
            [0.0, -t2 - self.neck_len],
            [-self.shoulder_halfw, -t2],
            [self.shoulder_halfw, -t2],
            [-self.hip_halfw, t2],
            [self.hip_halfw, t2],
            [
                -self.hip_halfw + self.leg_len * self.leg_swing_l.sin(),
                t2 + self.leg_len * self.leg_swing_l.cos(),
            ],
            [
                self.hip_halfw + self.leg_len * self.leg_swing_r.sin(),
                t2 + self.leg_len * self.leg_swing_r.cos(),
            ],
        ];
        let (s, c) = self.lean.sin_cos();
        local.map(|[x, y]| {
            [
                self.center[0] + c * x - s * y,
                self.center[1] + s * x + c * y,
            ]
        })
    }

    /// Capsules (segment + radius) and the head disc making up the body.
    fn capsules(&self) -> Vec<([f64; 2], [f64; 2], f64)> {
        let j = self.joints();
        let mid = |a: [f64; 2], b: [f64; 2]| [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
        let mid_sh = mid(j[KP_L_SHOULDER], j[KP_R_SHOULDER]);
        let mid_hip = mid(j[KP_L_HIP], j[KP_R_HIP]);
        let t = self.thickness;
        vec![
            (j[KP_HEAD], j[KP_HEAD], self.head_radius),
            (j[KP_HEAD], mid_sh, 0.8 * t),
            (j[KP_L_SHOULDER], j[KP_R_SHOULDER], t),
            (j[KP_L_HIP], j[KP_R_HIP], t),
            (j[KP_L_SHOULDER], j[KP_L_HIP], t),
            (j[KP_R_SHOULDER], j[KP_R_HIP], t),
            (mid_sh, mid_hip, 1.7 * t),
            (j[KP_L_HIP], j[KP_L_FOOT], t),
            (j[KP_R_HIP], j[KP_R_FOOT], t),
        ]
    }

    /// Silhouette outline in image coordinates, traced from the capsule
    /// union's signed distance field on a 1 px grid.
    pub fn silhouette(&self) -> Vec<[f64; 2]> {
        let caps = self.capsules();
        let mut min_x = f64::INFINITY;
        let mut min_y = f64::INFINITY;
        let mut max_x = f64::NEG_INFINITY;
        let mut max_y = f64::NEG_INFINITY;
        for (a, b, r) in &caps {
            min_x = min_x.min(a[0] - r).min(b[0] - r);
            min_y = min_y.min(a[1] - r).min(b[1] - r);
            max_x = max_x.max(a[0] + r).max(b[0] + r);
            max_y = max_y.max(a[1] + r).max(b[1] + r);
        }
        let margin = 2.0;
        let ox = (min_x - margin).floor();
        let oy = (min_y - margin).floor();
        let gw = ((max_x + margin).ceil() - ox) as usize;
        let gh = ((max_y + margin).ceil() - oy) as usize;
        let mut field = vec![0.0; gw * gh];
        for gy in 0..gh {
            for gx in 0..gw {
                let px = ox + gx as f64 + 0.5;
                let py = oy + gy as f64 + 0.5;
                // Inside-positive distance to the capsule union.
                let mut d = f64::NEG_INFINITY;
                for (a, b, r) in &caps {
                    d = d.max(r - segment_distance(px, py, *a, *b));
                }
                field[gy * gw + gx] = d;
            }
        }
        largest_iso_contour(&field, gw, gh, 0.0)
            .into_iter()
            .map(|[x, y]| [x + ox, y + oy])
            .collect()
    }
}

fn segment_distance(px: f64, py: f64, a: [f64; 2], b: [f64; 2]) -> f64 {
    let abx = b[0] - a[0];
    let aby = b[1] - a[1];
    let apx = px - a[0];
    let apy = py - a[1];
    let len2 = abx * abx + aby * aby;
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0)
    };
    let dx = apx - t * abx;
    let dy = apy - t * aby;
    (dx * dx + dy * dy).sqrt()
}

/// Striped rectangle drawn over the scene to emulate instrument clutter.
#[derive(Clone, Debug)]
struct Occluder {
    rect: [f64; 4],
    color_a: [f64; 3],
    color_b: [f64; 3],
    /// Stripe direction and band width.
    dir: [f64; 2],
    band: f64,
}

impl Occluder {
    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.rect[0] && x < self.rect[2] && y >= self.rect[1] && y < self.rect[3]
    }

    fn color_at(&self, x: f64, y: f64) -> [f64; 3] {
        let phase = (x * self.dir[0] + y * self.dir[1]) / self.band;
        if (phase.floor() as i64).rem_euclid(2) == 0 {
            self.color_a
        } else {
            self.color_b
        }
    }
}

/// Build a figure instance annotation from its geometry.
fn instance_from_pose(pose: &FigurePose, polygon: Vec<[f64; 2]>) -> Instance {
    let bbox = polygon_bbox(&polygon);
    let keypoints = pose
        .joints()
        .iter()
        .map(|&[x, y]| Keypoint { x, y, v: VIS_VISIBLE })
        .collect();
    Instance { bbox, keypoints, polygon, score: None }
}

/// Fraction of the frame covered by the box.
fn visible_fraction(bbox: &[f64; 4], w: usize, h: usize) -> f64 {
    let ix = (bbox[2].min(w as f64) - bbox[0].max(0.0)).max(0.0);
    let iy = (bbox[3].min(h as f64) - bbox[1].max(0.0)).max(0.0);
    let area = (bbox[2] - bbox[0]).max(1e-9) * (bbox[3] - bbox[1]).max(1e-9);
    ix * iy / area
}

/// Generate one scene. Fully determined by `seed`: the same seed always
/// yields a bit-identical image and annotation list.
pub fn generate_scene(
    seed: u64,
    domain: &DomainParams,
    cfg: &SceneConfig,
) -> Result<(ImageF, Vec<Instance>)> {
    domain.validate()?;
    cfg.validate()?;
    let (w, h) = (cfg.image_width, cfg.image_height);

    // Background: jittered base color, vertical shading ramp, fine noise.
    let mut bg_rng = stream(seed, "background", 0);
    let base: [f64; 3] = std::array::from_fn(|c| {
        domain.background_mean[c] + domain.background_std[c] * gauss(&mut bg_rng)
    });
    let mut img = ImageF::filled(w, h, base);
    let ramp_strength = bg_rng.random_range(0.04..0.10);
    for c in 0..3 {
        for y in 0..h {
            let ramp = 1.0 + ramp_strength * (y as f64 / h as f64 - 0.5);
            for x in 0..w {
                let v = img.get(c, x, y) * ramp + 0.015 * gauss(&mut bg_rng);
                img.set(c, x, y, v);
            }
        }
    }

    // Figures.
    let mut place_rng = stream(seed, "figures", 0);
    let count = if cfg.instances.0 == cfg.instances.1 {
        cfg.instances.0
    } else {
        place_rng.random_range(cfg.instances.0..=cfg.instances.1)
    };
    let mut poses: Vec<FigurePose> = Vec::new();
    let mut instances: Vec<Instance> = Vec::new();
    for _ in 0..count {
        // Bounded retries for figures that land mostly outside the frame.
        let mut placed = false;
        for _ in 0..8 {
            let pose = FigurePose::sample(&mut place_rng, cfg, &domain.figure_palette);
            let polygon = pose.silhouette();
            if polygon.len() < 3 {
                continue;
            }
            let bbox = polygon_bbox(&polygon);
            if visible_fraction(&bbox, w, h) < 0.7 {
                continue;
            }
            instances.push(instance_from_pose(&pose, polygon));
            poses.push(pose);
            placed = true;
            break;
        }
        let _ = placed; // skipped figures are simply absent from the scene
    }
    for (pose, inst) in poses.iter().zip(&instances) {
        render_figure(&mut img, inst, pose.color);
    }

    // Occluders over the figures.
    let mut occ_rng = stream(seed, "occluders", 0);
    let occ_count = if domain.occluders.0 == domain.occluders.1 {
        domain.occluders.0
    } else {
        occ_rng.random_range(domain.occluders.0..=domain.occluders.1)
    };
    let mut occluders: Vec<Occluder> = Vec::new();
    for _ in 0..occ_count {
        if instances.is_empty() {
            break;
        }
        let inst = &instances[occ_rng.random_range(0..instances.len())];
        let [x1, y1, x2, y2] = inst.bbox;
        let (bw, bh) = (x2 - x1, y2 - y1);
        // Occluder caps at sqrt(0.4) of each box side, so the overlap with
        // the figure box never exceeds 40% of the box area.
        let ow = occ_rng.random_range(0.25..0.63) * bw;
        let oh = occ_rng.random_range(0.25..0.63) * bh;
        let cx = occ_rng.random_range(x1..x2);
        let cy = occ_rng.random_range(y1..y2);
        let gray = occ_rng.random_range(0.35..0.75);
        let tint = occ_rng.random_range(-0.08..0.08);
        occluders.push(Occluder {
            rect: [cx - ow / 2.0, cy - oh / 2.0, cx + ow / 2.0, cy + oh / 2.0],
            color_a: [gray, gray, gray + tint],
            color_b: [gray - 0.15, gray - 0.15, gray - 0.15 + tint],
            dir: {
                let ang = occ_rng.random_range(0.0..std::f64::consts::PI);
                [ang.cos(), ang.sin()]
            },
            band: occ_rng.random_range(2.0..5.0),
        });
    }
    for occ in &occluders {
        let x_lo = occ.rect[0].max(0.0).floor() as usize;
        let y_lo = occ.rect[1].max(0.0).floor() as usize;
        let x_hi = (occ.rect[2].ceil() as usize).min(w);
        let y_hi = (occ.rect[3].ceil() as usize).min(h);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if occ.contains(px, py) {
                    let col = occ.color_at(px, py);
                    for c in 0..3 {
                        img.set(c, x, y, col[c]);
                    }
                }
            }
        }
    }

    // Keypoints covered by an occluder or a later-drawn figure are occluded.
    let polygons: Vec<Vec<[f64; 2]>> = instances.iter().map(|i| i.polygon.clone()).collect();
    for (i, inst) in instances.iter_mut().enumerate() {
        for kp in &mut inst.keypoints {
            let covered_by_occ = occluders.iter().any(|o| o.contains(kp.x, kp.y));
            let covered_by_figure =
                polygons[i + 1..].iter().any(|p| point_in_polygon(kp.x, kp.y, p));
            if covered_by_occ || covered_by_figure {
                kp.v = VIS_OCCLUDED;
            }
        }
    }

    // Photometric degradation, blur, then the optional resolution cycle.
    let mut photo_rng = stream(seed, "photometric", 0);
    let brightness = photo_rng.random_range(domain.brightness.0..=domain.brightness.1);
    let contrast = photo_rng.random_range(domain.contrast.0..=domain.contrast.1);
    let mean = img.mean_rgb();
    let gray_mean = (mean[0] + mean[1] + mean[2]) / 3.0;
    img.map_pixels(|_, v| ((v - gray_mean) * contrast + gray_mean) * brightness);
    img.clamp01();
    let sigma = photo_rng.random_range(domain.blur_sigma.0..=domain.blur_sigma.1);
    if sigma > 0.0 {
        img = img.gaussian_blur(sigma);
    }
    let factor = if domain.downsample.0 == domain.downsample.1 {
        domain.downsample.0
    } else {
        photo_rng.random_range(domain.downsample.0..=domain.downsample.1)
    };
    if factor > 1 {
        let lw = (w as u32 / factor).max(1) as usize;
        let lh = (h as u32 / factor).max(1) as usize;
        img = img.resize_bilinear(lw, lh).resize_bilinear(w, h);
    }
    img.clamp01();
    Ok((img, instances))
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller from two uniform draws.
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Paint a silhouette polygon with 2x supersampled coverage blending.
fn render_figure(img: &mut ImageF, inst: &Instance, color: [f64; 3]) {
    let (w, h) = (img.width, img.height);
    let doubled: Vec<[f64; 2]> = inst.polygon.iter().map(|&[x, y]| [2.0 * x, 2.0 * y]).collect();
    let fine = rasterize_polygon(&doubled, 2 * w, 2 * h);
    let [bx1, by1, bx2, by2] = inst.bbox;
    let x_lo = bx1.max(0.0).floor() as usize;
    let y_lo = by1.max(0.0).floor() as usize;
    let x_hi = (bx2.ceil() as usize + 1).min(w);
    let y_hi = (by2.ceil() as usize + 1).min(h);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let cov = (fine[(2 * y) * 2 * w + 2 * x]
                + fine[(2 * y) * 2 * w + 2 * x + 1]
                + fine[(2 * y + 1) * 2 * w + 2 * x]
                + fine[(2 * y + 1) * 2 * w + 2 * x + 1])
                / 4.0;
            if cov > 0.0 {
                for c in 0..3 {
                    let v = img.get(c, x, y);
                    img.set(c, x, y, v * (1.0 - cov) + color[c] * cov);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Corpus files

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub file: String,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub master_seed: u64,
    pub domain: DomainParams,
    pub scene: SceneConfig,
    /// SHA-256 over the serialized domain + scene parameters.
    pub params_hash: String,
    /// Intermediate `[width, height]` of the downsample-upsample degradation
    /// when the domain uses a fixed factor greater than one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intermediate: Option<[usize; 2]>,
    pub items: Vec<ManifestItem>,
}

impl CorpusManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::format("manifest", e.to_string()))?;
        std::fs::write(path, text).map_err(|e| CoreError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<CorpusManifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        serde_json::from_str(&text)
            .map_err(|e| CoreError::format(path.display().to_string(), e.to_string()))
    }
}

/// Hash identifying the generator parameterization.
pub fn params_hash(domain: &DomainParams, scene: &SceneConfig) -> Result<String> {
    let blob = serde_json::to_vec(&(domain, scene))
        .map_err(|e| CoreError::format("params hash", e.to_string()))?;
    let digest = Sha256::digest(&blob);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Generate `count` scenes into `out_dir`: PNG images, one `annotations.json`
/// in the shared schema, and a `manifest.json` with per-image seeds.
pub fn generate_corpus(
    master_seed: u64,
    domain: &DomainParams,
    cfg: &SceneConfig,
    count: usize,
    out_dir: &Path,
) -> Result<CorpusManifest> {
    domain.validate()?;
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CoreError::io(out_dir.display().to_string(), e))?;
    let hash = params_hash(domain, cfg)?;

    let mut images = Vec::with_capacity(count);
    let mut annotations = Vec::new();
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let seed = derive_seed(master_seed, "scene", i as u64);
        let (img, instances) = generate_scene(seed, domain, cfg)?;
        let file = format!("img_{i:05}.png");
        img.save_png(&out_dir.join(&file))?;
        let id = i as u64;
        images.push(ImageRecord {
            id,
            file: file.clone(),
            width: cfg.image_width,
            height: cfg.image_height,
        });
        for inst in &instances {
            annotations.push(AnnotationRecord::from_instance(id, inst));
        }
        items.push(ManifestItem { file, seed });
    }
    AnnotationFile {
        images,
        annotations,
        meta: MetaRecord {
            num_keypoints: NUM_KEYPOINTS,
            chirality_pairs: chirality_pairs(),
            generator_hash: hash.clone(),
        },
        provenance: None,
    }
    .save(&out_dir.join("annotations.json"))?;
    let intermediate = if domain.downsample.0 == domain.downsample.1 && domain.downsample.0 > 1 {
        let f = domain.downsample.0;
        Some([
            (cfg.image_width as u32 / f).max(1) as usize,
            (cfg.image_height as u32 / f).max(1) as usize,
        ])
    } else {
        None
    };
    let manifest = CorpusManifest {
        format_version: 1,
        master_seed,
        domain: domain.clone(),
        scene: cfg.clone(),
        params_hash: hash,
        intermediate,
        items,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// One corpus image on disk plus its ground-truth instances.
#[derive(Clone, Debug)]
pub struct CorpusItem {
    pub image_path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub instances: Vec<Instance>,
}

impl CorpusItem {
    pub fn load_image(&self) -> Result<ImageF> {
        ImageF::load_png(&self.image_path)
    }
}

/// Loaded corpus index: lightweight records; images are decoded on demand.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub items: Vec<CorpusItem>,
    pub meta: MetaRecord,
}

/// Read any directory in the shared annotation schema (generated corpora and
/// future real datasets alike).
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let file = AnnotationFile::load(&dir.join("annotations.json"))?;
    let per_image = file.instances_per_image()?;
    let items = file
        .images
        .iter()
        .zip(per_image)
        .map(|(rec, instances)| CorpusItem {
            image_path: dir.join(&rec.file),
            width: rec.width,
            height: rec.height,
            instances,
        })
        .collect();
    Ok(Corpus { items, meta: file.meta })
}
