//! Single-stage grid detector with objectness, box, keypoint-heatmap, and
//! mask heads on a shared convolutional trunk.
//!
//! Every group-normalization layer can be split into two parameter banks —
//! one normalizing source-domain activations, one target-domain — while all
//! convolutional weights stay shared. Per-cell heads predict, for each grid
//! cell: an objectness logit, four box-corner offsets in grid-stride units
//! from the cell center, K keypoint heatmaps over a box-normalized window,
//! and a mask logit grid over the same window.

pub mod checkpoint;
pub mod contour;
pub mod decode;
pub mod loss;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::imagebuf::ImageF;
use crate::micrograd::{ops, optim, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrunkStageConfig {
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub objectness: f64,
    pub bbox: f64,
    pub keypoint: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            objectness: 1.0,
            bbox: 1.0,
            keypoint: 1.0,
            mask: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub input_channels: usize,
    pub trunk: Vec<TrunkStageConfig>,
    pub gn_groups: usize,
    /// Pixels per grid cell; must equal the product of trunk strides.
    pub grid_stride: usize,
    pub num_keypoints: usize,
    /// Per-instance keypoint heatmap resolution (h, w).
    pub heatmap_size: (usize, usize),
    /// Per-instance mask logit resolution (h, w).
    pub mask_size: (usize, usize),
    pub loss_weights: LossWeights,
    pub score_floor: f64,
    pub nms_iou: f64,
    pub gn_eps: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub smooth_l1_beta: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            input_channels: 3,
            trunk: vec![
                TrunkStageConfig { out_channels: 16, stride: 2 },
                TrunkStageConfig { out_channels: 32, stride: 2 },
                TrunkStageConfig { out_channels: 32, stride: 2 },
            ],
            gn_groups: 8,
            grid_stride: 8,
            num_keypoints: 7,
            heatmap_size: (24, 24),
            mask_size: (24, 24),
            loss_weights: LossWeights::default(),
            score_floor: 0.05,
            nms_iou: 0.5,
            gn_eps: 1e-5,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            smooth_l1_beta: 1.0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trunk.is_empty() {
            return Err(CoreError::Config("detector: empty trunk".into()));
        }
        let stride_product: usize = self.trunk.iter().map(|s| s.stride).product();
        if stride_product != self.grid_stride {
            return Err(CoreError::Config(format!(
                "detector: grid_stride {} != product of trunk strides {}",
                self.grid_stride, stride_product
            )));
        }
        for st in &self.trunk {
            if st.out_channels == 0 || st.out_channels % self.gn_groups != 0 {
                return Err(CoreError::Config(format!(
                    "detector: channel count {} not divisible by gn_groups {}",
                    st.out_channels, self.gn_groups
                )));
            }
            if st.stride == 0 {
                return Err(CoreError::Config("detector: zero stride stage".into()));
            }
        }
        if self.num_keypoints == 0 {
            return Err(CoreError::Config("detector: num_keypoints must be > 0".into()));
        }
        if self.heatmap_size.0 == 0
            || self.heatmap_size.1 == 0
            || self.mask_size.0 == 0
            || self.mask_size.1 == 0
        {
            return Err(CoreError::Config("detector: zero heatmap/mask size".into()));
        }
        if !(0.0..=1.0).contains(&self.score_floor) {
            return Err(CoreError::Config(format!(
                "detector: score_floor {} outside [0, 1]",
                self.score_floor
            )));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(CoreError::Config(format!(
                "detector: nms_iou {} outside (0, 1)",
                self.nms_iou
            )));
        }
        if !(self.gn_eps > 0.0) {
            return Err(CoreError::Config("detector: gn_eps must be > 0".into()));
        }
        Ok(())
    }

    pub fn kp_channels(&self) -> usize {
        self.num_keypoints * self.heatmap_size.0 * self.heatmap_size.1
    }

    pub fn mask_channels(&self) -> usize {
        self.mask_size.0 * self.mask_size.1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

/// Which GN bank normalizes activations in single-bank inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bank {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Per-image domain tags pick the bank (when dual-bank is enabled).
    Train,
    /// One explicit bank for every image regardless of tags.
    Infer(Bank),
}

pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub struct GnLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    /// Target-domain bank, present only after `enable_dfn`.
    pub gamma_t: Option<Tensor>,
    pub beta_t: Option<Tensor>,
}

pub struct TrunkStage {
    pub conv: ConvLayer,
    pub gn: GnLayer,
    pub stride: usize,
}

pub struct ModelWeights {
    pub config: DetectorConfig,
    pub trunk: Vec<TrunkStage>,
    pub head_obj: ConvLayer,
    pub head_box: ConvLayer,
    pub head_kp: ConvLayer,
    pub head_mask: ConvLayer,
    dual_bank: bool,
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, rg: bool) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data, rg).expect("init shape")
}

fn conv_layer(
    rng: &mut ChaCha8Rng,
    out_c: usize,
    in_c: usize,
    k: usize,
    bias_init: f64,
    rg: bool,
) -> ConvLayer {
    ConvLayer {
        kernel: kaiming_uniform(rng, &[out_c, in_c, k, k], in_c * k * k, rg),
        bias: Tensor::new(&[out_c], vec![bias_init; out_c], rg).expect("bias"),
    }
}

impl ModelWeights {
    /// Fresh single-bank weights. The objectness bias starts at the focal
    /// prior logit ln(0.01/0.99) so early training predicts background.
    pub fn init(config: &DetectorConfig, rng: &mut ChaCha8Rng) -> Result<ModelWeights> {
        config.validate()?;
        let rg = true;
        let mut trunk = Vec::new();
        let mut in_c = config.input_channels;
        for st in &config.trunk {
            let conv = conv_layer(rng, st.out_channels, in_c, 3, 0.0, rg);
            let gn = GnLayer {
                gamma: Tensor::new(&[st.out_channels], vec![1.0; st.out_channels], rg)?,
                beta: Tensor::new(&[st.out_channels], vec![0.0; st.out_channels], rg)?,
                gamma_t: None,
                beta_t: None,
            };
            trunk.push(TrunkStage { conv, gn, stride: st.stride });
            in_c = st.out_channels;
        }
        let prior = (0.01f64 / 0.99).ln();
        let head_obj = {
            let mut l = conv_layer(rng, 1, in_c, 1, 0.0, rg);
            l.bias = Tensor::new(&[1], vec![prior], rg)?;
            l
        };
        Ok(ModelWeights {
            config: config.clone(),
            trunk,
            head_obj,
            head_box: conv_layer(rng, 4, in_c, 1, 0.0, rg),
            head_kp: conv_layer(rng, config.kp_channels(), in_c, 1, 0.0, rg),
            head_mask: conv_layer(rng, config.mask_channels(), in_c, 1, 0.0, rg),
            dual_bank: false,
        })
    }

    /// All-zero weights of the right shapes (checkpoint loading scaffold).
    pub fn zeros(config: &DetectorConfig, dual_bank: bool, requires_grad: bool) -> Result<ModelWeights> {
        config.validate()?;
        let rg = requires_grad;
        let mut trunk = Vec::new();
        let mut in_c = config.input_channels;
        for st in &config.trunk {
            let z = |shape: &[usize]| Tensor::zeros(shape, rg);
            trunk.push(TrunkStage {
                conv: ConvLayer {
                    kernel: z(&[st.out_channels, in_c, 3, 3]),
                    bias: z(&[st.out_channels]),
                },
                gn: GnLayer {
                    gamma: z(&[st.out_channels]),
                    beta: z(&[st.out_channels]),
                    gamma_t: dual_bank.then(|| z(&[st.out_channels])),
                    beta_t: dual_bank.then(|| z(&[st.out_channels])),
                },
                stride: st.stride,
            });
            in_c = st.out_channels;
        }
        let z1 = |o: usize| ConvLayer {
            kernel: Tensor::zeros(&[o, in_c, 1, 1], rg),
            bias: Tensor::zeros(&[o], rg),
        };
        Ok(ModelWeights {
            config: config.clone(),
            trunk,
            head_obj: z1(1),
            head_box: z1(4),
            head_kp: z1(config.kp_channels()),
            head_mask: z1(config.mask_channels()),
            dual_bank,
        })
    }

    pub fn dual_bank(&self) -> bool {
        self.dual_bank
    }

    /// Duplicate every GN bank into (source, target) with identical values.
    pub fn enable_dfn(&mut self) -> Result<()> {
        if self.dual_bank {
            return Err(CoreError::Config("enable_dfn: weights already dual-bank".into()));
        }
        for st in &mut self.trunk {
            let gt = st.gn.gamma.detach_copy();
            let bt = st.gn.beta.detach_copy();
            // Target banks train like any other parameter.
            let gt = Tensor::new(&gt.shape(), gt.data(), st.gn.gamma.requires_grad())?;
            let bt = Tensor::new(&bt.shape(), bt.data(), st.gn.beta.requires_grad())?;
            st.gn.gamma_t = Some(gt);
            st.gn.beta_t = Some(bt);
        }
        self.dual_bank = true;
        Ok(())
    }

    /// Named parameters in fixed declaration order (drives SGD, EMA, and the
    /// checkpoint layout).
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, st) in self.trunk.iter().enumerate() {
            out.push((format!("trunk{i}.conv.kernel"), st.conv.kernel.clone()));
            out.push((format!("trunk{i}.conv.bias"), st.conv.bias.clone()));
            out.push((format!("trunk{i}.gn.gamma"), st.gn.gamma.clone()));
            out.push((format!("trunk{i}.gn.beta"), st.gn.beta.clone()));
            if let (Some(gt), Some(bt)) = (&st.gn.gamma_t, &st.gn.beta_t) {
                out.push((format!("trunk{i}.gn.gamma_t"), gt.clone()));
                out.push((format!("trunk{i}.gn.beta_t"), bt.clone()));
            }
        }
        for (name, layer) in [
            ("head_obj", &self.head_obj),
            ("head_box", &self.head_box),
            ("head_kp", &self.head_kp),
            ("head_mask", &self.head_mask),
        ] {
            out.push((format!("{name}.kernel"), layer.kernel.clone()));
            out.push((format!("{name}.bias"), layer.bias.clone()));
        }
        out
    }

    /// Deep copy; `requires_grad` false yields frozen weights (teacher).
    pub fn deep_copy(&self, requires_grad: bool) -> Result<ModelWeights> {
        let out = ModelWeights::zeros(&self.config, self.dual_bank, requires_grad)?;
        for ((_, src), (name, dst)) in self.params().iter().zip(out.params()) {
            dst.set_data(&src.data())
                .map_err(|_| CoreError::Shape(format!("deep_copy mismatch in {name}")))?;
        }
        Ok(out)
    }

    pub fn clear_grads(&self) {
        for (_, t) in self.params() {
            t.clear_grad();
        }
    }

    /// EMA update of `self` (teacher) toward `student`.
    pub fn ema_from(&mut self, student: &ModelWeights, alpha: f64) -> Result<()> {
        if self.dual_bank != student.dual_bank || self.config != student.config {
            return Err(CoreError::Shape("ema: teacher/student architecture mismatch".into()));
        }
        optim::ema_update(&self.params(), &student.params(), alpha)
    }

    /// Grid size produced by the trunk for an input of `w x h` pixels.
    pub fn grid_size(&self, img_w: usize, img_h: usize) -> (usize, usize) {
        let mut w = img_w;
        let mut h = img_h;
        for st in &self.trunk {
            // conv k=3 pad=1: out = floor((n - 1) / stride) + 1 = ceil(n / stride)
            w = (w - 1) / st.stride + 1;
            h = (h - 1) / st.stride + 1;
        }
        (w, h)
    }
}

/// Raw per-image head outputs plus the geometry needed to interpret them.
pub struct ImagePreds {
    pub img_w: usize,
    pub img_h: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    /// `[1, 1, gh, gw]` objectness logits.
    pub obj: Tensor,
    /// `[1, 4, gh, gw]` box corner offsets in grid-stride units.
    pub bbox: Tensor,
    /// `[1, K*hh*hw, gh, gw]` keypoint heatmap logits.
    pub kp: Tensor,
    /// `[1, mh*mw, gh, gw]` mask logits.
    pub mask: Tensor,
}

/// Batch predictions, one entry per input image (input order preserved).
pub struct Predictions {
    pub per_image: Vec<ImagePreds>,
}

/// Run the detector. In train mode with dual banks enabled the batch must be
/// ordered source-half first, target-half second, and split exactly in half.
pub fn forward(
    tape: &mut Tape,
    weights: &ModelWeights,
    images: &[&ImageF],
    domains: &[Domain],
    mode: ForwardMode,
) -> Result<Predictions> {
    if images.is_empty() {
        return Err(CoreError::Shape("forward: empty batch".into()));
    }
    if images.len() != domains.len() {
        return Err(CoreError::Shape(format!(
            "forward: {} images vs {} domain tags",
            images.len(),
            domains.len()
        )));
    }
    if weights.dual_bank && mode == ForwardMode::Train {
        let n = images.len();
        let half_ok = n % 2 == 0
            && domains[..n / 2].iter().all(|d| *d == Domain::Source)
            && domains[n / 2..].iter().all(|d| *d == Domain::Target);
        if !half_ok {
            return Err(CoreError::Config(
                "forward: dual-bank train batch must be source half then target half".into(),
            ));
        }
    }
    if matches!(mode, ForwardMode::Infer(Bank::Target)) && !weights.dual_bank {
        return Err(CoreError::Config(
            "forward: target-bank inference requires dual-bank weights".into(),
        ));
    }
    let mut per_image = Vec::with_capacity(images.len());
    for (img, domain) in images.iter().zip(domains) {
        let use_target_bank = weights.dual_bank
            && match mode {
                ForwardMode::Train => *domain == Domain::Target,
                ForwardMode::Infer(bank) => bank == Bank::Target,
            };
        per_image.push(forward_one(tape, weights, img, use_target_bank)?);
    }
    Ok(Predictions { per_image })
}

fn forward_one(
    tape: &mut Tape,
    weights: &ModelWeights,
    img: &ImageF,
    use_target_bank: bool,
) -> Result<ImagePreds> {
    let cfg = &weights.config;
    // Center the input around zero.
    let data: Vec<f64> = img.data.iter().map(|v| v - 0.5).collect();
    let mut x = Tensor::new(&[1, cfg.input_channels, img.height, img.width], data, false)?;
    for st in &weights.trunk {
        let c = ops::conv2d(tape, &x, &st.conv.kernel, &st.conv.bias, st.stride, 1)?;
        let (gamma, beta) = if use_target_bank {
            (
                st.gn.gamma_t.as_ref().expect("dual bank"),
                st.gn.beta_t.as_ref().expect("dual bank"),
            )
        } else {
            (&st.gn.gamma, &st.gn.beta)
        };
        let n = ops::group_norm(tape, &c, gamma, beta, cfg.gn_groups, cfg.gn_eps)?;
        x = ops::relu(tape, &n)?;
    }
    let shape = x.shape();
    let (grid_h, grid_w) = (shape[2], shape[3]);
    let obj = ops::conv2d(tape, &x, &weights.head_obj.kernel, &weights.head_obj.bias, 1, 0)?;
    let bbox = ops::conv2d(tape, &x, &weights.head_box.kernel, &weights.head_box.bias, 1, 0)?;
    let kp = ops::conv2d(tape, &x, &weights.head_kp.kernel, &weights.head_kp.bias, 1, 0)?;
    let mask = ops::conv2d(tape, &x, &weights.head_mask.kernel, &weights.head_mask.bias, 1, 0)?;
    Ok(ImagePreds {
        img_w: img.width,
        img_h: img.height,
        grid_w,
        grid_h,
        obj,
        bbox,
        kp,
        mask,
    })
}
