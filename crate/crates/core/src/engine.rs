//! Training loops: mean-teacher unsupervised domain adaptation on combined
//! source/target batches, same-domain semi-supervised learning, plain
//! supervised training, and the two-stage offline pseudo-label baseline.
//!
//! One step of the adaptation loop: weak-augment the labeled and unlabeled
//! batches, strong-augment both, let the teacher label the weak unlabeled
//! views (source normalization bank), threshold those predictions into
//! pseudo labels, carry them into the strong views, forward the combined
//! batch (source half first), and update the student by SGD with momentum on
//! `L_s + lambda * L_u`. The teacher then takes an EMA step toward the
//! student. The teacher never accumulates gradients, and an identical
//! (config, seed) pair replays the whole trajectory bit-identically.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annot::{Instance, MetaRecord};
use crate::error::{CoreError, Result};
use crate::evalkit::{evaluate_protocol, model_infer, EvalProtocol};
use crate::geomaug::{
    apply_image, apply_instances, sample_strong, sample_weak, transport, validate_chirality,
    GeoTransform, StrongAugConfig, StrongAugRecord, WeakAugConfig,
};
use crate::imagebuf::ImageF;
use crate::micrograd::optim::{sgd_momentum_step, SgdState};
use crate::micrograd::{ops, Tape};
use crate::model::decode::decode;
use crate::model::loss::image_loss;
use crate::model::{forward, Bank, Domain, ForwardMode, ModelWeights};
use crate::pseudolabel::{
    aggregate_multi_transform, gamma, save_pseudo_labels, to_instances, AggregationConfig,
    PseudoLabelSet, PseudoProvenance, Thresholds,
};
use crate::rng::stream;
use crate::synthor::Corpus;

/// Which loop a run executes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SourceOnly,
    Uda,
    Ssl,
    OfflinePseudo,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::SourceOnly => "source_only",
            Mode::Uda => "uda",
            Mode::Ssl => "ssl",
            Mode::OfflinePseudo => "offline_pseudo",
        }
    }
}

/// Full training configuration. Defaults are the reference values: EMA decay
/// 0.9996, learning rate 0.001 with momentum 0.9, lambda 3.0 for adaptation
/// and 2.0 for semi-supervised runs, thresholds 0.7/0.1/0.5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Unsupervised loss weight; when absent the mode default applies
    /// (3.0 for uda, 2.0 for ssl, 0.0 otherwise).
    pub lambda_u: Option<f64>,
    pub alpha_ema: f64,
    pub lr: f64,
    pub momentum: f64,
    pub iterations: usize,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub thresholds: Thresholds,
    pub weak_aug: WeakAugConfig,
    pub strong_aug: StrongAugConfig,
    /// Multi-view aggregation for offline pseudo-label rounds.
    pub aggregation: AggregationConfig,
    pub chirality_pairs: Vec<[usize; 2]>,
    pub seed: u64,
    /// Evaluate every this many iterations (0 disables periodic eval).
    pub eval_every: usize,
    pub eval_protocol: EvalProtocol,
    /// Global gradient-norm clip; absent = no clipping.
    pub grad_clip_norm: Option<f64>,
    /// Alternative combined-batch composition: keep only the weakly
    /// augmented labeled copy (drops the strong labeled copy everywhere).
    pub labeled_weak_only: bool,
    /// Fill color for cutout rectangles.
    pub aug_fill_mean: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        let geo = WeakAugConfig { resize_lo: 120, resize_hi: 200, flip_prob: 0.5 };
        TrainConfig {
            mode: Mode::Uda,
            lambda_u: None,
            alpha_ema: 0.9996,
            lr: 1e-3,
            momentum: 0.9,
            iterations: 500,
            labeled_batch: 2,
            unlabeled_batch: 2,
            thresholds: Thresholds::default(),
            weak_aug: geo.clone(),
            strong_aug: StrongAugConfig {
                geo,
                cutout_side_lo: 12.0,
                cutout_side_hi: 28.0,
                ..StrongAugConfig::default()
            },
            aggregation: AggregationConfig::default(),
            chirality_pairs: vec![[1, 2], [3, 4], [5, 6]],
            seed: 17,
            eval_every: 0,
            eval_protocol: EvalProtocol {
                factors: vec![1, 12],
                resolutions: vec![120, 144, 168],
                oks_k: vec![0.08],
            },
            grad_clip_norm: None,
            labeled_weak_only: false,
            aug_fill_mean: [0.5; 3],
        }
    }
}

impl TrainConfig {
    /// The effective unsupervised loss weight.
    pub fn lambda(&self) -> f64 {
        self.lambda_u.unwrap_or(match self.mode {
            Mode::Uda => 3.0,
            Mode::Ssl => 2.0,
            Mode::SourceOnly | Mode::OfflinePseudo => 0.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha_ema) {
            return Err(CoreError::Config(format!(
                "alpha_ema {} must lie in [0, 1); 1 would freeze the teacher forever",
                self.alpha_ema
            )));
        }
        let lambda = self.lambda();
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(CoreError::Config(format!("lambda {lambda} must be finite and >= 0")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CoreError::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CoreError::Config(format!(
                "momentum {} must lie in [0, 1)",
                self.momentum
            )));
        }
        if self.labeled_batch == 0 {
            return Err(CoreError::Config("labeled_batch must be >= 1".into()));
        }
        if self.mode == Mode::Uda && self.labeled_batch != self.unlabeled_batch {
            return Err(CoreError::Config(format!(
                "uda mode requires labeled_batch == unlabeled_batch (got {} vs {})",
                self.labeled_batch, self.unlabeled_batch
            )));
        }
        if matches!(self.mode, Mode::Uda | Mode::Ssl) && self.unlabeled_batch == 0 {
            return Err(CoreError::Config("unlabeled_batch must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(CoreError::Config(format!("grad_clip_norm {c} must be > 0")));
            }
        }
        if self.aug_fill_mean.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Config("aug_fill_mean must be finite".into()));
        }
        self.thresholds.validate()?;
        self.weak_aug.validate()?;
        self.strong_aug.validate()?;
        self.aggregation.validate()?;
        self.eval_protocol.validate()?;
        Ok(())
    }
}

/// One metric-log row; evaluation columns are present only on iterations
/// where the periodic evaluation ran.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub mode: Mode,
    pub loss_total: f64,
    pub loss_s: f64,
    pub loss_u: f64,
    pub pseudo_instances_kept: usize,
    pub pseudo_kp_kept_fraction: f64,
    pub eval_ap_box: Option<f64>,
    pub eval_ap_kp: Option<f64>,
    pub eval_ap_boxfrommask: Option<f64>,
    pub wall_ms: u64,
}

/// Serialize the metric log. All columns except `wall_ms` are functions of
/// (config, seed) alone.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(
        "iteration,mode,loss_total,loss_s,loss_u,pseudo_instances_kept,pseudo_kp_kept_fraction,eval_ap_box,eval_ap_kp,eval_ap_boxfrommask,wall_ms\n",
    );
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.iteration,
            r.mode.as_str(),
            r.loss_total,
            r.loss_s,
            r.loss_u,
            r.pseudo_instances_kept,
            r.pseudo_kp_kept_fraction,
            opt(r.eval_ap_box),
            opt(r.eval_ap_kp),
            opt(r.eval_ap_boxfrommask),
            r.wall_ms
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Data access

/// Anything a loop can draw (image, instances) pairs from. Unlabeled corpora
/// simply have their instances ignored.
pub trait DataSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn load(&self, idx: usize) -> Result<(ImageF, Vec<Instance>)>;
    /// Stable display name for log/provenance records.
    fn name(&self, idx: usize) -> String {
        format!("item_{idx:05}")
    }
}

/// In-memory dataset.
pub struct MemorySource {
    pub images: Vec<ImageF>,
    pub labels: Vec<Vec<Instance>>,
}

impl MemorySource {
    pub fn new(images: Vec<ImageF>, labels: Vec<Vec<Instance>>) -> Result<MemorySource> {
        if images.len() != labels.len() {
            return Err(CoreError::Shape(format!(
                "dataset: {} images vs {} label lists",
                images.len(),
                labels.len()
            )));
        }
        Ok(MemorySource { images, labels })
    }
}

impl DataSource for MemorySource {
    fn len(&self) -> usize {
        self.images.len()
    }
    fn load(&self, idx: usize) -> Result<(ImageF, Vec<Instance>)> {
        Ok((self.images[idx].clone(), self.labels[idx].clone()))
    }
}

impl DataSource for Corpus {
    fn len(&self) -> usize {
        self.items.len()
    }
    fn load(&self, idx: usize) -> Result<(ImageF, Vec<Instance>)> {
        let item = &self.items[idx];
        Ok((item.load_image()?, item.instances.clone()))
    }
    fn name(&self, idx: usize) -> String {
        self.items[idx]
            .image_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("item_{idx:05}"))
    }
}

/// A base dataset with its labels replaced (e.g. pseudo labels over an
/// unlabeled corpus).
pub struct OverlaySource<'a> {
    pub base: &'a dyn DataSource,
    pub labels: Vec<Vec<Instance>>,
}

impl DataSource for OverlaySource<'_> {
    fn len(&self) -> usize {
        self.base.len()
    }
    fn load(&self, idx: usize) -> Result<(ImageF, Vec<Instance>)> {
        let (img, _) = self.base.load(idx)?;
        Ok((img, self.labels[idx].clone()))
    }
    fn name(&self, idx: usize) -> String {
        self.base.name(idx)
    }
}

/// Two datasets concatenated.
pub struct ChainSource<'a> {
    pub first: &'a dyn DataSource,
    pub second: &'a dyn DataSource,
}

impl DataSource for ChainSource<'_> {
    fn len(&self) -> usize {
        self.first.len() + self.second.len()
    }
    fn load(&self, idx: usize) -> Result<(ImageF, Vec<Instance>)> {
        if idx < self.first.len() {
            self.first.load(idx)
        } else {
            self.second.load(idx - self.first.len())
        }
    }
    fn name(&self, idx: usize) -> String {
        if idx < self.first.len() {
            self.first.name(idx)
        } else {
            self.second.name(idx - self.first.len())
        }
    }
}

/// Infinite reshuffled cycling over dataset indices.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cycler {
    fn new(len: usize, rng: ChaCha8Rng) -> Cycler {
        Cycler { order: (0..len).collect(), pos: len, rng }
    }

    fn next_index(&mut self) -> usize {
        if self.pos >= self.order.len() {
            // Fisher-Yates reshuffle for the next epoch.
            for i in (1..self.order.len()).rev() {
                let j = self.rng.random_range(0..=i);
                self.order.swap(i, j);
            }
            self.pos = 0;
        }
        let idx = self.order[self.pos];
        self.pos += 1;
        idx
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.next_index()).collect()
    }
}

// ---------------------------------------------------------------------------
// Run state

/// Mutable state of one training run.
pub struct RunState {
    pub config: TrainConfig,
    pub student: ModelWeights,
    /// EMA copy of the student; present in uda/ssl modes.
    pub teacher: Option<ModelWeights>,
    /// SGD momentum buffers keyed by parameter name.
    sgd: SgdState,
    pub iteration: usize,
    rng_aug: ChaCha8Rng,
    pub metrics: Vec<MetricsRow>,
    /// Steps whose whole unlabeled half produced zero pseudo instances.
    pub starvation_steps: usize,
}

impl RunState {
    pub fn new(config: TrainConfig, student: ModelWeights) -> Result<RunState> {
        config.validate()?;
        match config.mode {
            Mode::Uda => {
                if !student.dual_bank() {
                    return Err(CoreError::Config(
                        "uda mode requires dual-bank weights (call enable_dfn on the source checkpoint)".into(),
                    ));
                }
            }
            Mode::SourceOnly | Mode::Ssl | Mode::OfflinePseudo => {
                if student.dual_bank() {
                    return Err(CoreError::Config(format!(
                        "{} mode requires single-bank weights",
                        config.mode.as_str()
                    )));
                }
            }
        }
        validate_chirality(&config.chirality_pairs, student.config.num_keypoints)?;
        let teacher = match config.mode {
            Mode::Uda | Mode::Ssl => Some(student.deep_copy(false)?),
            _ => None,
        };
        let rng_aug = stream(config.seed, "aug", 0);
        Ok(RunState {
            config,
            student,
            teacher,
            sgd: SgdState::new(),
            iteration: 0,
            rng_aug,
            metrics: Vec::new(),
            starvation_steps: 0,
        })
    }
}

/// Losses and pseudo-label statistics of one step.
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub loss_total: f64,
    pub loss_s: f64,
    pub loss_u: f64,
    pub pseudo_instances: usize,
    pub pseudo_kp_fraction: f64,
    pub starved: bool,
}

// ---------------------------------------------------------------------------
// View sampling and pseudo labels

/// All augmentation draws of one step, in the documented order: weak
/// transforms for the labeled then the unlabeled batch, then strong records
/// for the labeled then the unlabeled batch.
pub struct StepViews {
    pub weak_labeled: Vec<GeoTransform>,
    pub weak_unlabeled: Vec<GeoTransform>,
    pub strong_labeled: Vec<StrongAugRecord>,
    pub strong_unlabeled: Vec<StrongAugRecord>,
}

/// Sample every view transform of one step from the augmentation stream.
pub fn sample_step_views(
    rng: &mut ChaCha8Rng,
    config: &TrainConfig,
    labeled: &[(ImageF, Vec<Instance>)],
    unlabeled: &[ImageF],
) -> StepViews {
    let weak_labeled = labeled
        .iter()
        .map(|(img, _)| sample_weak(rng, &config.weak_aug, img.width, img.height))
        .collect();
    let weak_unlabeled = unlabeled
        .iter()
        .map(|img| sample_weak(rng, &config.weak_aug, img.width, img.height))
        .collect();
    let strong_labeled = labeled
        .iter()
        .map(|(img, _)| sample_strong(rng, &config.strong_aug, img.width, img.height))
        .collect();
    let strong_unlabeled = unlabeled
        .iter()
        .map(|img| sample_strong(rng, &config.strong_aug, img.width, img.height))
        .collect();
    StepViews { weak_labeled, weak_unlabeled, strong_labeled, strong_unlabeled }
}

/// Strong unlabeled views with their transported pseudo labels and the
/// keep statistics of the teacher pass.
pub struct PseudoBatch {
    pub images: Vec<ImageF>,
    pub instances: Vec<Vec<Instance>>,
    pub kept: usize,
    pub kp_fraction: f64,
}

/// Teacher pass: label the weakly augmented unlabeled views, threshold into
/// pseudo labels, and carry them into the strong views.
pub fn pseudo_label_unlabeled(
    teacher: &ModelWeights,
    bank: Bank,
    config: &TrainConfig,
    unlabeled: &[ImageF],
    views: &StepViews,
) -> Result<PseudoBatch> {
    let cfg = &teacher.config;
    let domain = match bank {
        Bank::Source => Domain::Source,
        Bank::Target => Domain::Target,
    };
    let mut strong_images = Vec::with_capacity(unlabeled.len());
    let mut pseudo = Vec::with_capacity(unlabeled.len());
    let mut kept = 0usize;
    let mut kp_kept = 0usize;
    let mut kp_slots = 0usize;
    for (j, img) in unlabeled.iter().enumerate() {
        let weak_img = views.weak_unlabeled[j].apply_to_image(img)?;
        let mut tape = Tape::new();
        let preds = forward(&mut tape, teacher, &[&weak_img], &[domain], ForwardMode::Infer(bank))?;
        let dets = decode(cfg, &preds.per_image[0])?;
        let filtered = gamma(cfg, &dets, &config.thresholds)?;
        kept += filtered.len();
        for d in &filtered {
            kp_slots += d.kp_scores.len();
            kp_kept += d.kp_scores.iter().filter(|&&s| s > 0.0).count();
        }
        let instances = to_instances(cfg, &filtered, &config.thresholds);
        let (carried, _dropped) = transport(
            &instances,
            &views.weak_unlabeled[j],
            &views.strong_unlabeled[j].geo,
            &config.chirality_pairs,
        )?;
        pseudo.push(carried);
        strong_images.push(apply_image(img, &views.strong_unlabeled[j], config.aug_fill_mean)?);
    }
    let kp_fraction = if kp_slots == 0 { 0.0 } else { kp_kept as f64 / kp_slots as f64 };
    Ok(PseudoBatch { images: strong_images, instances: pseudo, kept, kp_fraction })
}

/// The assembled combined batch of one adaptation step: source half (weak
/// and strong labeled copies) then target half (strong unlabeled, padded by
/// cycling to the source half's size).
pub struct UdaBatch {
    pub images: Vec<ImageF>,
    pub domains: Vec<Domain>,
    pub labels: Vec<Vec<Instance>>,
    /// Index of the first target-half entry.
    pub source_len: usize,
    pub pseudo_instances: usize,
    pub pseudo_kp_fraction: f64,
    pub starved: bool,
}

/// Build the combined batch of one uda step (teacher labeling included).
pub fn build_uda_batch(
    rng: &mut ChaCha8Rng,
    config: &TrainConfig,
    teacher: &ModelWeights,
    labeled: &[(ImageF, Vec<Instance>)],
    unlabeled: &[ImageF],
) -> Result<UdaBatch> {
    if labeled.is_empty() || unlabeled.is_empty() {
        return Err(CoreError::Config("uda step needs labeled and unlabeled items".into()));
    }
    let views = sample_step_views(rng, config, labeled, unlabeled);
    // Teacher labels the weak unlabeled views through the source bank.
    let pb = pseudo_label_unlabeled(teacher, Bank::Source, config, unlabeled, &views)?;

    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (i, (img, inst)) in labeled.iter().enumerate() {
        let t = &views.weak_labeled[i];
        images.push(t.apply_to_image(img)?);
        labels.push(apply_instances(inst, t, &config.chirality_pairs).0);
    }
    if !config.labeled_weak_only {
        for (i, (img, inst)) in labeled.iter().enumerate() {
            let rec = &views.strong_labeled[i];
            images.push(apply_image(img, rec, config.aug_fill_mean)?);
            labels.push(apply_instances(inst, &rec.geo, &config.chirality_pairs).0);
        }
    }
    let source_len = images.len();
    // Target half, padded by cycling so the halves match.
    for k in 0..source_len {
        let j = k % pb.images.len();
        images.push(pb.images[j].clone());
        labels.push(pb.instances[j].clone());
    }
    let domains = (0..images.len())
        .map(|i| if i < source_len { Domain::Source } else { Domain::Target })
        .collect();
    Ok(UdaBatch {
        images,
        domains,
        labels,
        source_len,
        pseudo_instances: pb.kept,
        pseudo_kp_fraction: pb.kp_fraction,
        starved: pb.kept == 0,
    })
}

fn finite_or_abort(value: f64, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(CoreError::NonFinite(format!("{what} is not finite")))
    }
}

/// Attach the 1-based iteration number to abort-class errors, so a run that
/// dies on a non-finite value anywhere in the step names the step.
fn tag_iteration(err: CoreError, iteration: usize) -> CoreError {
    match err {
        CoreError::NonFinite(m) => {
            CoreError::NonFinite(format!("{m} at iteration {iteration}"))
        }
        CoreError::TrainAbort(m) => {
            CoreError::TrainAbort(format!("{m} at iteration {iteration}"))
        }
        other => other,
    }
}

// ---------------------------------------------------------------------------
// Steps

/// One Algorithm-1 adaptation step on pre-drawn batches.
pub fn uda_step(
    state: &mut RunState,
    labeled: &[(ImageF, Vec<Instance>)],
    unlabeled: &[ImageF],
) -> Result<StepStats> {
    let it = state.iteration + 1;
    uda_step_inner(state, labeled, unlabeled).map_err(|e| tag_iteration(e, it))
}

fn uda_step_inner(
    state: &mut RunState,
    labeled: &[(ImageF, Vec<Instance>)],
    unlabeled: &[ImageF],
) -> Result<StepStats> {
    if state.config.mode != Mode::Uda {
        return Err(CoreError::Config("uda_step outside uda mode".into()));
    }
    let lambda = state.config.lambda();
    let teacher = state
        .teacher
        .as_ref()
        .ok_or_else(|| CoreError::Config("uda state has no teacher".into()))?;
    let batch = build_uda_batch(&mut state.rng_aug, &state.config, teacher, labeled, unlabeled)?;

    let mut tape = Tape::new();
    let refs: Vec<&ImageF> = batch.images.iter().collect();
    let preds = forward(&mut tape, &state.student, &refs, &batch.domains, ForwardMode::Train)?;
    let cfg = state.student.config.clone();
    let mut per_image = Vec::with_capacity(batch.images.len());
    for (p, l) in preds.per_image.iter().zip(&batch.labels) {
        per_image.push(image_loss(&mut tape, &cfg, p, l)?.0);
    }
    let ls = ops::mean_stack(&mut tape, &per_image[..batch.source_len])?;
    let (total, loss_u) = if batch.starved {
        // Whole unlabeled half empty: the unsupervised loss is defined as 0.
        (ls.clone(), 0.0)
    } else {
        let lu = ops::mean_stack(&mut tape, &per_image[batch.source_len..])?;
        let scaled = ops::scale(&mut tape, &lu, lambda)?;
        (ops::add(&mut tape, &ls, &scaled)?, lu.value())
    };
    let loss_s = ls.value();
    let loss_total = total.value();
    finite_or_abort(loss_total, "uda loss")?;

    tape.backward(&total)?;
    sgd_momentum_step(
        &state.student.params(),
        &mut state.sgd,
        state.config.lr,
        state.config.momentum,
        state.config.grad_clip_norm,
    )?;
    state.student.clear_grads();
    let alpha = state.config.alpha_ema;
    state
        .teacher
        .as_mut()
        .expect("teacher present")
        .ema_from(&state.student, alpha)?;

    if batch.starved {
        state.starvation_steps += 1;
    }
    state.iteration += 1;
    Ok(StepStats {
        loss_total,
        loss_s,
        loss_u,
        pseudo_instances: batch.pseudo_instances,
        pseudo_kp_fraction: batch.pseudo_kp_fraction,
        starved: batch.starved,
    })
}

/// One semi-supervised step: identical pipeline, but the labeled and
/// unlabeled batches pass through the (single-bank) model separately and no
/// domain tags are involved.
pub fn ssl_step(
    state: &mut RunState,
    labeled: &[(ImageF, Vec<Instance>)],
    unlabeled: &[ImageF],
) -> Result<StepStats> {
    let it = state.iteration + 1;
    ssl_step_inner(state, labeled, unlabeled).map_err(|e| tag_iteration(e, it))
}

fn ssl_step_inner(
    state: &mut RunState,
    labeled: &[(ImageF, Vec<Instance>)],
    unlabeled: &[ImageF],
) -> Result<StepStats> {
    if state.config.mode != Mode::Ssl {
        return Err(CoreError::Config("ssl_step outside ssl mode".into()));
    }
    if labeled.is_empty() {
        return Err(CoreError::Config("ssl step needs labeled items".into()));
    }
    let lambda = state.config.lambda();
    let views = sample_step_views(&mut state.rng_aug, &state.config, labeled, unlabeled);
    let cfg = state.student.config.clone();

    // Teacher pass only when there is unlabeled data at all.
    let pb = if unlabeled.is_empty() {
        PseudoBatch { images: Vec::new(), instances: Vec::new(), kept: 0, kp_fraction: 0.0 }
    } else {
        let teacher = state
            .teacher
            .as_ref()
            .ok_or_else(|| CoreError::Config("ssl state has no teacher".into()))?;
        pseudo_label_unlabeled(teacher, Bank::Source, &state.config, unlabeled, &views)?
    };
    let starved = !unlabeled.is_empty() && pb.kept == 0;

    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (i, (img, inst)) in labeled.iter().enumerate() {
        let t = &views.weak_labeled[i];
        images.push(t.apply_to_image(img)?);
        labels.push(apply_instances(inst, t, &state.config.chirality_pairs).0);
    }
    if !state.config.labeled_weak_only {
        for (i, (img, inst)) in labeled.iter().enumerate() {
            let rec = &views.strong_labeled[i];
            images.push(apply_image(img, rec, state.config.aug_fill_mean)?);
            labels.push(apply_instances(inst, &rec.geo, &state.config.chirality_pairs).0);
        }
    }

    let mut tape = Tape::new();
    let refs: Vec<&ImageF> = images.iter().collect();
    let domains = vec![Domain::Source; refs.len()];
    let preds = forward(&mut tape, &state.student, &refs, &domains, ForwardMode::Train)?;
    let mut per_image = Vec::with_capacity(refs.len());
    for (p, l) in preds.per_image.iter().zip(&labels) {
        per_image.push(image_loss(&mut tape, &cfg, p, l)?.0);
    }
    let ls = ops::mean_stack(&mut tape, &per_image)?;

    let (total, loss_u) = if pb.images.is_empty() || starved {
        (ls.clone(), 0.0)
    } else {
        let urefs: Vec<&ImageF> = pb.images.iter().collect();
        let udomains = vec![Domain::Source; urefs.len()];
        let upreds = forward(&mut tape, &state.student, &urefs, &udomains, ForwardMode::Train)?;
        let mut u_losses = Vec::with_capacity(urefs.len());
        for (p, l) in upreds.per_image.iter().zip(&pb.instances) {
            u_losses.push(image_loss(&mut tape, &cfg, p, l)?.0);
        }
        let lu = ops::mean_stack(&mut tape, &u_losses)?;
        let scaled = ops::scale(&mut tape, &lu, lambda)?;
        (ops::add(&mut tape, &ls, &scaled)?, lu.value())
    };
    let loss_s = ls.value();
    let loss_total = total.value();
    finite_or_abort(loss_total, "ssl loss")?;

    tape.backward(&total)?;
    sgd_momentum_step(
        &state.student.params(),
        &mut state.sgd,
        state.config.lr,
        state.config.momentum,
        state.config.grad_clip_norm,
    )?;
    state.student.clear_grads();
    let alpha = state.config.alpha_ema;
    state
        .teacher
        .as_mut()
        .expect("teacher present")
        .ema_from(&state.student, alpha)?;

    if starved {
        state.starvation_steps += 1;
    }
    state.iteration += 1;
    Ok(StepStats {
        loss_total,
        loss_s,
        loss_u,
        pseudo_instances: pb.kept,
        pseudo_kp_fraction: pb.kp_fraction,
        starved,
    })
}

/// One plain supervised step: weakly augmented labeled batch only.
pub fn supervised_step(
    state: &mut RunState,
    labeled: &[(ImageF, Vec<Instance>)],
) -> Result<StepStats> {
    let it = state.iteration + 1;
    supervised_step_inner(state, labeled).map_err(|e| tag_iteration(e, it))
}

fn supervised_step_inner(
    state: &mut RunState,
    labeled: &[(ImageF, Vec<Instance>)],
) -> Result<StepStats> {
    if labeled.is_empty() {
        return Err(CoreError::Config("supervised step needs labeled items".into()));
    }
    let cfg = state.student.config.clone();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (img, inst) in labeled {
        let t = sample_weak(&mut state.rng_aug, &state.config.weak_aug, img.width, img.height);
        images.push(t.apply_to_image(img)?);
        labels.push(apply_instances(inst, &t, &state.config.chirality_pairs).0);
    }
    let mut tape = Tape::new();
    let refs: Vec<&ImageF> = images.iter().collect();
    let domains = vec![Domain::Source; refs.len()];
    let preds = forward(&mut tape, &state.student, &refs, &domains, ForwardMode::Train)?;
    let mut per_image = Vec::with_capacity(refs.len());
    for (p, l) in preds.per_image.iter().zip(&labels) {
        per_image.push(image_loss(&mut tape, &cfg, p, l)?.0);
    }
    let total = ops::mean_stack(&mut tape, &per_image)?;
    let loss_total = total.value();
    finite_or_abort(loss_total, "supervised loss")?;

    tape.backward(&total)?;
    sgd_momentum_step(
        &state.student.params(),
        &mut state.sgd,
        state.config.lr,
        state.config.momentum,
        state.config.grad_clip_norm,
    )?;
    state.student.clear_grads();
    state.iteration += 1;
    Ok(StepStats {
        loss_total,
        loss_s: loss_total,
        loss_u: 0.0,
        pseudo_instances: 0,
        pseudo_kp_fraction: 0.0,
        starved: false,
    })
}

// ---------------------------------------------------------------------------
// Offline pseudo-label rounds

/// The nine aggregation scales of the dense multi-scale baseline (400..1200
/// step 100 at a 480-pixel native shorter side), scaled proportionally to
/// the given native shorter side.
pub fn kmdds_scales(native_short: usize) -> Vec<usize> {
    (4..=12).map(|s| s * 100 * native_short / 480).collect()
}

/// Label every image of a corpus with a frozen teacher via multi-view
/// aggregation. `persist` optionally writes the pseudo labels as one
/// annotation file whose provenance block carries the given teacher tag
/// (normally the teacher checkpoint's digest).
pub fn offline_pseudo_round(
    teacher: &ModelWeights,
    bank: Bank,
    corpus: &dyn DataSource,
    agg: &AggregationConfig,
    thresholds: &Thresholds,
    chirality_pairs: &[[usize; 2]],
    persist: Option<(&Path, &str)>,
) -> Result<Vec<PseudoLabelSet>> {
    let cfg = &teacher.config;
    let mut sets = Vec::with_capacity(corpus.len());
    for idx in 0..corpus.len() {
        let (img, _) = corpus.load(idx)?;
        let dets = aggregate_multi_transform(teacher, bank, &img, chirality_pairs, agg, thresholds)?;
        sets.push(PseudoLabelSet::from_detections(
            cfg,
            idx as u64,
            corpus.name(idx),
            img.width,
            img.height,
            &dets,
            thresholds,
        ));
    }
    if let Some((path, teacher_tag)) = persist {
        let meta = MetaRecord {
            num_keypoints: cfg.num_keypoints,
            chirality_pairs: chirality_pairs.to_vec(),
            generator_hash: String::new(),
        };
        let prov = PseudoProvenance {
            teacher_checkpoint_sha256: teacher_tag.to_string(),
            thresholds: *thresholds,
            aggregation: agg.clone(),
        };
        save_pseudo_labels(path, &sets, &meta, &prov)?;
    }
    Ok(sets)
}

// ---------------------------------------------------------------------------
// The run loop

/// Result of a full run: the produced model (teacher for uda/ssl, student
/// otherwise), the metric log, and the starvation count.
pub struct RunOutput {
    pub weights: ModelWeights,
    pub metrics: Vec<MetricsRow>,
    pub starvation_steps: usize,
}

/// Train per the config: draws batches by infinite reshuffled cycling,
/// steps the mode-appropriate update, evaluates every `eval_every`
/// iterations on the held-out set, and returns the final weights.
pub fn run(
    config: &TrainConfig,
    init: ModelWeights,
    labeled: &dyn DataSource,
    unlabeled: Option<&dyn DataSource>,
    eval: Option<&dyn DataSource>,
) -> Result<RunOutput> {
    config.validate()?;
    if config.mode == Mode::OfflinePseudo {
        let un = unlabeled.ok_or_else(|| {
            CoreError::Config("offline_pseudo mode needs an unlabeled corpus".into())
        })?;
        if init.dual_bank() {
            return Err(CoreError::Config("offline_pseudo mode requires single-bank weights".into()));
        }
        // Stage 1: the init checkpoint acts as the frozen teacher.
        let sets = offline_pseudo_round(
            &init,
            Bank::Source,
            un,
            &config.aggregation,
            &config.thresholds,
            &config.chirality_pairs,
            None,
        )?;
        let overlay = OverlaySource {
            base: un,
            labels: sets.into_iter().map(|s| s.instances).collect(),
        };
        let joint = ChainSource { first: labeled, second: &overlay };
        // Stage 2: supervised training on ground truth + pseudo labels.
        let mut cfg2 = config.clone();
        cfg2.mode = Mode::SourceOnly;
        return run_inner(&cfg2, Mode::OfflinePseudo, init, &joint, None, eval);
    }
    run_inner(config, config.mode, init, labeled, unlabeled, eval)
}

fn run_inner(
    config: &TrainConfig,
    log_mode: Mode,
    init: ModelWeights,
    labeled: &dyn DataSource,
    unlabeled: Option<&dyn DataSource>,
    eval: Option<&dyn DataSource>,
) -> Result<RunOutput> {
    if labeled.is_empty() {
        return Err(CoreError::Config("labeled dataset is empty".into()));
    }
    if config.mode == Mode::Uda && unlabeled.is_none_or(|u| u.is_empty()) {
        return Err(CoreError::Config("uda mode needs a non-empty unlabeled dataset".into()));
    }
    let mut state = RunState::new(config.clone(), init)?;

    let mut labeled_cycler = Cycler::new(labeled.len(), stream(config.seed, "data-labeled", 0));
    let mut unlabeled_cycler = unlabeled
        .filter(|u| !u.is_empty())
        .map(|u| Cycler::new(u.len(), stream(config.seed, "data-unlabeled", 0)));

    // Preload the held-out set once.
    let eval_data = match eval {
        Some(src) => {
            let mut images = Vec::with_capacity(src.len());
            let mut gts = Vec::with_capacity(src.len());
            for i in 0..src.len() {
                let (img, inst) = src.load(i)?;
                images.push(img);
                gts.push(inst);
            }
            Some((images, gts))
        }
        None => None,
    };

    for it in 1..=config.iterations {
        let start = Instant::now();
        let lab: Vec<(ImageF, Vec<Instance>)> = labeled_cycler
            .next_batch(config.labeled_batch)
            .into_iter()
            .map(|i| labeled.load(i))
            .collect::<Result<_>>()?;
        let unl: Vec<ImageF> = match (&mut unlabeled_cycler, config.mode) {
            (Some(cycler), Mode::Uda | Mode::Ssl) => cycler
                .next_batch(config.unlabeled_batch)
                .into_iter()
                .map(|i| unlabeled.expect("cycler implies source").load(i).map(|(img, _)| img))
                .collect::<Result<_>>()?,
            _ => Vec::new(),
        };
        let stats = match config.mode {
            Mode::Uda => uda_step(&mut state, &lab, &unl)?,
            Mode::Ssl => ssl_step(&mut state, &lab, &unl)?,
            Mode::SourceOnly | Mode::OfflinePseudo => supervised_step(&mut state, &lab)?,
        };

        let mut row = MetricsRow {
            iteration: it,
            mode: log_mode,
            loss_total: stats.loss_total,
            loss_s: stats.loss_s,
            loss_u: stats.loss_u,
            pseudo_instances_kept: stats.pseudo_instances,
            pseudo_kp_kept_fraction: stats.pseudo_kp_fraction,
            eval_ap_box: None,
            eval_ap_kp: None,
            eval_ap_boxfrommask: None,
            wall_ms: 0,
        };
        let eval_due = config.eval_every > 0
            && (it % config.eval_every == 0 || it == config.iterations);
        if eval_due {
            if let Some((images, gts)) = &eval_data {
                let weights = match config.mode {
                    Mode::Uda | Mode::Ssl => state.teacher.as_ref().expect("teacher present"),
                    _ => &state.student,
                };
                let bank = if config.mode == Mode::Uda { Bank::Target } else { Bank::Source };
                let mut infer = model_infer(weights, bank);
                let result = evaluate_protocol(images, gts, &mut infer, &config.eval_protocol)?;
                let last = *config.eval_protocol.factors.last().expect("validated non-empty");
                let summary = result.summary_for(last).expect("factor evaluated");
                row.eval_ap_box = Some(summary.mean[0]);
                row.eval_ap_kp = Some(summary.mean[1]);
                row.eval_ap_boxfrommask = Some(summary.mean[2]);
            }
        }
        row.wall_ms = start.elapsed().as_millis() as u64;
        state.metrics.push(row);
    }

    let weights = match config.mode {
        Mode::Uda | Mode::Ssl => state.teacher.take().expect("teacher present"),
        _ => state.student,
    };
    Ok(RunOutput {
        weights,
        metrics: state.metrics,
        starvation_steps: state.starvation_steps,
    })
}

/// Train one run per lambda from the same initialization and report the
/// target keypoint AP (mean across the protocol's resolutions) at the given
/// downsample factor.
pub fn lambda_sweep(
    base: &TrainConfig,
    lambdas: &[f64],
    init: &ModelWeights,
    labeled: &dyn DataSource,
    unlabeled: &dyn DataSource,
    eval: &dyn DataSource,
    factor: u32,
) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(lambdas.len());
    let mut eval_images = Vec::with_capacity(eval.len());
    let mut eval_gts = Vec::with_capacity(eval.len());
    for i in 0..eval.len() {
        let (img, inst) = eval.load(i)?;
        eval_images.push(img);
        eval_gts.push(inst);
    }
    let protocol = EvalProtocol {
        factors: vec![factor],
        resolutions: base.eval_protocol.resolutions.clone(),
        oks_k: base.eval_protocol.oks_k.clone(),
    };
    for &lambda in lambdas {
        let mut cfg = base.clone();
        cfg.lambda_u = Some(lambda);
        let result = run(&cfg, init.deep_copy(true)?, labeled, Some(unlabeled), None)?;
        let bank = if cfg.mode == Mode::Uda { Bank::Target } else { Bank::Source };
        let mut infer = model_infer(&result.weights, bank);
        let eval_result = evaluate_protocol(&eval_images, &eval_gts, &mut infer, &protocol)?;
        out.push((lambda, eval_result.summary_for(factor).expect("factor evaluated").mean[1]));
    }
    Ok(out)
}
