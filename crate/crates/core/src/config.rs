//! The run configuration file: one strict JSON document that covers every
//! configurable piece of a run — detector architecture, training loop
//! (thresholds, augmentations, evaluation protocol, seed), dataset
//! locations, scene-generator parameters for both domains, and the ablation
//! grids. Unknown keys are rejected at load so typos cannot silently fall
//! back to defaults, and every default equals the corresponding module's
//! reference value, so an empty document `{}` is the shipped configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::TrainConfig;
use crate::error::{CoreError, Result};
use crate::geomaug::validate_chirality;
use crate::model::DetectorConfig;
use crate::synthor::{DomainParams, SceneConfig};

/// Where the train/eval commands find their corpora.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Labeled corpus directory (source domain, or the supervised split).
    pub labeled_dir: Option<PathBuf>,
    /// Unlabeled corpus directory (target domain for adaptation, extra
    /// images for semi-supervised runs); annotations there are ignored.
    pub unlabeled_dir: Option<PathBuf>,
    /// Held-out annotated corpus for periodic and final evaluation.
    pub eval_dir: Option<PathBuf>,
    /// Keep only the first `ceil(fraction * N)` items of the labeled corpus
    /// (semi-supervised label budgets). In ssl mode without an explicit
    /// `unlabeled_dir`, the remaining items become the unlabeled set.
    pub labeled_fraction: Option<f64>,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(f) = self.labeled_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(CoreError::Config(format!(
                    "labeled_fraction {f} must lie in (0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Number of labeled items retained from a corpus of `total`.
    pub fn labeled_len(&self, total: usize) -> usize {
        match self.labeled_fraction {
            Some(f) => ((f * total as f64).ceil() as usize).min(total),
            None => total,
        }
    }
}

/// Grids for the ablation harness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Unsupervised-loss weights swept by the lambda axis.
    pub lambda_grid: Vec<f64>,
    /// Strong-augmentation variants swept by the augmentation axis.
    pub augmentation_variants: Vec<AugVariant>,
    /// Normalization-bank designs swept by the dfn axis.
    pub dfn_variants: Vec<DfnVariant>,
    /// Downsample factor the ablation tables report (the stress factor).
    pub factor: u32,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            lambda_grid: vec![1.0, 2.0, 3.0, 4.0, 6.0],
            augmentation_variants: vec![
                AugVariant::Full,
                AugVariant::NoStrongResize,
                AugVariant::NoPhotometric,
                AugVariant::NoCutout,
                AugVariant::GeoOnly,
            ],
            dfn_variants: vec![
                DfnVariant::Dual,
                DfnVariant::Single,
                DfnVariant::SourceBankOnly,
            ],
            factor: 12,
        }
    }
}

impl AblateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_grid.is_empty()
            || self.augmentation_variants.is_empty()
            || self.dfn_variants.is_empty()
        {
            return Err(CoreError::Config("ablate: empty variant grid".into()));
        }
        for l in &self.lambda_grid {
            if !(l.is_finite() && *l >= 0.0) {
                return Err(CoreError::Config(format!("ablate: bad lambda {l}")));
            }
        }
        if self.factor == 0 {
            return Err(CoreError::Config("ablate: factor must be >= 1".into()));
        }
        Ok(())
    }
}

/// Strong-augmentation ablation rows: the full recipe and leave-one-out /
/// geometry-only reductions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugVariant {
    Full,
    NoStrongResize,
    NoPhotometric,
    NoCutout,
    /// Every strong extra disabled: the strong view degenerates to a weak one.
    GeoOnly,
}

impl AugVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            AugVariant::Full => "full",
            AugVariant::NoStrongResize => "no_strong_resize",
            AugVariant::NoPhotometric => "no_photometric",
            AugVariant::NoCutout => "no_cutout",
            AugVariant::GeoOnly => "geo_only",
        }
    }

    /// Apply this variant's toggles to a strong-augmentation config.
    pub fn apply(&self, base: &crate::geomaug::StrongAugConfig) -> crate::geomaug::StrongAugConfig {
        let mut cfg = base.clone();
        match self {
            AugVariant::Full => {}
            AugVariant::NoStrongResize => cfg.enable_strong_resize = false,
            AugVariant::NoPhotometric => cfg.enable_photometric = false,
            AugVariant::NoCutout => cfg.enable_cutout = false,
            AugVariant::GeoOnly => {
                cfg.enable_strong_resize = false;
                cfg.enable_photometric = false;
                cfg.enable_cutout = false;
            }
        }
        cfg
    }
}

/// Normalization-bank designs compared by the dfn ablation axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DfnVariant {
    /// Per-domain banks: adaptation training, target-bank evaluation.
    Dual,
    /// One shared bank for both domains (no bank split at all).
    Single,
    /// Per-domain banks during training, but evaluation keeps the source
    /// bank — the adapted normalization is never deployed.
    SourceBankOnly,
}

impl DfnVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            DfnVariant::Dual => "dual",
            DfnVariant::Single => "single",
            DfnVariant::SourceBankOnly => "source_bank_only",
        }
    }
}

/// The umbrella configuration document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub source_domain: DomainParams,
    pub target_domain: DomainParams,
    pub scene: SceneConfig,
    pub ablate: AblateConfig,
}

impl RunConfigFile {
    /// Parse a strict JSON document; unknown keys anywhere are an error.
    pub fn from_json(text: &str) -> Result<RunConfigFile> {
        let cfg: RunConfigFile = serde_json::from_str(text)
            .map_err(|e| CoreError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::format("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfigFile> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        RunConfigFile::from_json(&text).map_err(|e| match e {
            CoreError::Config(m) => CoreError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Persist the fully resolved document (defaults included), so the file
    /// written next to run outputs reproduces the run when fed back in.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)
            .map_err(|e| CoreError::io(path.display().to_string(), e))
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        self.source_domain.validate()?;
        self.target_domain.validate()?;
        self.scene.validate()?;
        self.ablate.validate()?;
        // Cross-module consistency the individual validators cannot see.
        validate_chirality(&self.train.chirality_pairs, self.detector.num_keypoints)?;
        Ok(())
    }
}
