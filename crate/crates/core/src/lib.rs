//! Core library for unsupervised domain adaptation of a joint person-pose and
//! instance-segmentation detector on synthetic two-domain scene corpora.
//!
//! The crate is organized around a small reverse-mode autodiff core
//! ([`micrograd`]), geometric/photometric augmentation with exact label
//! transport ([`geomaug`]), a single-stage grid detector ([`model`]),
//! confidence-thresholded pseudo labels ([`pseudolabel`]), training loops
//! ([`engine`]), a deterministic synthetic scene generator ([`synthor`]), and
//! COCO-style evaluation with a low-resolution robustness protocol
//! ([`evalkit`]).

pub mod annot;
pub mod config;
pub mod engine;
pub mod error;
pub mod evalkit;
pub mod geomaug;
pub mod imagebuf;
pub mod micrograd;
pub mod model;
pub mod pseudolabel;
pub mod rng;
pub mod synthor;

pub use error::{CoreError, Result};
