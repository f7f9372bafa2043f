//! Frame-wise indoor lidar semantic segmentation via 2D-to-3D distillation.
//!
//! The library reproduces, at desk scale, a cross-modal distillation
//! pipeline: a frozen 2D teacher provides per-pixel descriptors and
//! segmentation masks; a small point-cloud student is trained to match the
//! teacher's descriptors at the pixels its points project to, then a linear
//! probe (or full fine-tuning) turns the distilled features into per-point
//! class predictions, evaluated with confusion-matrix scores.
//!
//! Modules follow the pipeline stages:
//!
//! - [`frameio`] — binary lidar frames, PPM/PGM images and masks, teacher
//!   feature maps, rig and run configuration files.
//! - [`geometry`] — rigid transforms and pinhole projection with
//!   Brown–Conrady distortion.
//! - [`sync`] — timestamp pairing and train/val/test manifest splitting.
//! - [`labelspace`] — class taxonomies, the four-class structural mapping,
//!   and mask-to-point pseudo-label transfer.
//! - [`tensorgrad`] — the exact-gradient numerical kernel (dense linear
//!   algebra, normalization, bilinear resize, grid scatter/gather, losses,
//!   AdamW).
//! - [`student`] — the plane-mixing point backbone with distillation and
//!   classification heads.
//! - [`trainer`] — distillation, linear probing, fine-tuning, inference.
//! - [`metrics`] — confusion matrices and mIoU / mAcc / oAcc scores.
//! - [`synthgen`] — the synthetic indoor oracle (ray-cast scans, masks,
//!   prototype teacher features).
//! - [`cli`] — the batch command-line driver.

pub mod cli;
pub mod error;
pub mod frameio;
pub mod geometry;
pub mod labelspace;
pub mod metrics;
pub mod student;
pub mod sync;
pub mod synthgen;
pub mod tensorgrad;
pub mod trainer;

pub use error::{Error, Result};
pub use frameio::IGNORE_ID;
