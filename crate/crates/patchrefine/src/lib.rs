//! Patch-wise refinement of binary segmentation logit maps.
//!
//! Segmentation models emit per-pixel foreground scores that are binarized
//! with a threshold, and those scores often carry *spatial bias*: whole
//! patches scored consistently too high or too low, producing clustered
//! false positives and negatives. This crate implements a complete
//! refinement stack around that problem:
//!
//! - [`grid`] — logit maps, binary masks, binarization and exact patch
//!   split/merge arithmetic;
//! - [`pseudolabel`] — per-patch optimal thresholding and the pseudo-label
//!   masks used as an auxiliary training signal;
//! - [`metrics`] — IoU / mIoU, patch-averaged IoU, boundary IoU and MAE;
//! - [`losses`] — ground-truth BCE, pseudo-label focal loss and the
//!   squashed-Laplace boundary loss, with analytic gradients;
//! - [`network`] — the dual-branch refinement network (shared encoder with
//!   pyramid pooling, attention-gated global and patch-wise local decoders);
//! - [`pipeline`] — synthetic biased-logit corpus generation, data roles,
//!   augmentation, training and the evaluation harness;
//! - [`cli`] — configuration files, on-disk formats and the `prn` binary's
//!   command implementations.

pub mod error;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod pseudolabel;
pub mod scalar;

pub use error::{Error, Result};
