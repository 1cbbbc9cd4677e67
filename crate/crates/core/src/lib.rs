//! Domain-adaptive object detection with vector-decomposed feature
//! disentanglement.
//!
//! The crate bundles everything needed to run the full experiment on a
//! synthetic domain-shift corpus:
//!
//! * [`synth`] — deterministic scene generator and weather-style corruptions
//!   producing a labeled source split and unlabeled target splits.
//! * [`detect`] — a minimal two-stage detector: stride-8 backbone, anchors,
//!   RPN, RoI-Align and the classification/regression head.
//! * [`disentangle`] — the decomposition plug-in: DIR extractor, difference
//!   decomposition, domain classifier (optional gradient reversal) and the
//!   orthogonal loss over RoI-pooled pairs.
//! * [`train`] — the two-step optimization loop with per-group parameter
//!   freezing, loss logging and checkpointing.
//! * [`eval`] — VOC-style AP/mAP scoring.
//! * [`viz`] — feature-map channel dumps and detection overlays.
//!
//! All numeric state is `f64`; every entry point is deterministic in its
//! seeds, so corpora, loss logs and checkpoints are reproducible byte for
//! byte.

pub mod detect;
pub mod disentangle;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
