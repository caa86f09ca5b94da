//! Single-shot object detection with a bidirectional feature pyramid and
//! cascaded anchor refinement, built from scratch on a minimal rank-4
//! autodiff tensor engine.
//!
//! The crate follows the training pipeline end to end:
//!
//! * [`tensor`] — dense `(n, c, h, w)` tensors, a tape-based autodiff graph
//!   with exactly the ops the detector needs, SGD with momentum, and the
//!   binary checkpoint format.
//! * [`boxes`], [`anchors`], [`matching`] — box algebra (IoU,
//!   encode/decode), multi-level anchor generation, per-stage matching and
//!   hard-negative sampling.
//! * [`network`] — the desk-scale backbone, the feature pyramid (FP) and
//!   reverse feature pyramid (rFP) branches, and the per-level prediction
//!   heads.
//! * [`cascade`] — the three-stage anchor refinement chain, per-stage
//!   losses, the training step, NMS, and inference.
//! * [`data`] — synthetic shape scenes, augmentation, and dataset IO.
//! * [`eval`] — multi-IoU mAP and matched-anchor statistics.
//! * [`train`] — the seeded training loop shared by the CLI and the tests.

pub mod anchors;
pub mod boxes;
pub mod cascade;
pub mod data;
pub mod error;
pub mod eval;
pub mod matching;
pub mod network;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
