//! Single-image camera calibration workbench.
//!
//! The crate synthesizes calibration datasets by rendering virtual pinhole
//! cameras out of equirectangular panoramas, trains a small regression CNN to
//! predict (focal, pitch, roll) from one image, and implements several
//! incremental-learning strategies (fine-tune, LwF, iCaRL, LUCIR, BiC) adapted
//! to regression, together with a cross-evaluation harness that quantifies
//! catastrophic forgetting.
//!
//! Start with [`geometry`] for the camera model, [`pano`] for dataset
//! synthesis, [`nn`] for the network and optimizer, [`incremental`] for the
//! update strategies, and [`eval`] for metrics and reports. The `calib` binary
//! (and the examples under `examples/`) tie these together into reproducible
//! runs.

pub mod eval;
pub mod geometry;
pub mod incremental;
pub mod nn;
pub mod pano;
pub mod run;
