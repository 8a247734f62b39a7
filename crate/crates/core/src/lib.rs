//! Pose-estimation-assisted visible-infrared person re-identification.
//!
//! The crate is organised bottom-up:
//!
//! * [`substrate`]: tensors, convolutions, reverse-mode autodiff, SGD.
//! * [`network`]: the two-stream model with its pose branch, PCB heads and
//!   the global teacher head.
//! * [`losses`]: identity, hetero-center triplet, pose-heatmap and
//!   distillation losses with analytic gradients.
//! * [`data`]: synthetic and on-disk datasets, augmentation, heatmaps and
//!   the identity-balanced cross-modality sampler.
//! * [`eval`]: feature extraction, distances, CMC/mAP and retrieval protocols.
//! * [`trainer`]: configuration, schedule, training loop, checkpoints,
//!   ablations and plots.

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod network;
pub mod substrate;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use substrate::{Graph, Mode, Scalar, Tensor, Var};
