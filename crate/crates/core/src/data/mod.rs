//! Samples, batches, synthetic generation, dataset ingestion, augmentation,
//! heatmap rendering and the identity-balanced sampler.

pub mod augment;
mod dataset;
pub mod heatmap;
pub mod io;
mod keypoints;
mod sampler;
mod synth;
mod types;

pub use augment::{AugmentConfig, Prepared};
pub use dataset::{Dataset, DatasetSummary, Standardization};
pub use heatmap::{default_sigma, make_heatmaps, to_heatmap_coords};
pub use io::{export_synthetic, load_dataset, load_split, Layout, Split};
pub use keypoints::{KeypointLayout, COMPACT, FULL_BODY};
pub use sampler::{batch_rng, for_each_batch, sample_minibatch, BalancedIndex, BatchBuilder};
pub use synth::{synth_generate, SynthSpec};
pub use types::{Keypoint, MiniBatch, Modality, Sample};
