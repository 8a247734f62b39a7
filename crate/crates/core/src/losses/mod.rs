//! Identity, hetero-centre triplet, pose-heatmap and distillation losses with
//! closed-form gradients, and the weighted objective assembled on a graph.

mod objective;
mod terms;

pub use objective::{total_objective, LossBreakdown, LossFlags, LossWeights};
pub use terms::{
    cross_entropy_sum, hctri_from_features, hctri_loss, identity_loss, kd_loss, modality_centers, pose_loss,
    Evaluated, KD_EPSILON,
};
