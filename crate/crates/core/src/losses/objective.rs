use serde::{Deserialize, Serialize};

use super::terms::{hctri_from_features, identity_loss, kd_loss, pose_loss, cross_entropy_sum};
use crate::data::MiniBatch;
use crate::error::{Error, Result};
use crate::network::BundleVars;
use crate::substrate::{Graph, Scalar, Tensor, Var};

/// Weights of the total objective and the triplet margin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub rho: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 0.1,
            lambda: 5.0,
            gamma: 1.0,
            rho: 0.3,
        }
    }
}

/// Which optional terms contribute. Terms whose inputs the model does not
/// produce (no pose branch, no teacher) are off regardless.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossFlags {
    pub pose_loss: bool,
    pub kd: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        LossFlags {
            pose_loss: true,
            kd: true,
        }
    }
}

/// Term values of one batch and the weights that were in effect (a disabled
/// term has weight 0).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_id: f64,
    pub l_hctri: f64,
    pub l_pose: f64,
    pub l_kd: f64,
    pub total: f64,
    pub beta: f64,
    pub lambda: f64,
    pub gamma: f64,
}

impl LossBreakdown {
    pub fn new(l_id: f64, l_hctri: f64, l_pose: f64, l_kd: f64, beta: f64, lambda: f64, gamma: f64) -> Self {
        let total = l_id + beta * l_hctri + lambda * l_pose + gamma * l_kd;
        LossBreakdown {
            l_id,
            l_hctri,
            l_pose,
            l_kd,
            total,
            beta,
            lambda,
            gamma,
        }
    }

    /// The first term (in `l_id, l_hctri, l_pose, l_kd, total` order) that is
    /// not finite.
    pub fn first_non_finite(&self) -> Option<(&'static str, f64)> {
        [
            ("l_id", self.l_id),
            ("l_hctri", self.l_hctri),
            ("l_pose", self.l_pose),
            ("l_kd", self.l_kd),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
    }
}

fn values<F: Scalar>(g: &Graph<F>, vars: &[Var]) -> Vec<Tensor<F>> {
    vars.iter().map(|&v| g.value(v).clone()).collect()
}

/// Builds every loss term onto the graph and returns the scalar root to
/// differentiate together with the per-term values.
///
/// The identity term also covers the teacher classifier when a teacher
/// exists; the distillation term treats the teacher as a constant.
pub fn total_objective<F: Scalar>(
    g: &mut Graph<F>,
    vars: &BundleVars,
    batch: &MiniBatch<F>,
    weights: &LossWeights,
    flags: LossFlags,
) -> Result<(Var, LossBreakdown)> {
    let m = batch.len();
    let mut l_id = identity_loss(&values(g, &vars.logits_id), &values(g, &vars.logits_p), &batch.labels)?;
    let mut id_inputs: Vec<Var> = vars.logits_id.iter().chain(&vars.logits_p).copied().collect();
    if let Some(t) = vars.teacher_logits {
        let (v, grad) = cross_entropy_sum(g.value(t), &batch.labels)?;
        let inv_m = F::one() / F::from_usize(m).unwrap();
        l_id.value = l_id.value + v * inv_m;
        l_id.grads.push(grad.map(|x| x * inv_m));
        id_inputs.push(t);
    }
    let id_var = g.custom(l_id.value, id_inputs, l_id.grads);
    let mut terms = vec![(id_var, F::one())];

    let rho = F::lit(weights.rho);
    let mut hctri_value = F::zero();
    let mut hctri_inputs = Vec::new();
    let mut hctri_grads = Vec::new();
    for &raw in vars.stripe_id.iter().chain(&vars.stripe_p) {
        let head = g.normalize_rows(raw)?;
        let e = hctri_from_features(g.value(head), &batch.labels, &batch.modalities, batch.d, batch.k, rho)?;
        hctri_value = hctri_value + e.value;
        hctri_inputs.push(head);
        hctri_grads.extend(e.grads);
    }
    if weights.beta != 0.0 {
        let v = g.custom(hctri_value, hctri_inputs, hctri_grads);
        terms.push((v, F::lit(weights.beta)));
    }

    let mut lambda = 0.0;
    let mut l_pose = 0.0;
    if let Some(h_hat) = vars.h_hat {
        if batch.heatmaps.shape() != g.shape(h_hat) {
            return Err(Error::InvalidShape(format!(
                "ground-truth heatmaps {:?} vs predicted {:?}",
                batch.heatmaps.shape(),
                g.shape(h_hat)
            )));
        }
        let e = pose_loss(&batch.heatmaps, g.value(h_hat))?;
        l_pose = e.value.f64();
        if flags.pose_loss && weights.lambda != 0.0 {
            lambda = weights.lambda;
            let v = g.custom(e.value, vec![h_hat], e.grads);
            terms.push((v, F::lit(lambda)));
        }
    }

    let mut gamma = 0.0;
    let mut l_kd = 0.0;
    if let (Some(t), true) = (vars.teacher_logits, flags.kd) {
        let e = kd_loss(g.value(t), &values(g, &vars.logits_id), &values(g, &vars.logits_p))?;
        l_kd = e.value.f64();
        if weights.gamma != 0.0 {
            gamma = weights.gamma;
            let inputs = vars.logits_id.iter().chain(&vars.logits_p).copied().collect();
            let v = g.custom(e.value, inputs, e.grads);
            terms.push((v, F::lit(gamma)));
        }
    }

    let root = g.weighted_sum(&terms)?;
    let breakdown = LossBreakdown::new(
        l_id.value.f64(),
        hctri_value.f64(),
        l_pose,
        l_kd,
        weights.beta,
        lambda,
        gamma,
    );
    Ok((root, breakdown))
}
