use crate::data::Modality;
use crate::error::{ensure_shape, Error, Result};
use crate::substrate::graph::log_softmax_in_place;
use crate::substrate::{Scalar, Tensor};

/// Probability floor applied before logarithms in the distillation term.
pub const KD_EPSILON: f64 = 1e-12;

/// A loss value with its gradient for each differentiable input.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluated<F: Scalar> {
    pub value: F,
    pub grads: Vec<Tensor<F>>,
}

/// `(1/M) * sum (H - H_hat)^2`; gradient w.r.t. `H_hat`.
pub fn pose_loss<F: Scalar>(target: &Tensor<F>, pred: &Tensor<F>) -> Result<Evaluated<F>> {
    ensure_shape!(
        target.shape() == pred.shape() && pred.ndim() == 4,
        "heatmap shapes differ: {:?} vs {:?}",
        target.shape(),
        pred.shape()
    );
    let m = F::from_usize(pred.dim(0)).unwrap();
    let diff = pred.zip_map(target, |p, t| p - t)?;
    let value = diff.data().iter().map(|&d| d * d).sum::<F>() / m;
    let two = F::lit(2.0);
    Ok(Evaluated {
        value,
        grads: vec![diff.map(|d| two * d / m)],
    })
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::InvalidShape(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidLabel {
            label,
            num_classes: classes,
        });
    }
    Ok(())
}

/// Summed cross-entropy `-sum_i log p_i[y_i]` over rows and its gradient.
pub fn cross_entropy_sum<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> Result<(F, Tensor<F>)> {
    let (m, n) = logits.dims2()?;
    check_labels(labels, m, n)?;
    let mut grad = logits.clone();
    let mut value = F::zero();
    for (row, &y) in grad.data_mut().chunks_mut(n).zip(labels) {
        log_softmax_in_place(row);
        value = value - row[y];
        for v in row.iter_mut() {
            *v = v.exp();
        }
        row[y] = row[y] - F::one();
    }
    Ok((value, grad))
}

/// `-(1/M) sum_i sum_j (log p_{P_j} + log p_{ID_j})` over every head of both
/// banks (either bank may be empty). Gradients follow the order
/// `heads_id ++ heads_p`.
pub fn identity_loss<F: Scalar>(heads_id: &[Tensor<F>], heads_p: &[Tensor<F>], labels: &[usize]) -> Result<Evaluated<F>> {
    let m = F::from_usize(labels.len().max(1)).unwrap();
    let mut value = F::zero();
    let mut grads = Vec::with_capacity(heads_id.len() + heads_p.len());
    for logits in heads_id.iter().chain(heads_p) {
        let (v, g) = cross_entropy_sum(logits, labels)?;
        value = value + v;
        grads.push(g.map(|x| x / m));
    }
    Ok(Evaluated { value: value / m, grads })
}

/// Per-(identity, modality) means of row features. Returns centres shaped
/// `[D, 2, dim]` (modality index 0 = RGB) and, per row, its centre slot.
pub fn modality_centers<F: Scalar>(
    feats: &Tensor<F>,
    labels: &[usize],
    modalities: &[Modality],
    d: usize,
    k: usize,
) -> Result<(Tensor<F>, Vec<usize>)> {
    let (rows, dim) = feats.dims2()?;
    if labels.len() != rows || modalities.len() != rows || rows != 2 * d * k {
        return Err(Error::InvalidBatch(format!(
            "{rows} feature rows, {} labels, {} modality tags for D={d}, K={k}",
            labels.len(),
            modalities.len()
        )));
    }
    let mut order: Vec<usize> = Vec::with_capacity(d);
    let mut slot = Vec::with_capacity(rows);
    let mut counts = vec![[0usize; 2]; d];
    for (&label, &m) in labels.iter().zip(modalities) {
        let i = match order.iter().position(|&l| l == label) {
            Some(i) => i,
            None if order.len() < d => {
                order.push(label);
                order.len() - 1
            }
            None => return Err(Error::InvalidBatch(format!("more than {d} identities in batch"))),
        };
        counts[i][m.index()] += 1;
        slot.push(2 * i + m.index());
    }
    if order.len() != d || counts.iter().any(|c| c[0] != k || c[1] != k) {
        return Err(Error::InvalidBatch(format!(
            "batch must hold {d} identities with exactly {k} images per modality"
        )));
    }
    let mut centers = Tensor::zeros(vec![d, 2, dim]);
    let inv_k = F::one() / F::from_usize(k).unwrap();
    for (r, &s) in slot.iter().enumerate() {
        let dst = &mut centers.data_mut()[s * dim..(s + 1) * dim];
        for (c, &x) in dst.iter_mut().zip(feats.row(r)) {
            *c = *c + x * inv_k;
        }
    }
    Ok((centers, slot))
}

fn distance<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<F>().sqrt()
}

/// Adds `scale * d||a - b|| / da` to `ga` and its negation to `gb`; the
/// subgradient at `a = b` is zero.
fn push_distance_grad<F: Scalar>(grad: &mut [F], a: usize, b: usize, dim: usize, centers: &[F], dist: F, scale: F) {
    if dist == F::zero() {
        return;
    }
    for t in 0..dim {
        let g = scale * (centers[a * dim + t] - centers[b * dim + t]) / dist;
        grad[a * dim + t] = grad[a * dim + t] + g;
        grad[b * dim + t] = grad[b * dim + t] - g;
    }
}

/// Hetero-centre triplet loss over centres `[D, 2, dim]`: for every anchor
/// centre, `[rho + |anchor - same-id other modality| - nearest other-id
/// centre]_+`, summed over both modalities as anchors. Ties in the nearest
/// negative go to the lowest (identity, modality).
pub fn hctri_loss<F: Scalar>(centers: &Tensor<F>, rho: F) -> Result<Evaluated<F>> {
    ensure_shape!(
        centers.ndim() == 3 && centers.dim(1) == 2,
        "centres must be D x 2 x dim, got {:?}",
        centers.shape()
    );
    let (d, dim) = (centers.dim(0), centers.dim(2));
    let mut grad = Tensor::zeros(centers.shape().to_vec());
    if d < 2 {
        log::warn!("hetero-centre triplet loss needs at least two identities; batch has {d}");
        return Ok(Evaluated {
            value: F::zero(),
            grads: vec![grad],
        });
    }
    let c = centers.data();
    let at = |i: usize, m: usize| &c[(2 * i + m) * dim..(2 * i + m + 1) * dim];
    let mut value = F::zero();
    for i in 0..d {
        for m in 0..2 {
            let anchor = 2 * i + m;
            let pos = distance(at(i, m), at(i, 1 - m));
            let mut best = (F::infinity(), usize::MAX);
            for j in (0..d).filter(|&j| j != i) {
                for n in 0..2 {
                    let dist = distance(at(i, m), at(j, n));
                    if dist < best.0 {
                        best = (dist, 2 * j + n);
                    }
                }
            }
            let hinge = rho + pos - best.0;
            if hinge > F::zero() {
                value = value + hinge;
                let g = grad.data_mut();
                push_distance_grad(g, anchor, 2 * i + 1 - m, dim, c, pos, F::one());
                push_distance_grad(g, anchor, best.1, dim, c, best.0, -F::one());
            }
        }
    }
    Ok(Evaluated { value, grads: vec![grad] })
}

/// Loss over row features: centres per (identity, modality), then
/// [`hctri_loss`]; the gradient is w.r.t. the features.
pub fn hctri_from_features<F: Scalar>(
    feats: &Tensor<F>,
    labels: &[usize],
    modalities: &[Modality],
    d: usize,
    k: usize,
    rho: F,
) -> Result<Evaluated<F>> {
    let (centers, slot) = modality_centers(feats, labels, modalities, d, k)?;
    let inner = hctri_loss(&centers, rho)?;
    let dim = feats.dim(1);
    let inv_k = F::one() / F::from_usize(k).unwrap();
    let gc = inner.grads[0].data();
    let grad = Tensor::from_fn(feats.shape().to_vec(), |idx| {
        let (r, t) = (idx / dim, idx % dim);
        gc[slot[r] * dim + t] * inv_k
    });
    Ok(Evaluated {
        value: inner.value,
        grads: vec![grad],
    })
}

/// `(1/M) sum_i sum_heads KL(p_T || p_head)` with the teacher held constant.
/// Probabilities below [`KD_EPSILON`] are clamped before the logarithm and
/// teacher entries that are exactly zero contribute nothing. Gradients are
/// w.r.t. the student logits in the order `heads_id ++ heads_p`.
pub fn kd_loss<F: Scalar>(teacher: &Tensor<F>, heads_id: &[Tensor<F>], heads_p: &[Tensor<F>]) -> Result<Evaluated<F>> {
    let (m, n) = teacher.dims2()?;
    let floor = F::lit(KD_EPSILON.ln());
    let mut log_t = teacher.clone();
    for row in log_t.data_mut().chunks_mut(n) {
        log_softmax_in_place(row);
    }
    let p_t = log_t.map(|v| v.exp());
    let inv_m = F::one() / F::from_usize(m.max(1)).unwrap();
    let mut value = F::zero();
    let mut grads = Vec::new();
    for student in heads_id.iter().chain(heads_p) {
        ensure_shape!(
            student.shape() == teacher.shape(),
            "student logits {:?} vs teacher {:?}",
            student.shape(),
            teacher.shape()
        );
        let mut log_q = student.clone();
        let mut grad = Tensor::zeros(vec![m, n]);
        for r in 0..m {
            let lq = &mut log_q.data_mut()[r * n..(r + 1) * n];
            log_softmax_in_place(lq);
            let (pt, lt) = (p_t.row(r), log_t.row(r));
            let mut mass = F::zero();
            let mut kl = F::zero();
            for c in 0..n {
                if pt[c] > F::zero() {
                    kl = kl + pt[c] * (lt[c].max(floor) - lq[c].max(floor));
                }
                if lq[c] >= floor {
                    mass = mass + pt[c];
                }
            }
            // rounding can leave a divergence of a few ulps below zero
            value = value + kl.max(F::zero());
            let g = &mut grad.data_mut()[r * n..(r + 1) * n];
            for c in 0..n {
                let q = lq[c].exp();
                let own = if lq[c] >= floor { pt[c] } else { F::zero() };
                g[c] = (q * mass - own) * inv_m;
            }
        }
        grads.push(grad);
    }
    Ok(Evaluated {
        value: value * inv_m,
        grads,
    })
}
