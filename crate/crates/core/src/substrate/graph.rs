//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! the forward value. [`Graph::backward`] walks the tape in reverse and
//! returns the gradient of a scalar root with respect to every node that
//! requires one.

use super::conv;
use super::params::{ParamId, ParamStore};
use super::scalar::{gemm, MatLayout};
use super::{Scalar, Tensor};
use crate::error::{ensure_shape, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are refreshed.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

enum Op<F: Scalar> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<F>,
        inv_std: Vec<F>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    NormalizeRows {
        x: Var,
        norms: Vec<F>,
    },
    Gap(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LogSoftmax(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Sum(Var),
    /// Scalar node whose local input gradients were computed eagerly.
    Custom {
        inputs: Vec<Var>,
        grads: Vec<Tensor<F>>,
    },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Running-statistics refresh produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnStatUpdate<F> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<F>,
    /// Unbiased batch variance.
    pub batch_var: Vec<F>,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    mode: Mode,
    grad_enabled: bool,
    bn_updates: Vec<BnStatUpdate<F>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            grad_enabled: true,
            bn_updates: Vec::new(),
        }
    }

    /// Evaluation graph that never tracks parameter gradients.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Graph::new(Mode::Eval)
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn bn_updates(&self) -> &[BnStatUpdate<F>] {
        &self.bn_updates
    }

    pub(crate) fn push_bn_update(&mut self, update: BnStatUpdate<F>) {
        self.bn_updates.push(update);
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that is never differentiated.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is wanted (verification inputs).
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: None,
            requires_grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf holding a copy of a stored parameter.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.tensor.clone(),
            op: Op::Leaf,
            param: Some(id),
            requires_grad: self.grad_enabled && !p.kind.is_buffer(),
        });
        Var(self.nodes.len() - 1)
    }

    /// A copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, &ins))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = conv::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, stride, pad }, &ins))
    }

    /// Per-channel batch normalization of a `[N,C,H,W]` or `[N,C]` tensor.
    ///
    /// With `running = None` the batch statistics are used and returned as
    /// `(mean, unbiased variance)`; otherwise the given running statistics
    /// normalize the input.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[F], &[F])>,
        eps: F,
    ) -> Result<(Var, Option<(Vec<F>, Vec<F>)>)> {
        let (n, c, p) = bn_dims(self.value(x))?;
        ensure_shape!(
            self.value(gamma).len() == c && self.value(beta).len() == c,
            "batch norm affine parameters do not match {c} channels"
        );
        let count = n * p;
        let xs = self.value(x).data();
        let (mean, var) = match running {
            Some((rm, rv)) => {
                ensure_shape!(rm.len() == c && rv.len() == c, "running statistics do not match {c} channels");
                (rm.to_vec(), rv.to_vec())
            }
            None => {
                ensure_shape!(count > 1, "batch norm needs more than one value per channel");
                let mut mean = vec![F::zero(); c];
                let mut var = vec![F::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        mean[ci] += xs[(ni * c + ci) * p..(ni * c + ci + 1) * p].iter().copied().sum::<F>();
                    }
                }
                let inv = F::one() / F::lit(count as f64);
                mean.iter_mut().for_each(|m| *m *= inv);
                for ni in 0..n {
                    for ci in 0..c {
                        let m = mean[ci];
                        var[ci] += xs[(ni * c + ci) * p..(ni * c + ci + 1) * p]
                            .iter()
                            .map(|&v| (v - m) * (v - m))
                            .sum::<F>();
                    }
                }
                var.iter_mut().for_each(|v| *v *= inv);
                (mean, var)
            }
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![F::zero(); xs.len()];
        let mut out = vec![F::zero(); xs.len()];
        for ni in 0..n {
            for ci in 0..c {
                for i in (ni * c + ci) * p..(ni * c + ci + 1) * p {
                    let z = (xs[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = z;
                    out[i] = g[ci] * z + bt[ci];
                }
            }
        }
        let shape = self.value(x).shape().to_vec();
        let batch_stats = running.is_none();
        let stats = batch_stats.then(|| {
            let corr = F::lit(count as f64 / (count - 1) as f64);
            (mean, var.iter().map(|&v| v * corr).collect())
        });
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: Tensor::new(shape.clone(), xhat)?,
            inv_std,
            batch_stats,
        };
        Ok((self.push(Tensor::new(shape, out)?, op, &[x, gamma, beta]), stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// Scales each row of an `[N,D]` tensor to unit Euclidean norm (rows
    /// with norm below `1e-12` are divided by `1e-12`).
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        ensure_shape!(t.shape().len() == 2, "normalize_rows expects [N,D], got {:?}", t.shape());
        let d = t.dim(1);
        let floor = F::lit(1e-12);
        let norms: Vec<F> = t
            .data()
            .chunks(d.max(1))
            .map(|r| r.iter().map(|&v| v * v).sum::<F>().sqrt().max(floor))
            .collect();
        let out = Tensor::from_fn(t.shape().to_vec(), |i| t.data()[i] / norms[i / d]);
        Ok(self.push(out, Op::NormalizeRows { x, norms }, &[x]))
    }

    /// Global average pooling `[N,C,H,W] -> [N,C]`.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let p = h * w;
        let inv = F::one() / F::lit(p as f64);
        let xs = self.value(x).data();
        let out: Vec<F> = (0..n * c)
            .map(|i| xs[i * p..(i + 1) * p].iter().copied().sum::<F>() * inv)
            .collect();
        let out = Tensor::new(vec![n, c], out)?;
        Ok(self.push(out, Op::Gap(x), &[x]))
    }

    /// Rows `start..end` of a `[N,C,H,W]` tensor (a horizontal band).
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        ensure_shape!(start < end && end <= h, "row band {start}..{end} outside height {h}");
        let xs = self.value(x).data();
        let rows = end - start;
        let mut out = Vec::with_capacity(n * c * rows * w);
        for plane in 0..n * c {
            out.extend_from_slice(&xs[(plane * h + start) * w..(plane * h + end) * w]);
        }
        let out = Tensor::new(vec![n, c, rows, w], out)?;
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    /// `y = x w^T + b` for `x: [N,D]`, `w: [O,D]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let (o, wd) = self.value(w).dims2()?;
        ensure_shape!(d == wd, "linear input has {d} features, weight expects {wd}");
        let mut out = vec![F::zero(); n * o];
        gemm(
            F::one(),
            self.value(x).data(),
            MatLayout::row_major(n, d),
            self.value(w).data(),
            MatLayout::row_major(o, d).t(),
            F::zero(),
            &mut out,
            MatLayout::row_major(n, o),
        );
        if let Some(b) = b {
            let bs = self.value(b).data();
            ensure_shape!(bs.len() == o, "linear bias has {} entries for {o} outputs", bs.len());
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bs).for_each(|(v, &bb)| *v += bb);
            }
        }
        let out = Tensor::new(vec![n, o], out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &ins))
    }

    /// Row-wise log-softmax of a `[N,K]` tensor.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, k) = self.value(x).dims2()?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(k) {
            log_softmax_in_place(row);
        }
        Ok(self.push(out, Op::LogSoftmax(x), &[x]))
    }

    /// Concatenation along `axis` (1 = channels, 0 = batch).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        ensure_shape!(!parts.is_empty(), "nothing to concatenate");
        let first = self.value(parts[0]).shape().to_vec();
        ensure_shape!(axis < first.len(), "axis {axis} out of range for {:?}", first);
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            ensure_shape!(
                s.len() == first.len()
                    && s[..axis] == first[..axis]
                    && s[axis + 1..] == first[axis + 1..],
                "cannot concatenate {:?} with {:?} along axis {axis}",
                first,
                s
            );
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let block = self.value(p).shape()[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, F)]) -> Result<Var> {
        let mut value = F::zero();
        let mut inputs = Vec::new();
        let mut grads = Vec::new();
        for &(v, w) in terms {
            ensure_shape!(self.value(v).len() == 1, "weighted_sum expects scalar terms");
            value += w * self.value(v).item();
            inputs.push(v);
            grads.push(Tensor::scalar(w));
        }
        Ok(self.custom(value, inputs, grads))
    }

    /// A scalar node with precomputed local gradients `d value / d input`.
    pub fn custom(&mut self, value: F, inputs: Vec<Var>, grads: Vec<Tensor<F>>) -> Var {
        assert_eq!(inputs.len(), grads.len());
        for (v, g) in inputs.iter().zip(&grads) {
            assert_eq!(self.value(*v).shape(), g.shape(), "custom gradient shape");
        }
        let ins = inputs.clone();
        self.push(Tensor::scalar(value), Op::Custom { inputs, grads }, &ins)
    }

    /// Reverse pass from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Grads<F>> {
        ensure_shape!(self.value(root).len() == 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.value(root).shape().to_vec()));
        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                grads[idx] = Some(gout);
                continue;
            }
            self.backprop_node(idx, &gout, &mut grads)?;
            grads[idx] = Some(gout);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(F::one(), &g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, idx: usize, gout: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = conv::conv2d_backward(self.value(*x), self.value(*w), gout, *stride, *pad)?;
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let (dx, dw, db) =
                    conv::conv_transpose2d_backward(self.value(*x), self.value(*w), gout, *stride, *pad)?;
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, p) = bn_dims(xhat)?;
                let count = F::lit((n * p) as f64);
                let gd = gout.data();
                let xh = xhat.data();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        for i in (ni * c + ci) * p..(ni * c + ci + 1) * p {
                            dgamma[ci] += gd[i] * xh[i];
                            dbeta[ci] += gd[i];
                        }
                    }
                }
                let mut dx = vec![F::zero(); gd.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let k = gam[ci] * inv_std[ci];
                        for i in (ni * c + ci) * p..(ni * c + ci + 1) * p {
                            dx[i] = if *batch_stats {
                                k * (gd[i] - dbeta[ci] / count - xh[i] * dgamma[ci] / count)
                            } else {
                                k * gd[i]
                            };
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xhat.shape().to_vec(), dx)?);
                self.accumulate(grads, *gamma, Tensor::new(vec![c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(vec![c], dbeta)?);
            }
            Op::Relu(x) => {
                let g = self
                    .value(*x)
                    .zip_map(gout, |v, g| if v > F::zero() { g } else { F::zero() })?;
                self.accumulate(grads, *x, g);
            }
            Op::Sigmoid(x) => {
                let g = node.value.zip_map(gout, |s, g| g * s * (F::one() - s))?;
                self.accumulate(grads, *x, g);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Mul(a, b) => {
                let ga = gout.zip_map(self.value(*b), |g, v| g * v)?;
                let gb = gout.zip_map(self.value(*a), |g, v| g * v)?;
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, gout.map(|g| g * s));
            }
            Op::NormalizeRows { x, norms } => {
                let y = self.nodes[idx].value.data();
                let d = gout.dim(1);
                let gd = gout.data();
                let mut dx = vec![F::zero(); gd.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let row = r * d..(r + 1) * d;
                    let dot: F = y[row.clone()].iter().zip(&gd[row.clone()]).map(|(&a, &b)| a * b).sum();
                    for i in row {
                        dx[i] = (gd[i] - y[i] * dot) / n;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(gout.shape().to_vec(), dx)?);
            }
            Op::Gap(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let p = h * w;
                let inv = F::one() / F::lit(p as f64);
                let gd = gout.data();
                let g = Tensor::from_fn(vec![n, c, h, w], |i| gd[i / p] * inv);
                self.accumulate(grads, *x, g);
            }
            Op::SliceRows { x, start } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let rows = gout.dim(2);
                let mut g = Tensor::zeros(vec![n, c, h, w]);
                let gd = g.data_mut();
                for plane in 0..n * c {
                    gd[(plane * h + start) * w..(plane * h + start + rows) * w]
                        .copy_from_slice(&gout.data()[plane * rows * w..(plane + 1) * rows * w]);
                }
                self.accumulate(grads, *x, g);
            }
            Op::Linear { x, w, b } => {
                let (n, d) = self.value(*x).dims2()?;
                let (o, _) = self.value(*w).dims2()?;
                let lg = MatLayout::row_major(n, o);
                let mut dx = vec![F::zero(); n * d];
                gemm(
                    F::one(),
                    gout.data(),
                    lg,
                    self.value(*w).data(),
                    MatLayout::row_major(o, d),
                    F::zero(),
                    &mut dx,
                    MatLayout::row_major(n, d),
                );
                let mut dw = vec![F::zero(); o * d];
                gemm(
                    F::one(),
                    gout.data(),
                    lg.t(),
                    self.value(*x).data(),
                    MatLayout::row_major(n, d),
                    F::zero(),
                    &mut dw,
                    MatLayout::row_major(o, d),
                );
                self.accumulate(grads, *x, Tensor::new(vec![n, d], dx)?);
                self.accumulate(grads, *w, Tensor::new(vec![o, d], dw)?);
                if let Some(b) = b {
                    let mut db = vec![F::zero(); o];
                    for row in gout.data().chunks(o) {
                        db.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![o], db)?);
                }
            }
            Op::LogSoftmax(x) => {
                let k = node.value.dim(1);
                let mut g = gout.clone();
                for (grow, lrow) in g.data_mut().chunks_mut(k).zip(node.value.data().chunks(k)) {
                    let s: F = grow.iter().copied().sum();
                    for (gv, &l) in grow.iter_mut().zip(lrow) {
                        *gv -= l.exp() * s;
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total_block = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let ps = self.value(p).shape().to_vec();
                    let block = ps[*axis] * inner;
                    let mut g = Vec::with_capacity(outer * block);
                    for o in 0..outer {
                        let base = o * total_block + offset;
                        g.extend_from_slice(&gout.data()[base..base + block]);
                    }
                    offset += block;
                    self.accumulate(grads, p, Tensor::new(ps, g)?);
                }
            }
            Op::Sum(x) => {
                let g = gout.item();
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape().to_vec(), g));
            }
            Op::Custom { inputs, grads: local } => {
                let g = gout.item();
                for (v, lg) in inputs.iter().zip(local) {
                    self.accumulate(grads, *v, lg.map(|x| x * g));
                }
            }
        }
        Ok(())
    }

    /// Adds the gradient of every parameter leaf into the store.
    pub fn accumulate_param_grads(&self, grads: &Grads<F>, store: &mut ParamStore<F>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads.grads[i].as_ref()) {
                store.accumulate_grad(id, g);
            }
        }
    }
}

/// Logistic function kept inside the open interval (0, 1) even where the
/// exact value rounds to an endpoint.
pub(crate) fn sigmoid<F: Scalar>(v: F) -> F {
    let s = if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    };
    let top = F::one() - F::epsilon() / F::lit(2.0);
    s.max(F::min_positive_value()).min(top)
}

/// `(batch, channels, positions per channel)` of a batch-norm input.
fn bn_dims<F: Scalar>(t: &Tensor<F>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        ref other => Err(Error::InvalidShape(format!("batch norm expects [N,C] or [N,C,H,W], got {other:?}"))),
    }
}

pub(crate) fn log_softmax_in_place<F: Scalar>(row: &mut [F]) {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<F>().ln();
    row.iter_mut().for_each(|v| *v = *v - lse);
}
