use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Index of a [`Param`] inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    /// Batch-norm running statistics: persisted, never differentiated.
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn is_buffer(self) -> bool {
        matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn is_batch_norm(self) -> bool {
        !matches!(self, ParamKind::Weight | ParamKind::Bias)
    }
}

/// A named tensor with its gradient and momentum buffer.
#[derive(Clone, Debug)]
pub struct Param<F: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<F>,
    pub gradient: Tensor<F>,
    pub momentum_buffer: Tensor<F>,
    /// Set when backward reached this parameter since the last `zero_grad`.
    pub grad_populated: bool,
    /// Frozen parameters are skipped by the optimizer.
    pub frozen: bool,
}

impl<F: Scalar> Param<F> {
    pub fn new(name: impl Into<String>, kind: ParamKind, tensor: Tensor<F>) -> Self {
        let shape = tensor.shape().to_vec();
        Param {
            name: name.into(),
            kind,
            gradient: Tensor::zeros(shape.clone()),
            momentum_buffer: Tensor::zeros(shape),
            tensor,
            grad_populated: false,
            frozen: false,
        }
    }

    pub fn trainable(&self) -> bool {
        !self.frozen && !self.kind.is_buffer()
    }
}

/// Heavy-ball SGD with coupled L2 weight decay:
/// `g' = g + wd*w; buf = momentum*buf + g'; w -= lr*buf`.
pub fn sgd_update<F: Scalar>(p: &mut Param<F>, lr: F, weight_decay: F, momentum: F) {
    let w = p.tensor.data_mut();
    let g = p.gradient.data();
    let buf = p.momentum_buffer.data_mut();
    for i in 0..w.len() {
        let step = g[i] + weight_decay * w[i];
        buf[i] = momentum * buf[i] + step;
        w[i] -= lr * buf[i];
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScheme {
    /// `N(0, 2/fan_in)`.
    He,
    /// `N(0, 2/(fan_in+fan_out))`.
    Xavier,
    /// `N(0, std^2)` regardless of fan.
    Normal(f64),
}

/// Owns every parameter of a model, addressed by [`ParamId`] or unique name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F: Scalar> {
    params: Vec<Param<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param::new(name, kind, tensor));
        id
    }

    /// Adds a weight drawn from the given scheme.
    pub fn add_weight(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        fan_out: usize,
        scheme: InitScheme,
        rng: &mut impl Rng,
    ) -> ParamId {
        let var = match scheme {
            InitScheme::He => 2.0 / fan_in as f64,
            InitScheme::Xavier => 2.0 / (fan_in + fan_out) as f64,
            InitScheme::Normal(std) => std * std,
        };
        let normal = Normal::new(0.0, var.sqrt()).expect("finite std");
        let t = Tensor::from_fn(shape, |_| F::lit(normal.sample(rng)));
        self.add(name, ParamKind::Weight, t)
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().filter(|p| !p.kind.is_buffer()).map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.gradient.fill(F::zero());
            p.grad_populated = false;
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<F>) {
        let p = &mut self.params[id.0];
        p.gradient.axpy(F::one(), grad);
        p.grad_populated = true;
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = true;
            }
        }
    }

    /// One optimizer step on every trainable parameter.
    pub fn sgd_step(&mut self, lr: F, weight_decay: F, momentum: F, decay_batch_norm: bool) {
        for p in self.params.iter_mut().filter(|p| p.trainable()) {
            let wd = if p.kind.is_batch_norm() && !decay_batch_norm {
                F::zero()
            } else {
                weight_decay
            };
            sgd_update(p, lr, wd, momentum);
        }
    }

    /// Rescales the trainable gradients so their joint L2 norm is at most
    /// `max_norm`. Returns the norm before rescaling.
    pub fn clip_grad_norm(&mut self, max_norm: F) -> F {
        let norm = self
            .params
            .iter()
            .filter(|p| p.trainable())
            .flat_map(|p| p.gradient.data().iter())
            .fold(F::zero(), |acc, &g| acc + g * g)
            .sqrt();
        if norm > max_norm {
            let scale = max_norm / norm;
            for p in self.params.iter_mut().filter(|p| p.trainable()) {
                p.gradient.data_mut().iter_mut().for_each(|g| *g = *g * scale);
            }
        }
        norm
    }

    /// Overwrites a tensor by name, checking the shape.
    pub fn set_tensor(&mut self, name: &str, tensor: Tensor<F>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter {name}")))?;
        let p = &mut self.params[id.0];
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::InvalidShape(format!(
                "parameter {name} expects {:?}, got {:?}",
                p.tensor.shape(),
                tensor.shape()
            )));
        }
        p.tensor = tensor;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(w: f64, g: f64) -> Param<f64> {
        let mut p = Param::new("w", ParamKind::Weight, Tensor::scalar(w));
        p.gradient = Tensor::scalar(g);
        p
    }

    #[test]
    fn plain_step() {
        let mut p = scalar_param(1.0, 1.0);
        sgd_update(&mut p, 0.01, 0.0, 0.0);
        assert!((p.tensor.item() - 0.99).abs() < 1e-15);
    }

    #[test]
    fn decay_only_step() {
        let mut p = scalar_param(1.0, 0.0);
        sgd_update(&mut p, 0.01, 0.0005, 0.0);
        assert!((p.tensor.item() - 0.999995).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_tensor() {
        let mut p = scalar_param(1.25, 3.0);
        sgd_update(&mut p, 0.0, 0.1, 0.9);
        assert_eq!(p.tensor.item(), 1.25);
    }

    #[test]
    fn momentum_two_steps() {
        // buf1 = 1, w1 = 1 - 0.1 = 0.9; buf2 = 0.9 + 1 = 1.9, w2 = 0.9 - 0.19 = 0.71.
        let mut p = scalar_param(1.0, 1.0);
        sgd_update(&mut p, 0.1, 0.0, 0.9);
        assert!((p.tensor.item() - 0.9).abs() < 1e-12);
        sgd_update(&mut p, 0.1, 0.0, 0.9);
        assert!((p.tensor.item() - 0.71).abs() < 1e-12);
    }

    #[test]
    fn frozen_and_buffers_skip_the_optimizer() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a.w", ParamKind::Weight, Tensor::scalar(1.0));
        let b = store.add("b.running_mean", ParamKind::RunningMean, Tensor::scalar(1.0));
        let c = store.add("c.w", ParamKind::Weight, Tensor::scalar(1.0));
        store.freeze_prefix("c.");
        for id in [a, b, c] {
            store.accumulate_grad(id, &Tensor::scalar(1.0));
        }
        store.sgd_step(0.5, 0.0, 0.0, true);
        assert_eq!(store.get(a).tensor.item(), 0.5);
        assert_eq!(store.get(b).tensor.item(), 1.0);
        assert_eq!(store.get(c).tensor.item(), 1.0);
    }

    #[test]
    fn clipping_rescales_only_above_the_ceiling() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", ParamKind::Weight, Tensor::scalar(0.0));
        let b = store.add("b", ParamKind::Weight, Tensor::scalar(0.0));
        store.accumulate_grad(a, &Tensor::scalar(3.0));
        store.accumulate_grad(b, &Tensor::scalar(4.0));
        assert_eq!(store.clip_grad_norm(10.0), 5.0);
        assert_eq!(store.get(a).gradient.item(), 3.0);
        assert_eq!(store.clip_grad_norm(1.0), 5.0);
        assert!((store.get(a).gradient.item() - 0.6).abs() < 1e-15);
        assert!((store.get(b).gradient.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn names_are_unique() {
        let mut store = ParamStore::<f32>::new();
        store.add("x", ParamKind::Bias, Tensor::scalar(0.0));
        store.add("x", ParamKind::Bias, Tensor::scalar(0.0));
    }
}
