//! Parameterised building blocks: convolutions, batch norm, affine maps and
//! bottleneck residual stages.

use rand::Rng;

use crate::error::Result;
use crate::substrate::graph::BnStatUpdate;
use crate::substrate::{Graph, InitScheme, Mode, ParamId, ParamKind, ParamStore, Scalar, Tensor, Var};

/// Weight std of layers that emit logits or heatmaps, so their outputs start
/// near zero.
pub const HEAD_INIT_STD: f64 = 1e-3;

/// Shared state while registering the parameters of a model.
pub struct Builder<'a, F: Scalar, R: Rng> {
    pub store: &'a mut ParamStore<F>,
    pub rng: &'a mut R,
    pub init: InitScheme,
}

impl<F: Scalar, R: Rng> Builder<'_, F, R> {
    /// Runs `f` with a different weight initialisation.
    pub fn with_init<T>(&mut self, init: InitScheme, f: impl FnOnce(&mut Self) -> T) -> T {
        let saved = std::mem::replace(&mut self.init, init);
        let out = f(self);
        self.init = saved;
        out
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub transposed: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng>(
        b: &mut Builder<'_, F, R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let weight = b.store.add_weight(
            format!("{name}.weight"),
            vec![cout, cin, k, k],
            cin * k * k,
            cout * k * k,
            b.init,
            b.rng,
        );
        let bias = bias.then(|| b.store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(vec![cout])));
        Conv {
            weight,
            bias,
            stride,
            pad,
            transposed: false,
        }
    }

    /// Transposed convolution; the kernel is stored as `[cin, cout, k, k]`.
    #[allow(clippy::too_many_arguments)]
    pub fn transposed<F: Scalar, R: Rng>(
        b: &mut Builder<'_, F, R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        // Each output pixel receives (k/stride)^2 taps per input channel.
        let taps = (k / stride).max(1);
        let weight = b.store.add_weight(
            format!("{name}.weight"),
            vec![cin, cout, k, k],
            cin * taps * taps,
            cout * k * k,
            b.init,
            b.rng,
        );
        let bias = bias.then(|| b.store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(vec![cout])));
        Conv {
            weight,
            bias,
            stride,
            pad,
            transposed: true,
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|id| g.param(store, id));
        if self.transposed {
            g.conv_transpose2d(x, w, b, self.stride, self.pad)
        } else {
            g.conv2d(x, w, b, self.stride, self.pad)
        }
    }

    /// Convolution followed by ReLU.
    pub fn forward_relu<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let y = self.forward(g, store, x)?;
        Ok(g.relu(y))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<F: Scalar, R: Rng>(b: &mut Builder<'_, F, R>, name: &str, channels: usize, eps: f64) -> Self {
        BatchNorm {
            gamma: b.store.add(format!("{name}.gamma"), ParamKind::BnScale, Tensor::ones(vec![channels])),
            beta: b.store.add(format!("{name}.beta"), ParamKind::BnShift, Tensor::zeros(vec![channels])),
            running_mean: b.store.add(
                format!("{name}.running_mean"),
                ParamKind::RunningMean,
                Tensor::zeros(vec![channels]),
            ),
            running_var: b.store.add(
                format!("{name}.running_var"),
                ParamKind::RunningVar,
                Tensor::ones(vec![channels]),
            ),
            eps,
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let eps = F::lit(self.eps);
        match g.mode() {
            Mode::Train => {
                let (y, stats) = g.batch_norm(x, gamma, beta, None, eps)?;
                let (batch_mean, batch_var) = stats.expect("training-mode batch norm yields statistics");
                g.push_bn_update(BnStatUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    batch_mean,
                    batch_var,
                });
                Ok(y)
            }
            Mode::Eval => {
                let rm = store.get(self.running_mean).tensor.data();
                let rv = store.get(self.running_var).tensor.data();
                let (y, _) = g.batch_norm(x, gamma, beta, Some((rm, rv)), eps)?;
                Ok(y)
            }
        }
    }
}

/// Bias-free convolution followed by batch norm.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng>(
        b: &mut Builder<'_, F, R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        eps: f64,
    ) -> Self {
        ConvBn {
            conv: Conv::new(b, name, cin, cout, k, stride, pad, false),
            bn: BatchNorm::new(b, &format!("{name}.bn"), cout, eps),
        }
    }

    /// Transposed variant; see [`Conv::transposed`].
    #[allow(clippy::too_many_arguments)]
    pub fn transposed<F: Scalar, R: Rng>(
        b: &mut Builder<'_, F, R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        eps: f64,
    ) -> Self {
        ConvBn {
            conv: Conv::transposed(b, name, cin, cout, k, stride, pad, false),
            bn: BatchNorm::new(b, &format!("{name}.bn"), cout, eps),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        self.bn.forward(g, store, y)
    }

    pub fn forward_relu<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let y = self.forward(g, store, x)?;
        Ok(g.relu(y))
    }
}

/// Folds the batch statistics recorded in `g` into the running buffers.
pub fn apply_bn_updates<F: Scalar>(g: &Graph<F>, store: &mut ParamStore<F>, momentum: f64) {
    let m = F::lit(momentum);
    let keep = F::one() - m;
    for u in g.bn_updates() {
        for (id, stat) in [(u.running_mean, &u.batch_mean), (u.running_var, &u.batch_var)] {
            let t = store.get_mut(id).tensor.data_mut();
            for (r, &s) in t.iter_mut().zip(stat.iter()) {
                *r = keep * *r + m * s;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng>(b: &mut Builder<'_, F, R>, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        let weight = b
            .store
            .add_weight(format!("{name}.weight"), vec![dout, din], din, dout, b.init, b.rng);
        let bias = bias.then(|| b.store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(vec![dout])));
        Linear { weight, bias }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|id| g.param(store, id));
        g.linear(x, w, b)
    }
}

/// ResNet bottleneck: 1x1 reduce, strided 3x3, 1x1 expand, plus shortcut.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub reduce: (Conv, BatchNorm),
    pub spatial: (Conv, BatchNorm),
    pub expand: (Conv, BatchNorm),
    pub shortcut: Option<(Conv, BatchNorm)>,
}

impl Bottleneck {
    pub fn new<F: Scalar, R: Rng>(
        b: &mut Builder<'_, F, R>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        eps: f64,
    ) -> Self {
        let width = cout / 4;
        let pair = |b: &mut Builder<'_, F, R>, n: &str, ci, co, k, s, p| {
            (
                Conv::new(b, &format!("{name}.{n}"), ci, co, k, s, p, false),
                BatchNorm::new(b, &format!("{name}.{n}.bn"), co, eps),
            )
        };
        Bottleneck {
            reduce: pair(b, "conv1", cin, width, 1, 1, 0),
            spatial: pair(b, "conv2", width, width, 3, stride, 1),
            expand: pair(b, "conv3", width, cout, 1, 1, 0),
            shortcut: (stride != 1 || cin != cout).then(|| pair(b, "downsample", cin, cout, 1, stride, 0)),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let cbr = |g: &mut Graph<F>, (c, bn): &(Conv, BatchNorm), x: Var, relu: bool| -> Result<Var> {
            let y = c.forward(g, store, x)?;
            let y = bn.forward(g, store, y)?;
            Ok(if relu { g.relu(y) } else { y })
        };
        let y = cbr(g, &self.reduce, x, true)?;
        let y = cbr(g, &self.spatial, y, true)?;
        let y = cbr(g, &self.expand, y, false)?;
        let skip = match &self.shortcut {
            Some(sc) => cbr(g, sc, x, false)?,
            None => x,
        };
        let sum = g.add(y, skip)?;
        Ok(g.relu(sum))
    }

    /// Parameters on the residual path (everything but the shortcut).
    pub fn residual_weights(&self) -> [ParamId; 3] {
        [self.reduce.0.weight, self.spatial.0.weight, self.expand.0.weight]
    }
}

/// A sequence of bottlenecks; only the first one changes width or stride.
#[derive(Clone, Debug)]
pub struct ResStage {
    pub blocks: Vec<Bottleneck>,
}

impl ResStage {
    pub fn new<F: Scalar, R: Rng>(
        b: &mut Builder<'_, F, R>,
        name: &str,
        cin: usize,
        cout: usize,
        blocks: usize,
        stride: usize,
        eps: f64,
    ) -> Self {
        let blocks = (0..blocks)
            .map(|i| {
                let (ci, s) = if i == 0 { (cin, stride) } else { (cout, 1) };
                Bottleneck::new(b, &format!("{name}.{i}"), ci, cout, s, eps)
            })
            .collect();
        ResStage { blocks }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, mut x: Var) -> Result<Var> {
        for block in &self.blocks {
            x = block.forward(g, store, x)?;
        }
        Ok(x)
    }
}
