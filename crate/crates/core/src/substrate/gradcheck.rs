//! Central-difference gradient verification (always `f64`).

use super::graph::{Graph, Mode, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// A scalar function returning its value and the analytic gradient w.r.t.
/// each input.
pub type ValueAndGrad<'a> = dyn Fn(&[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)> + 'a;

/// Max over all input coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`, where `numeric` is the
/// central difference with step `h`.
pub fn gradient_check(f: &ValueAndGrad<'_>, inputs: &[Tensor<f64>], h: f64) -> Result<f64> {
    let (value, analytic) = f(inputs)?;
    if !value.is_finite() {
        return Err(Error::CheckFailure(format!("function value {value} is not finite")));
    }
    if analytic.len() != inputs.len() {
        return Err(Error::CheckFailure(format!(
            "{} analytic gradients for {} inputs",
            analytic.len(),
            inputs.len()
        )));
    }
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        if grad.shape() != inputs[t].shape() {
            return Err(Error::CheckFailure(format!(
                "gradient {t} has shape {:?}, input has {:?}",
                grad.shape(),
                inputs[t].shape()
            )));
        }
        for i in 0..inputs[t].len() {
            let orig = inputs[t].data()[i];
            probe[t].data_mut()[i] = orig + h;
            let (fp, _) = f(&probe)?;
            probe[t].data_mut()[i] = orig - h;
            let (fm, _) = f(&probe)?;
            probe[t].data_mut()[i] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::CheckFailure(format!(
                    "non-finite value while perturbing input {t}[{i}]"
                )));
            }
            let numeric = (fp - fm) / (2.0 * h);
            let err = (grad.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Lifts a graph-building closure into a [`ValueAndGrad`] function: every
/// input tensor becomes a differentiable leaf and the closure returns the
/// scalar root.
pub fn graph_fn<'a>(
    mode: Mode,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a,
) -> Box<ValueAndGrad<'a>> {
    Box::new(move |inputs: &[Tensor<f64>]| {
        let mut g = Graph::new(mode);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let root = build(&mut g, &vars)?;
        let grads = g.backward(root)?;
        let value = g.value(root).item();
        let analytic = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect();
        Ok((value, analytic))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_quadratic() {
        let f = graph_fn(Mode::Train, |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        });
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 5.5]).unwrap();
        let err = gradient_check(&*f, &[x], 1e-4).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn non_finite_value_is_a_check_failure() {
        let f = |x: &[Tensor<f64>]| Ok((x[0].item().ln(), vec![Tensor::scalar(1.0 / x[0].item())]));
        let err = gradient_check(&f, &[Tensor::scalar(-1.0)], 1e-6);
        assert!(matches!(err, Err(Error::CheckFailure(_))));
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let f = |x: &[Tensor<f64>]| Ok((x[0].item() * 3.0, vec![Tensor::scalar(2.0)]));
        let err = gradient_check(&f, &[Tensor::scalar(1.0)], 1e-6).unwrap();
        assert!(err > 0.3);
    }
}
