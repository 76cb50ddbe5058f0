//! Central finite-difference verification of analytic gradients.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Finite-difference step used by [`grad_check`].
pub const DEFAULT_STEP: f64 = 1e-4;

/// Largest relative disagreement between the tape gradient and a central
/// difference, over every coordinate of every input.
///
/// `f` builds a scalar from the supplied input handles; it is called once
/// on a tape with the inputs marked trainable and twice per coordinate on
/// fresh tapes with that coordinate nudged by `±step`. The per-coordinate
/// error is `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with_step(f, inputs, DEFAULT_STEP)
}

pub fn grad_check_with_step<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(&f, inputs)?;
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for coord in 0..input.numel() {
            let original = input.data()[coord];
            probe[which].data_mut()[coord] = original + step;
            let up = evaluate(&f, &probe)?;
            probe[which].data_mut()[coord] = original - step;
            let down = evaluate(&f, &probe)?;
            probe[which].data_mut()[coord] = original;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[which].data()[coord];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let value = g.value(out);
    if value.numel() != 1 {
        return Err(Error::NonScalarLoss(value.shape().to_vec()));
    }
    Ok(value.item())
}

/// Tape gradients of `f` w.r.t. each input (zeros where the output does not depend on it).
pub fn analytic_grads<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact_to_rounding() {
        let x = Tensor::new(&[3], alloc::vec![0.5, -1.0, 2.0]).unwrap();
        let err = grad_check(
            |g, v| {
                let s = g.scale(v[0], 3.0);
                Ok(g.sum(s))
            },
            &[x],
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }
}
