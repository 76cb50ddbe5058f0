//! Consistency (virtual adversarial) and random-walk regularizers.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpnConfig {
    /// Radius of the adversarial perturbation.
    pub epsilon: f64,
    /// Finite-difference radius of the power iteration.
    pub xi: f64,
    pub power_iterations: usize,
    /// Number of unlabeled→unlabeled hops in the random walk.
    pub walk_length: usize,
    /// Distances are divided by this before every walk softmax.
    pub temperature: f64,
    /// Weight of `vat + rw` added to the prototypical loss.
    pub ssl_weight: f64,
}

impl Default for CpnConfig {
    fn default() -> Self {
        Self {
            epsilon: 2.0,
            xi: 1e-6,
            power_iterations: 1,
            walk_length: 1,
            temperature: 1.0,
            ssl_weight: 1.0,
        }
    }
}

/// `mean_rows Σ_c p (ln p − ln softmax(logits))` for fixed probabilities `p`.
pub fn kl_from_probs<T: Real>(g: &mut Graph<T>, p: &Tensor<T>, logits: Var) -> Result<Var> {
    if p.shape() != g.shape(logits) || p.rank() != 2 {
        return Err(shape_err(
            "kl",
            format!("probabilities {:?} vs logits {:?}", p.shape(), g.shape(logits)),
        ));
    }
    let plogp: T = p
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v * v.ln() } else { T::zero() })
        .sum();
    let logq = g.log_softmax(logits)?;
    let pc = g.constant(p.clone());
    let cross = g.mul(pc, logq)?;
    let cross = g.sum(cross);
    let rows = T::lit(p.shape()[0].max(1) as f64);
    let entropy = g.scalar(plogp);
    let kl = g.sub(entropy, cross)?;
    Ok(g.scale(kl, T::one() / rows))
}

fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let cols = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(cols.max(1)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s = s + *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
    out
}

/// Rescales every sample (leading axis) of `d` to unit L2 norm. Samples with
/// a zero or non-finite norm are replaced by the matching sample of `fallback`.
fn unit_per_sample<T: Real>(d: &Tensor<T>, fallback: &Tensor<T>) -> Tensor<T> {
    let n = d.shape()[0].max(1);
    let per = d.numel() / n;
    let mut out = d.clone();
    for (i, chunk) in out.data_mut().chunks_mut(per.max(1)).enumerate() {
        let norm = chunk.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm > T::zero() && norm.is_finite() {
            chunk.iter_mut().for_each(|v| *v = *v / norm);
        } else {
            chunk.copy_from_slice(&fallback.data()[i * per..(i + 1) * per]);
        }
    }
    out
}

/// Draws a random direction with unit norm per sample.
pub fn random_direction<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let raw = Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(rng);
        T::lit(v)
    });
    let n = shape.first().copied().unwrap_or(0).max(1);
    let per = raw.numel() / n;
    let ones = Tensor::full(shape, T::one() / T::lit(Float::sqrt(per.max(1) as f64)));
    unit_per_sample(&raw, &ones)
}

/// Refines `direction` by power iteration on a frozen copy of the model:
/// each step evaluates the gradient of the divergence at `xi · direction`.
pub fn adversarial_direction<T, F>(
    store: &ParamStore<T>,
    predict: &mut F,
    images: &Tensor<T>,
    clean_probs: &Tensor<T>,
    direction: Tensor<T>,
    config: &CpnConfig,
) -> Result<Tensor<T>>
where
    T: Real,
    F: FnMut(&mut Graph<T>, &Bound, Var) -> Result<Var>,
{
    let mut d = direction;
    for _ in 0..config.power_iterations {
        let mut g = Graph::new();
        let bound = store.bind_frozen(&mut g);
        let x = g.constant(images.clone());
        let r = g.param(d.map(|v| v * T::lit(config.xi)));
        let xr = g.add(x, r)?;
        let logits = predict(&mut g, &bound, xr)?;
        let kl = kl_from_probs(&mut g, clean_probs, logits)?;
        g.backward(kl)?;
        d = match g.grad(r) {
            Some(grad) => unit_per_sample(grad, &d),
            None => d,
        };
    }
    Ok(d)
}

/// Virtual adversarial loss on `images`.
///
/// `predict` maps an image batch to class logits under the parameters in
/// `bound`; it is called on the main tape with the adversarially perturbed
/// batch and on throwaway tapes for the power iteration. `clean_logits` are
/// treated as constants. With `epsilon = 0` the loss is exactly zero.
#[allow(clippy::too_many_arguments)]
pub fn vat_loss<T, F, R>(
    g: &mut Graph<T>,
    bound: &Bound,
    store: &ParamStore<T>,
    mut predict: F,
    images: &Tensor<T>,
    clean_logits: &Tensor<T>,
    config: &CpnConfig,
    rng: &mut R,
) -> Result<Var>
where
    T: Real,
    F: FnMut(&mut Graph<T>, &Bound, Var) -> Result<Var>,
    R: Rng + ?Sized,
{
    let start = random_direction(images.shape(), rng);
    vat_loss_from(g, bound, store, &mut predict, images, clean_logits, start, config)
}

/// [`vat_loss`] with a caller-chosen starting direction.
#[allow(clippy::too_many_arguments)]
pub fn vat_loss_from<T, F>(
    g: &mut Graph<T>,
    bound: &Bound,
    store: &ParamStore<T>,
    predict: &mut F,
    images: &Tensor<T>,
    clean_logits: &Tensor<T>,
    start: Tensor<T>,
    config: &CpnConfig,
) -> Result<Var>
where
    T: Real,
    F: FnMut(&mut Graph<T>, &Bound, Var) -> Result<Var>,
{
    let clean = softmax_rows(clean_logits);
    let d = adversarial_direction(store, predict, images, &clean, start, config)?;
    let eps = T::lit(config.epsilon);
    let perturbed: Vec<T> = images.data().iter().zip(d.data()).map(|(&x, &v)| x + eps * v).collect();
    let x = g.constant(Tensor::new(images.shape(), perturbed)?);
    let logits = predict(g, bound, x)?;
    kl_from_probs(g, &clean, logits)
}

/// Guard inside the logarithm of the return probabilities.
pub const WALK_GUARD: f64 = 1e-10;

/// Large negative logit that removes self-transitions between unlabeled points.
const NO_SELF_STEP: f64 = -1e30;

fn transition<T: Real>(g: &mut Graph<T>, from: Var, to: Var, temperature: f64, no_self: bool) -> Result<Var> {
    let d = g.pairwise_sq_dist(from, to)?;
    let mut logits = g.scale(d, -T::one() / T::lit(temperature));
    if no_self {
        let n = g.shape(d)[0];
        let mask = g.constant(Tensor::from_fn(&[n, n], |i| {
            if i / n == i % n {
                T::lit(NO_SELF_STEP)
            } else {
                T::zero()
            }
        }));
        logits = g.add(logits, mask)?;
    }
    g.softmax(logits)
}

/// Random-walk loss: walk from each prototype to the unlabeled points, take
/// `walk_length` hops among them (never staying put), return to the
/// prototypes, and penalize `−ln` of landing back on the starting class.
/// Walks with fewer than two unlabeled points skip the inner hops.
pub fn rw_loss<T: Real>(
    g: &mut Graph<T>,
    prototypes: Var,
    unlabeled: Var,
    walk_length: usize,
    temperature: f64,
) -> Result<Var> {
    let n = g.shape(prototypes)[0];
    let u = g.shape(unlabeled)[0];
    if u == 0 {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let p2u = transition(g, prototypes, unlabeled, temperature, false)?;
    let u2p = transition(g, unlabeled, prototypes, temperature, false)?;
    let mut walk = p2u;
    if u >= 2 && walk_length > 0 {
        let u2u = transition(g, unlabeled, unlabeled, temperature, true)?;
        for _ in 0..walk_length {
            walk = g.matmul(walk, u2u)?;
        }
    }
    let landing = g.matmul(walk, u2p)?;
    let eye = g.constant(Tensor::from_fn(&[n, n], |i| {
        if i / n == i % n {
            T::one()
        } else {
            T::zero()
        }
    }));
    let diag = g.mul(landing, eye)?;
    let diag = g.sum_axis(diag, 1)?;
    let guard = g.scalar(T::lit(WALK_GUARD));
    let diag = g.add(diag, guard)?;
    let logs = g.ln(diag);
    let m = g.mean(logs);
    Ok(g.neg(m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let logits = Tensor::new(&[2, 3], alloc::vec![0.1, 2.0, -1.0, 0.0, 0.0, 3.0]).unwrap();
        let p = softmax_rows(&logits);
        let mut g = Graph::<f64>::new();
        let l = g.constant(logits);
        let kl = kl_from_probs(&mut g, &p, l).unwrap();
        assert!(g.value(kl).item().abs() < 1e-12);
    }

    #[test]
    fn separated_walk_returns_home() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::new(&[2, 1], alloc::vec![0.0, 100.0]).unwrap());
        let u = g.constant(Tensor::new(&[4, 1], alloc::vec![0.0, 0.1, 100.0, 100.1]).unwrap());
        for len in [0, 1, 3] {
            let l = rw_loss(&mut g, p, u, len, 1.0).unwrap();
            assert!(g.value(l).item().abs() < 1e-6);
        }
    }

    #[test]
    fn direction_has_unit_norm() {
        let mut rng = crate::rng::rng_from(1, 0);
        let d: Tensor<f64> = random_direction(&[3, 2, 2], &mut rng);
        for chunk in d.data().chunks(4) {
            let n: f64 = chunk.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
