//! Prototype computation, distance classification, losses and the soft
//! k-means refinements (plain, with a distractor cluster, and masked).
//!
//! Everything here records onto a [`Graph`], so the same code serves
//! meta-training and evaluation. Distances are squared Euclidean throughout.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, MaskNet, MASK_STATS};
use crate::tensor::{Real, Tensor};

/// `[labels.len(), classes]` indicator matrix.
pub fn one_hot<T: Real>(labels: &[usize], classes: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * classes + l] = T::one();
    }
    t
}

fn class_counts(labels: &[usize], classes: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        if l >= classes {
            return Err(shape_err(
                "prototypes",
                format!("label {} out of {} classes", l, classes),
            ));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass(c));
    }
    Ok(counts)
}

/// Labeled part of a refinement: per-cluster sums of support embeddings
/// `[clusters, M]` and their counts `[clusters, 1]`. Clusters past the last
/// class get no labeled mass.
fn labeled_sums<T: Real>(
    g: &mut Graph<T>,
    support: Var,
    labels: &[usize],
    ways: usize,
    clusters: usize,
) -> Result<(Var, Var)> {
    if g.shape(support).len() != 2 || g.shape(support)[0] != labels.len() {
        return Err(shape_err(
            "prototypes",
            format!("{} labels for embeddings {:?}", labels.len(), g.shape(support)),
        ));
    }
    let counts = class_counts(labels, ways)?;
    let z = g.constant(one_hot(labels, clusters));
    let zt = g.transpose(z)?;
    let sums = g.matmul(zt, support)?;
    let counts = g.constant(Tensor::from_fn(&[clusters, 1], |c| {
        T::lit(counts.get(c).copied().unwrap_or(0) as f64)
    }));
    Ok((sums, counts))
}

/// Class means of the support embeddings `[s, M]`: row `c` averages the rows labeled `c`.
pub fn compute_prototypes<T: Real>(g: &mut Graph<T>, support: Var, labels: &[usize], ways: usize) -> Result<Var> {
    let (sums, counts) = labeled_sums(g, support, labels, ways, ways)?;
    g.div(sums, counts)
}

/// Negative squared distances `[t, n]` between targets and prototypes.
pub fn distance_logits<T: Real>(g: &mut Graph<T>, prototypes: Var, targets: Var) -> Result<Var> {
    let d = g.pairwise_sq_dist(targets, prototypes)?;
    Ok(g.neg(d))
}

/// Softmax over negative distances: `p(c | x_j)` for every target row.
pub fn classify_by_distance<T: Real>(g: &mut Graph<T>, prototypes: Var, targets: Var) -> Result<Var> {
    let logits = distance_logits(g, prototypes, targets)?;
    g.softmax(logits)
}

/// Mean negative log-probability of the true class, from logits via log-softmax.
pub fn pn_loss<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(shape_err(
            "pn_loss",
            format!("{} labels for logits {:?}", labels.len(), s),
        ));
    }
    let logp = g.log_softmax(logits)?;
    let mask = g.constant(one_hot(labels, s[1]));
    let picked = g.mul(logp, mask)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -T::one() / T::lit(labels.len().max(1) as f64)))
}

/// Mean squared error between relation scores `[t, n]` and the one-hot labels.
pub fn rn_loss<T: Real>(g: &mut Graph<T>, scores: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(scores).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(shape_err(
            "rn_loss",
            format!("{} labels for scores {:?}", labels.len(), s),
        ));
    }
    let target = g.constant(one_hot(labels, s[1]));
    let diff = g.sub(scores, target)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// Soft assignment `[u, K]` of unlabeled embeddings to centroids.
pub fn soft_assign<T: Real>(g: &mut Graph<T>, unlabeled: Var, centroids: Var) -> Result<Var> {
    let logits = distance_logits(g, centroids, unlabeled)?;
    g.softmax(logits)
}

/// One centroid update: labeled sums plus `weightsᵀ · unlabeled`, divided by
/// the labeled counts plus the column sums of `weights` (`[u, K]`).
/// `empty_guard` is added to the denominators of clusters with no labeled
/// members so that an unvisited cluster stays finite.
fn weighted_update<T: Real>(
    g: &mut Graph<T>,
    sums: Var,
    counts: Var,
    unlabeled: Var,
    weights: Var,
    empty_guard: Option<Var>,
) -> Result<Var> {
    let wt = g.transpose(weights)?;
    let soft_sums = g.matmul(wt, unlabeled)?;
    let mass = g.sum_axis(weights, 0)?;
    let k = g.shape(weights)[1];
    let mass = g.reshape(mass, &[k, 1])?;
    let num = g.add(sums, soft_sums)?;
    let mut den = g.add(counts, mass)?;
    if let Some(guard) = empty_guard {
        den = g.add(den, guard)?;
    }
    g.div(num, den)
}

fn expect_same_width<T: Real>(g: &Graph<T>, support: Var, unlabeled: Var) -> Result<()> {
    let (a, b) = (g.shape(support), g.shape(unlabeled));
    if b.len() != 2 || a[1] != b[1] {
        return Err(shape_err(
            "refine",
            format!("support {:?} and unlabeled {:?} widths differ", a, b),
        ));
    }
    Ok(())
}

/// Soft k-means refinement of the class prototypes.
///
/// Starts at [`compute_prototypes`]; each iteration re-assigns every
/// unlabeled embedding softly to the current centroids and recomputes
/// centroids from the fixed hard support assignments plus the soft ones.
/// With no unlabeled rows the prototypes come back unchanged.
pub fn refine_soft_kmeans<T: Real>(
    g: &mut Graph<T>,
    support: Var,
    labels: &[usize],
    ways: usize,
    unlabeled: Var,
    iterations: usize,
) -> Result<Var> {
    let (sums, counts) = labeled_sums(g, support, labels, ways, ways)?;
    let mut centroids = g.div(sums, counts)?;
    if g.shape(unlabeled)[0] == 0 {
        return Ok(centroids);
    }
    expect_same_width(g, support, unlabeled)?;
    for _ in 0..iterations {
        let z = soft_assign(g, unlabeled, centroids)?;
        centroids = weighted_update(g, sums, counts, unlabeled, z, None)?;
    }
    Ok(centroids)
}

/// Normalizer `A(q) = ln q + ½ ln 2π` of a cluster with length scale `q`.
pub fn length_scale_offset(q: f64) -> f64 {
    num_traits::Float::ln(q) + 0.5 * num_traits::Float::ln(2.0 * core::f64::consts::PI)
}

/// Denominator guard for the distractor cluster, which owns no labeled rows.
pub const DISTRACTOR_GUARD: f64 = 1e-10;

/// Soft assignment over `n` class clusters (length scale 1) and one extra
/// cluster with length scale `q`: `softmax_k(−d_k / q_k² − A(q_k))`.
pub fn distractor_assign<T: Real>(g: &mut Graph<T>, unlabeled: Var, centroids: Var, q: Var) -> Result<Var> {
    let k = g.shape(centroids)[0];
    let q = g.reshape(q, &[1, 1])?;
    let ones = g.constant(Tensor::ones(&[1, k - 1]));
    let scales = g.concat(&[ones, q], 1)?;
    let d = g.pairwise_sq_dist(unlabeled, centroids)?;
    let q2 = g.square(scales);
    let scaled = g.div(d, q2)?;
    let lnq = g.ln(scales);
    let half_ln_2pi = g.scalar(T::lit(length_scale_offset(1.0)));
    let offset = g.add(lnq, half_ln_2pi)?;
    let energy = g.add(scaled, offset)?;
    let logits = g.neg(energy);
    g.softmax(logits)
}

/// Soft k-means with an extra catch-all cluster initialized at the origin.
///
/// Returns `[n + 1, M]` centroids; classification uses only the first `n`.
/// `q` is the positive length scale of the extra cluster (shape `[1]`).
pub fn refine_with_distractor<T: Real>(
    g: &mut Graph<T>,
    support: Var,
    labels: &[usize],
    ways: usize,
    unlabeled: Var,
    q: Var,
    iterations: usize,
) -> Result<Var> {
    let qv = g.value(q).clone();
    if qv.numel() != 1 {
        return Err(shape_err(
            "refine_with_distractor",
            format!("q has shape {:?}", qv.shape()),
        ));
    }
    if qv.item().partial_cmp(&T::zero()) != Some(core::cmp::Ordering::Greater) {
        return Err(Error::NonPositiveScale(qv.item().as_f64()));
    }
    let clusters = ways + 1;
    let (sums, counts) = labeled_sums(g, support, labels, ways, clusters)?;
    let m = g.shape(support)[1];
    let class_rows = g.narrow(sums, 0, 0, ways)?;
    let class_counts = g.narrow(counts, 0, 0, ways)?;
    let protos = g.div(class_rows, class_counts)?;
    let origin = g.constant(Tensor::zeros(&[1, m]));
    let mut centroids = g.concat(&[protos, origin], 0)?;
    if g.shape(unlabeled)[0] > 0 {
        expect_same_width(g, support, unlabeled)?;
        let guard = g.constant(Tensor::from_fn(&[clusters, 1], |c| {
            if c == ways {
                T::lit(DISTRACTOR_GUARD)
            } else {
                T::zero()
            }
        }));
        for _ in 0..iterations {
            let z = distractor_assign(g, unlabeled, centroids, q)?;
            centroids = weighted_update(g, sums, counts, unlabeled, z, Some(guard))?;
        }
    }
    Ok(centroids)
}

/// Distances `[u, n]` divided by each row's mean over prototypes. A row
/// whose distances are all zero maps to all ones.
pub fn normalized_distances<T: Real>(g: &mut Graph<T>, unlabeled: Var, prototypes: Var) -> Result<Var> {
    let d = g.pairwise_sq_dist(unlabeled, prototypes)?;
    let mean = g.mean_axis(d, 1)?;
    let fix = g.value(mean).map(|v| if v == T::zero() { T::one() } else { T::zero() });
    let fix = g.constant(fix);
    let num = g.add(d, fix)?;
    let den = g.add(mean, fix)?;
    g.div(num, den)
}

/// Population moment guard for skewness and kurtosis.
const MOMENT_GUARD: f64 = 1e-8;

/// Per-class statistics `[n, 5]` of normalized distances `[u, n]`, taken
/// over the unlabeled rows: min, max, variance, skewness, kurtosis.
/// Variance, skewness and kurtosis are zero with fewer than two rows; all
/// five are zero with none.
pub fn distance_statistics<T: Real>(g: &mut Graph<T>, normalized: Var) -> Result<Var> {
    let s = g.shape(normalized).to_vec();
    let (u, n) = (s[0], s[1]);
    if u == 0 {
        return Ok(g.constant(Tensor::zeros(&[n, MASK_STATS])));
    }
    let min = g.min_axis(normalized, 0)?;
    let max = g.max_axis(normalized, 0)?;
    let rows = if u < 2 {
        let zero = g.constant(Tensor::zeros(&[1, n]));
        [min, max, zero, zero, zero]
    } else {
        let mean = g.mean_axis(normalized, 0)?;
        let c = g.sub(normalized, mean)?;
        let c2 = g.square(c);
        let c3 = g.mul(c2, c)?;
        let c4 = g.square(c2);
        let m2 = g.mean_axis(c2, 0)?;
        let m3 = g.mean_axis(c3, 0)?;
        let m4 = g.mean_axis(c4, 0)?;
        let guard = g.scalar(T::lit(MOMENT_GUARD));
        let m2g = g.add(m2, guard)?;
        let sd = g.sqrt(m2g);
        let sd3 = g.mul(m2g, sd)?;
        let skew = g.div(m3, sd3)?;
        let sd4 = g.square(m2g);
        let kurt = g.div(m4, sd4)?;
        [min, max, m2, skew, kurt]
    };
    let stacked = g.concat(&rows, 0)?;
    g.transpose(stacked)
}

/// `m_{r,c} = σ(−γ_c (d̃_{r,c} − β_c))` for `β`, `γ` given as `[n, 1]` columns.
pub fn masks_from_params<T: Real>(g: &mut Graph<T>, normalized: Var, beta: Var, gamma: Var) -> Result<Var> {
    let n = g.shape(normalized)[1];
    let beta_row = g.reshape(beta, &[1, n])?;
    let gamma_row = g.reshape(gamma, &[1, n])?;
    let shifted = g.sub(normalized, beta_row)?;
    let scaled = g.mul(shifted, gamma_row)?;
    let neg = g.neg(scaled);
    Ok(g.sigmoid(neg))
}

/// Soft masks and their parameters.
#[derive(Debug, Clone, Copy)]
pub struct MaskOutput {
    pub beta: Var,
    pub gamma: Var,
    pub masks: Var,
}

/// Runs the statistics network on `normalized` and gates every entry.
pub fn compute_masks<T: Real>(g: &mut Graph<T>, normalized: Var, net: &MaskNet, bound: &Bound) -> Result<MaskOutput> {
    let stats = distance_statistics(g, normalized)?;
    let (beta, gamma) = net.forward(g, bound, stats)?;
    let masks = masks_from_params(g, normalized, beta, gamma)?;
    Ok(MaskOutput { beta, gamma, masks })
}

/// Masked refinement with externally supplied masks `[u, n]`: soft
/// assignments to the initial prototypes are multiplied by the masks before
/// the centroid update.
pub fn refine_masked<T: Real>(
    g: &mut Graph<T>,
    support: Var,
    labels: &[usize],
    ways: usize,
    unlabeled: Var,
    masks: Var,
) -> Result<Var> {
    let (sums, counts) = labeled_sums(g, support, labels, ways, ways)?;
    let protos = g.div(sums, counts)?;
    if g.shape(unlabeled)[0] == 0 {
        return Ok(protos);
    }
    expect_same_width(g, support, unlabeled)?;
    let z = soft_assign(g, unlabeled, protos)?;
    let w = g.mul(z, masks)?;
    weighted_update(g, sums, counts, unlabeled, w, None)
}

/// Masked soft k-means: normalized distances to the initial prototypes feed
/// the statistics network, whose masks gate the unlabeled contributions.
pub fn refine_with_masks<T: Real>(
    g: &mut Graph<T>,
    support: Var,
    labels: &[usize],
    ways: usize,
    unlabeled: Var,
    net: &MaskNet,
    bound: &Bound,
) -> Result<Var> {
    if g.shape(unlabeled)[0] == 0 {
        return compute_prototypes(g, support, labels, ways);
    }
    let protos = compute_prototypes(g, support, labels, ways)?;
    let normalized = normalized_distances(g, unlabeled, protos)?;
    let out = compute_masks(g, normalized, net, bound)?;
    refine_masked(g, support, labels, ways, unlabeled, out.masks)
}
