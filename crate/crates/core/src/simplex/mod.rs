//! Probability vectors, small dense matrices and the handful of simplex
//! routines the rest of the crate is built on.
//!
//! Everything here works on `C`-dimensional objects with `C` in the tens at
//! most, so the algorithms favour exactness and simplicity over asymptotics.

mod lsq;
mod matrix;

pub use lsq::{solve_simplex_least_squares, solve_simplex_least_squares_with, LsqOptions};
pub use matrix::{invert, invert_with_threshold, matrix_one_norm, ColumnStochasticMatrix, Matrix};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for simplex membership (entry sign and total mass).
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Inputs closer than this to the simplex are repaired by projection instead of rejected.
pub const REPAIR_TOL: f64 = 1e-6;

/// A point on the probability simplex.
///
/// Entries are nonnegative and sum to one within [`SIMPLEX_TOL`]. Label
/// proportions, class priors, noisy priors and model outputs all use this type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates `values`, repairing float drift up to [`REPAIR_TOL`].
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::NotOnSimplex("empty vector".into()));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let drift = (values.iter().sum::<f64>() - 1.0).abs();
        if min >= 0.0 && drift <= SIMPLEX_TOL {
            return Ok(ProbVector(values));
        }
        if min >= -REPAIR_TOL && drift <= REPAIR_TOL {
            return project_to_simplex(&values);
        }
        Err(Error::NotOnSimplex(format!(
            "min entry {min:e}, mass off by {drift:e}"
        )))
    }

    /// Wraps `values` without checking. Callers must uphold the invariants.
    pub(crate) fn new_unchecked(values: Vec<f64>) -> Self {
        ProbVector(values)
    }

    /// The normalized histogram of `counts`.
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::InvalidArgument("all counts are zero".into()));
        }
        Ok(ProbVector(
            counts.iter().map(|&k| k as f64 / total as f64).collect(),
        ))
    }

    pub fn uniform(dim: usize) -> Self {
        assert!(dim > 0, "uniform: dimension must be positive");
        ProbVector(vec![1.0 / dim as f64; dim])
    }

    pub fn one_hot(dim: usize, hot: usize) -> Self {
        assert!(hot < dim, "one_hot: index {hot} out of range for dimension {dim}");
        let mut v = vec![0.0; dim];
        v[hot] = 1.0;
        ProbVector(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// True if every entry is strictly positive.
    pub fn is_interior(&self) -> bool {
        self.0.iter().all(|&v| v > 0.0)
    }

    /// Smallest index attaining the maximum entry.
    pub fn argmax(&self) -> usize {
        min_argmax(&self.0)
    }

    pub fn l1_distance(&self, other: &ProbVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        ProbVector::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Vec<f64> {
        p.0
    }
}

/// Smallest index of a maximal entry. Ties go to the lowest class.
pub fn min_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Euclidean projection of `v` onto the probability simplex.
///
/// Sort-based: find the largest `k` such that the `k` biggest entries stay
/// positive after a common shift, then clip.
///
/// ```
/// use llpfc::simplex::project_to_simplex;
///
/// let p = project_to_simplex(&[2.0, 0.0]).unwrap();
/// assert_eq!(p.as_slice(), &[1.0, 0.0]);
/// ```
pub fn project_to_simplex(v: &[f64]) -> Result<ProbVector> {
    if v.is_empty() {
        return Err(Error::NotOnSimplex("empty vector".into()));
    }
    if let Some(index) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut shift = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - 1.0) / (k + 1) as f64;
        if u - candidate > 0.0 {
            shift = candidate;
        }
    }
    let mut out: Vec<f64> = v.iter().map(|&x| (x - shift).max(0.0)).collect();
    // one renormalization pass absorbs the rounding in `shift`
    let total: f64 = out.iter().sum();
    if total > 0.0 {
        out.iter_mut().for_each(|x| *x /= total);
    }
    Ok(ProbVector(out))
}

/// Kullback-Leibler divergence `KL(p || q)` in nats.
///
/// Uses `0 log 0 = 0` and returns `+inf` when `p` puts mass where `q` has none.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut total = 0.0;
    for (&pi, &qi) in p.as_slice().iter().zip(q.as_slice()) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return f64::INFINITY;
        }
        total += pi * (pi / qi).ln();
    }
    total.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn projection_examples() {
        assert_eq!(project_to_simplex(&[0.5, 0.5]).unwrap().as_slice(), &[0.5, 0.5]);
        assert_eq!(project_to_simplex(&[2.0, 0.0]).unwrap().as_slice(), &[1.0, 0.0]);
        let third = project_to_simplex(&[1.0, 1.0, 1.0]).unwrap();
        for &x in third.as_slice() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn projection_rejects_nan() {
        assert!(matches!(
            project_to_simplex(&[0.1, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn prob_vector_repairs_small_drift_only() {
        let p = ProbVector::new(vec![0.5 + 1e-8, 0.5]).unwrap();
        assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(ProbVector::new(vec![0.6, 0.5]).is_err());
        assert!(ProbVector::new(vec![1.1, -0.1]).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = ProbVector::new(vec![0.3, 0.7]).unwrap();
        assert_eq!(kl_divergence(&p, &p), 0.0);
        let a = ProbVector::new(vec![1.0, 0.0]).unwrap();
        let b = ProbVector::uniform(2);
        assert!((kl_divergence(&a, &b) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(kl_divergence(&b, &a), f64::INFINITY);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(min_argmax(&[0.5, 0.5, 0.2]), 0);
        assert_eq!(min_argmax(&[0.1, 0.9]), 1);
    }

    /// Brute-force check of the projection: no simplex point on a fine grid is closer.
    #[test]
    fn projection_beats_grid_in_two_dims() {
        let v = [0.9, -0.3];
        let p = project_to_simplex(&v).unwrap();
        let d = |a: f64| (a - v[0]).powi(2) + (1.0 - a - v[1]).powi(2);
        let best = (0..=10_000).map(|k| d(k as f64 / 1e4)).fold(f64::INFINITY, f64::min);
        assert!(d(p[0]) <= best + 1e-12);
    }

    fn random_simplex(dim: usize) -> impl Strategy<Value = ProbVector> {
        prop::collection::vec(0.0f64..1.0, dim).prop_filter_map("zero mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| project_to_simplex(&v.iter().map(|x| x / s).collect::<Vec<_>>()).unwrap())
        })
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(v in prop::collection::vec(-5.0f64..5.0, 1..8)) {
            let p = project_to_simplex(&v).unwrap();
            prop_assert!(p.as_slice().iter().all(|&x| x >= 0.0));
            prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < SIMPLEX_TOL);
            let again = project_to_simplex(p.as_slice()).unwrap();
            for (a, b) in p.as_slice().iter().zip(again.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn pinsker_holds((p, q) in (2usize..6).prop_flat_map(|c| (random_simplex(c), random_simplex(c)))) {
            let kl = kl_divergence(&p, &q);
            let l1 = p.l1_distance(&q);
            prop_assert!(kl >= 0.5 * l1 * l1 - 1e-12);
        }
    }
}
