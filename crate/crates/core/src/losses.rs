//! Proper losses, forward correction and the weighted empirical risk.
//!
//! A forward-corrected loss evaluates a proper loss at `T q` instead of `q`.
//! Composed with the softmax link it acts directly on unconstrained scores:
//! `lambda(s, c) = loss(T softmax(s), c)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reduction::{GroupNoiseModel, Mode};
use crate::simplex::{min_argmax, ColumnStochasticMatrix, ProbVector};

/// Loss values are clamped here when the corrected probability underflows to zero.
pub const SATURATION_CAP: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaseLoss {
    /// `-log q_c`
    Log,
    /// `sum_k (1[k = c] - q_k)^2`
    Square,
}

pub fn log_loss(q: &ProbVector, c: usize) -> f64 {
    -q[c].ln()
}

pub fn square_loss(q: &ProbVector, c: usize) -> f64 {
    q.as_slice()
        .iter()
        .enumerate()
        .map(|(k, &qk)| {
            let target = if k == c { 1.0 } else { 0.0 };
            (target - qk) * (target - qk)
        })
        .sum()
}

/// 1 unless `c` is the lowest-index maximizer of `q`.
pub fn zero_one_loss(q: &[f64], c: usize) -> f64 {
    if min_argmax(q) == c {
        0.0
    } else {
        1.0
    }
}

/// Max-shifted `log sum_k exp(s_k)`.
pub fn log_sum_exp(s: &[f64]) -> f64 {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + s.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax, the inverse of the link `psi_i(p) = log p_i - mean_k log p_k`.
pub fn softmax_inverse_link(s: &[f64]) -> ProbVector {
    ProbVector::new_unchecked(softmax(s))
}

pub(crate) fn softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = s.iter().map(|&x| (x - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Plain multiclass cross-entropy on scores.
pub fn cross_entropy(s: &[f64], c: usize) -> f64 {
    log_sum_exp(s) - s[c]
}

/// Gradient of [`cross_entropy`] with respect to the scores: `softmax(s) - e_c`.
pub fn cross_entropy_gradient(s: &[f64], c: usize) -> Vec<f64> {
    let mut g = softmax(s);
    g[c] -= 1.0;
    g
}

/// A loss value, flagged when it hit [`SATURATION_CAP`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub saturated: bool,
}

/// Forward-corrected proper composite loss with the softmax link.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeFCLoss {
    pub transition: ColumnStochasticMatrix,
    pub base: BaseLoss,
}

impl CompositeFCLoss {
    pub fn new(transition: ColumnStochasticMatrix, base: BaseLoss) -> Self {
        CompositeFCLoss { transition, base }
    }

    pub fn log(transition: ColumnStochasticMatrix) -> Self {
        Self::new(transition, BaseLoss::Log)
    }

    pub fn num_classes(&self) -> usize {
        self.transition.dim()
    }

    fn check(&self, s: &[f64], c: usize) -> Result<()> {
        let n = self.num_classes();
        if s.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: s.len(),
            });
        }
        if c >= n {
            return Err(Error::InvalidArgument(format!("class {c} out of range")));
        }
        Ok(())
    }

    /// `log sum_k t_{c,k} exp(s_k)` over the support of row `c`, or `None` if the row is zero.
    fn log_corrected_mass(&self, s: &[f64], c: usize) -> Option<f64> {
        let terms: Vec<f64> = self
            .transition
            .row(c)
            .iter()
            .zip(s)
            .filter(|(&t, _)| t > 0.0)
            .map(|(&t, &sk)| t.ln() + sk)
            .collect();
        (!terms.is_empty()).then(|| log_sum_exp(&terms))
    }

    pub fn value(&self, s: &[f64], c: usize) -> Result<LossValue> {
        self.check(s, c)?;
        let raw = match self.base {
            BaseLoss::Log => match self.log_corrected_mass(s, c) {
                Some(mass) => log_sum_exp(s) - mass,
                None => f64::INFINITY,
            },
            BaseLoss::Square => {
                let q = self.transition.apply(&softmax_inverse_link(s));
                square_loss(&q, c)
            }
        };
        Ok(if raw.is_finite() && raw <= SATURATION_CAP {
            LossValue {
                value: raw,
                saturated: false,
            }
        } else {
            LossValue {
                value: SATURATION_CAP,
                saturated: true,
            }
        })
    }

    /// Analytic gradient with respect to the scores.
    ///
    /// For the log loss this is `p_i - t_{c,i} p_i / sum_j t_{c,j} p_j` with
    /// `p = softmax(s)`. A saturated evaluation returns a zero gradient.
    pub fn gradient(&self, s: &[f64], c: usize) -> Result<(Vec<f64>, bool)> {
        self.check(s, c)?;
        let p = softmax(s);
        match self.base {
            BaseLoss::Log => {
                let Some(mass) = self.log_corrected_mass(s, c) else {
                    return Ok((vec![0.0; s.len()], true));
                };
                let row = self.transition.row(c);
                let grad = p
                    .iter()
                    .zip(row.iter().zip(s))
                    .map(|(&pi, (&t, &si))| {
                        let r = if t > 0.0 { (t.ln() + si - mass).exp() } else { 0.0 };
                        pi - r
                    })
                    .collect();
                Ok((grad, false))
            }
            BaseLoss::Square => {
                // d/dq of sum_k (e_c - Tq)_k^2 is 2 T^T (Tq - e_c)
                let m = self.transition.as_matrix();
                let mut diff = m.mul_vec(&p);
                diff[c] -= 1.0;
                let dq = m.transpose().mul_vec(&diff);
                // softmax Jacobian diag(p) - p p^T is symmetric
                let inner: f64 = p.iter().zip(&dq).map(|(a, b)| a * b).sum();
                let grad = p.iter().zip(&dq).map(|(pi, d)| 2.0 * pi * (d - inner)).collect();
                Ok((grad, false))
            }
        }
    }
}

pub fn fc_loss_value(loss: &CompositeFCLoss, s: &[f64], c: usize) -> Result<LossValue> {
    loss.value(s, c)
}

pub fn fc_loss_gradient(loss: &CompositeFCLoss, s: &[f64], c: usize) -> Result<Vec<f64>> {
    loss.gradient(s, c).map(|(g, _)| g)
}

/// Coefficient a point with noisy label `c` carries in the empirical risk of its group.
///
/// Uniform mode uses `w_i / n_i`; the ideal and approx modes use
/// `w_i alpha_i(c) / n_{i,c}`. The two coincide when `alpha_i` is the bag-size share.
pub fn point_weight(model: &GroupNoiseModel, c: usize, mode: Mode) -> f64 {
    match mode {
        Mode::Uniform => model.weight / model.num_points() as f64,
        Mode::Ideal | Mode::Approx => model.weight * model.alpha_hat[c] / model.bag_sizes[c] as f64,
    }
}

/// Weighted empirical risk over all groups, using the log loss.
///
/// `bag_scores[k]` holds the score vectors of the points of bag `k`; only
/// bags referenced by the models are read.
pub fn weighted_empirical_risk(models: &[GroupNoiseModel], bag_scores: &[Vec<Vec<f64>>], mode: Mode) -> Result<f64> {
    let mut total = 0.0;
    for (i, model) in models.iter().enumerate() {
        if model.bag_refs.len() != model.transition.dim() || model.bag_sizes.len() != model.bag_refs.len() {
            return Err(Error::Bookkeeping(format!("group {i} does not list one bag per class")));
        }
        let loss = CompositeFCLoss::log(model.transition.clone());
        for (c, (&k, &size)) in model.bag_refs.iter().zip(&model.bag_sizes).enumerate() {
            let scores = bag_scores
                .get(k)
                .ok_or_else(|| Error::Bookkeeping(format!("no scores for bag {k}")))?;
            if scores.len() != size {
                return Err(Error::Bookkeeping(format!(
                    "bag {k} has {} scored points, group {i} expects {size}",
                    scores.len()
                )));
            }
            let coef = point_weight(model, c, mode);
            for s in scores {
                total += coef * loss.value(s, c)?.value;
            }
        }
    }
    Ok(total)
}

/// Constants entering the generalization bound for one transition matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzConstants {
    /// Universal Lipschitz constant of the corrected cross-entropy, `sqrt 2`.
    pub bound: f64,
    /// `max_c |lambda(0, c)| = max_c -log(mean_j t_{c,j})`.
    pub lambda0: f64,
    /// Set when some row of `T` is zero and `lambda0` is infinite.
    pub unbounded: bool,
}

pub fn lipschitz_constants(t: &ColumnStochasticMatrix) -> LipschitzConstants {
    let c = t.dim() as f64;
    let lambda0 = (0..t.dim())
        .map(|i| -(t.row(i).iter().sum::<f64>() / c).ln())
        .fold(f64::NEG_INFINITY, f64::max);
    LipschitzConstants {
        bound: std::f64::consts::SQRT_2,
        lambda0,
        unbounded: lambda0.is_infinite(),
    }
}
