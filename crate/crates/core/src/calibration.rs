//! Calibration of the forward-corrected log loss against the 0-1 loss.
//!
//! For the log loss the calibration function is bounded below by
//! `theta(eps) = eps^2 / (2 ||T^{-1}||_1^2)`, which turns a surrogate excess
//! risk `E` into the 0-1 excess-risk bound `sqrt(2) ||T^{-1}||_1 sqrt(E)`.
//! The bound comes from the pointwise chain
//!
//! ```text
//! KL(Tp || Tq) >= 1/2 ||T(p - q)||_1^2
//!              >= 1/2 ||p - q||_1^2 / ||T^{-1}||_1^2
//!              >= 1/2 (0-1 inner excess)^2 / ||T^{-1}||_1^2
//! ```
//!
//! [`verify_inner_risk_inequality`] samples random triples `(p, q, T)` and
//! counts violations of every link separately.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bags::sample_gamma_uniform;
use crate::error::{Error, Result};
use crate::simplex::{kl_divergence, matrix_one_norm, ColumnStochasticMatrix, Matrix, ProbVector};

/// Slack allowed on each sampled inequality.
pub const INEQUALITY_TOL: f64 = 1e-10;

/// Condition-number ceiling for randomly drawn transition matrices.
pub const RANDOM_T_MAX_CONDITION: f64 = 1e6;

/// `(1 - a) I + a N`, with `N` the all-`1/C` matrix.
pub fn noise_family_matrix(classes: usize, a: f64) -> Result<ColumnStochasticMatrix> {
    if classes == 0 {
        return Err(Error::InvalidArgument("need at least one class".into()));
    }
    if !(0.0..1.0).contains(&a) {
        return Err(Error::InvalidArgument(format!(
            "noise level {a} outside [0, 1); a = 1 is singular"
        )));
    }
    let mut m = Matrix::zeros(classes);
    let off = a / classes as f64;
    for i in 0..classes {
        for j in 0..classes {
            m[(i, j)] = if i == j { 1.0 - a + off } else { off };
        }
    }
    ColumnStochasticMatrix::new(m)
}

/// Closed form of `||T^{-1}||_1` for the noise family: `(1 + (1 - 2/C) a) / (1 - a)`.
pub fn noise_family_inverse_norm(classes: usize, a: f64) -> f64 {
    (1.0 + (1.0 - 2.0 / classes as f64) * a) / (1.0 - a)
}

/// The log-loss calibration lower bound for a fixed `T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationBound {
    pub t_inv_one_norm: f64,
}

impl CalibrationBound {
    pub fn for_matrix(t: &ColumnStochasticMatrix) -> Result<Self> {
        Ok(CalibrationBound {
            t_inv_one_norm: matrix_one_norm(&t.invert()?),
        })
    }

    /// `eps^2 / (2 ||T^{-1}||_1^2)`
    pub fn theta_lb(&self, eps: f64) -> f64 {
        eps * eps / (2.0 * self.t_inv_one_norm * self.t_inv_one_norm)
    }

    /// `sqrt(2) ||T^{-1}||_1`
    pub fn bound_coeff(&self) -> f64 {
        std::f64::consts::SQRT_2 * self.t_inv_one_norm
    }
}

/// Upper bound on the 0-1 excess risk given the forward-corrected excess risk.
pub fn excess_risk_bound(t: &ColumnStochasticMatrix, surrogate_excess: f64) -> Result<f64> {
    if !(surrogate_excess >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "surrogate excess {surrogate_excess} must be nonnegative"
        )));
    }
    Ok(CalibrationBound::for_matrix(t)?.bound_coeff() * surrogate_excess.sqrt())
}

/// 0-1 inner excess risk of predicting with `q` when the posterior is `p`:
/// `max_c p_c - p_j` where `j` is the lowest maximizer of `q`.
pub fn zero_one_inner_excess(p: &ProbVector, q: &ProbVector) -> f64 {
    p[p.argmax()] - p[q.argmax()]
}

/// Column-stochastic matrix with Dirichlet(1, .., 1) columns, redrawn until
/// its condition number is at most `max_condition`.
pub fn random_transition<R: Rng + ?Sized>(classes: usize, max_condition: f64, rng: &mut R) -> Result<ColumnStochasticMatrix> {
    for _ in 0..10_000 {
        let columns = (0..classes)
            .map(|_| sample_gamma_uniform(classes, rng))
            .collect::<Result<Vec<_>>>()?;
        let t = ColumnStochasticMatrix::from_columns(&columns)?;
        if t.as_matrix().condition_one() <= max_condition {
            return Ok(t);
        }
    }
    Err(Error::InvalidArgument(format!(
        "could not draw a {classes}x{classes} transition with condition below {max_condition:e}"
    )))
}

/// Violation counts for each link of the inequality chain.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ChainViolations {
    /// Inner forward-corrected excess risk equals `KL(Tp || Tq)`.
    pub inner_risk_identity: usize,
    /// `KL(Tp || Tq) >= 1/2 ||T(p - q)||_1^2`
    pub pinsker: usize,
    /// `||T(p - q)||_1 >= ||p - q||_1 / ||T^{-1}||_1`
    pub norm_infimum: usize,
    /// `||p - q||_1 >= 0-1 inner excess`
    pub zero_one_l1: usize,
}

impl ChainViolations {
    pub fn total(&self) -> usize {
        self.inner_risk_identity + self.pinsker + self.norm_infimum + self.zero_one_l1
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationReport {
    pub classes: usize,
    pub trials: usize,
    /// Largest `||T^{-1}||_1` among the sampled matrices.
    pub t_inv_one_norm: f64,
    /// `sqrt(2) * t_inv_one_norm`
    pub bound_coeff: f64,
    /// Trials where `theta_lb(0-1 excess) > KL(Tp || Tq) + tol`.
    pub violations: usize,
    pub chain: ChainViolations,
    /// Smallest observed `KL(Tp || Tq) - theta_lb(excess)`.
    pub min_slack: f64,
}

impl CalibrationReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.chain.total() == 0
    }

    pub fn theta_lb(&self, eps: f64) -> f64 {
        CalibrationBound {
            t_inv_one_norm: self.t_inv_one_norm,
        }
        .theta_lb(eps)
    }
}

/// Outcome of checking one `(p, q, T)` triple.
#[derive(Debug, Clone, Copy)]
pub struct TripleCheck {
    pub t_inv_one_norm: f64,
    pub slack: f64,
    pub theta_violated: bool,
    pub chain: ChainViolations,
}

pub fn check_triple(p: &ProbVector, q: &ProbVector, t: &ColumnStochasticMatrix) -> Result<TripleCheck> {
    let bound = CalibrationBound::for_matrix(t)?;
    let (tp, tq) = (t.apply(p), t.apply(q));
    let kl = kl_divergence(&tp, &tq);
    let excess = zero_one_inner_excess(p, q);
    let l1_t = tp.l1_distance(&tq);
    let l1 = p.l1_distance(q);
    let norm = bound.t_inv_one_norm;

    // inner risks of the corrected log loss under posterior p
    let cross: f64 = (0..tp.len()).filter(|&c| tp[c] > 0.0).map(|c| -tp[c] * tq[c].ln()).sum();
    let entropy: f64 = (0..tp.len()).filter(|&c| tp[c] > 0.0).map(|c| -tp[c] * tp[c].ln()).sum();
    let identity_gap = ((cross - entropy) - kl).abs();

    let mut chain = ChainViolations::default();
    if identity_gap > INEQUALITY_TOL * kl.max(1.0) {
        chain.inner_risk_identity += 1;
    }
    if kl < 0.5 * l1_t * l1_t - INEQUALITY_TOL {
        chain.pinsker += 1;
    }
    if 0.5 * l1_t * l1_t < 0.5 * l1 * l1 / (norm * norm) - INEQUALITY_TOL {
        chain.norm_infimum += 1;
    }
    if 0.5 * l1 * l1 / (norm * norm) < 0.5 * excess * excess / (norm * norm) - INEQUALITY_TOL {
        chain.zero_one_l1 += 1;
    }
    let slack = kl - bound.theta_lb(excess);
    Ok(TripleCheck {
        t_inv_one_norm: norm,
        slack,
        theta_violated: slack < -INEQUALITY_TOL,
        chain,
    })
}

/// Monte-Carlo sweep over random interior `p, q` and well-conditioned `T`.
///
/// Trial `k` draws from its own ChaCha stream `k` under `seed`, so the result
/// does not depend on evaluation order.
pub fn verify_inner_risk_inequality(classes: usize, trials: usize, seed: u64) -> Result<CalibrationReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    let mut report = CalibrationReport {
        classes,
        trials,
        t_inv_one_norm: 0.0,
        bound_coeff: 0.0,
        violations: 0,
        chain: ChainViolations::default(),
        min_slack: f64::INFINITY,
    };
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let p = sample_gamma_uniform(classes, &mut rng)?;
        let q = sample_gamma_uniform(classes, &mut rng)?;
        let t = random_transition(classes, RANDOM_T_MAX_CONDITION, &mut rng)?;
        let check = check_triple(&p, &q, &t)?;
        report.t_inv_one_norm = report.t_inv_one_norm.max(check.t_inv_one_norm);
        report.min_slack = report.min_slack.min(check.slack);
        report.violations += usize::from(check.theta_violated);
        report.chain.inner_risk_identity += check.chain.inner_risk_identity;
        report.chain.pinsker += check.chain.pinsker;
        report.chain.norm_infimum += check.chain.norm_infimum;
        report.chain.zero_one_l1 += check.chain.zero_one_l1;
    }
    report.bound_coeff = std::f64::consts::SQRT_2 * report.t_inv_one_norm;
    Ok(report)
}
