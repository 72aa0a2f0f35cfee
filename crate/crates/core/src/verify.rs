//! Numerical verification suite for the theory the library relies on.
//!
//! Each check is a self-contained Monte-Carlo or exhaustive sweep that
//! reports how many instances broke its tolerance. [`run_suite`] runs all of
//! them with trial counts scaled from a single `trials` setting.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::bags::{sample_gamma_uniform, Bag};
use crate::baselines::{kl_loss_from_scores, kl_score_gradient};
use crate::calibration::{
    noise_family_inverse_norm, noise_family_matrix, random_transition, verify_inner_risk_inequality,
    CalibrationReport, RANDOM_T_MAX_CONDITION,
};
use crate::error::{Error, Result};
use crate::losses::{fc_loss_gradient, CompositeFCLoss, BaseLoss};
use crate::reduction::{build_approx, build_ideal, build_uniform, optimal_weights, GroupNoiseModel};
use crate::simplex::{invert, matrix_one_norm, ColumnStochasticMatrix, Matrix, ProbVector};
use crate::train::stream_rng;

pub const CLOSED_FORM_TOL: f64 = 1e-9;
pub const LIPSCHITZ_TOL: f64 = 1e-9;
pub const GRADIENT_STEP: f64 = 1e-6;
pub const GRADIENT_REL_TOL: f64 = 1e-5;
pub const COLUMN_SUM_TOL: f64 = 1e-9;
pub const CONSISTENCY_TOL: f64 = 1e-9;
pub const PRIOR_IDENTITY_TOL: f64 = 1e-10;
/// Standard errors allowed between a Monte-Carlo mean and its exact value.
pub const MC_SIGMAS: f64 = 3.0;

pub const CALIBRATION_CLASSES: [usize; 3] = [2, 3, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    ClosedFormNorm,
    Calibration,
    Lipschitz,
    Gradient,
    Transition,
    Unbiasedness,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub category: Category,
    pub passed: bool,
    pub checked: usize,
    pub violations: usize,
    /// The worst observed value of the checked quantity.
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckOutcome {
    fn new(category: Category, checked: usize, violations: usize, worst: f64, tolerance: f64, detail: String) -> Self {
        CheckOutcome {
            category,
            passed: violations == 0,
            checked,
            violations,
            worst,
            tolerance,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    /// Calibration trials per class count; the other checks scale from it.
    pub trials: usize,
    pub seed: u64,
    /// Relative error injected into the closed-form norm. Test hook; 0 in normal use.
    pub closed_form_perturbation: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            trials: 10_000,
            seed: 0,
            closed_form_perturbation: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub trials: usize,
    pub passed: bool,
    pub checks: Vec<CheckOutcome>,
    pub calibration: Vec<CalibrationReport>,
}

impl VerifyReport {
    pub fn failing(&self) -> Vec<Category> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.category).collect()
    }
}

/// `||T^{-1}||_1` of `(1 - a) I + a N` against its closed form, for the
/// given class counts and `a = 0, 0.1, .., 0.9`.
pub fn closed_form_norm_check(classes: &[usize], perturbation: f64) -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    let mut violations = 0;
    let mut checked = 0;
    for &c in classes {
        for step in 0..10 {
            let a = step as f64 / 10.0;
            let inv = invert(noise_family_matrix(c, a)?.as_matrix())?;
            let expected = noise_family_inverse_norm(c, a) * (1.0 + perturbation);
            let err = (matrix_one_norm(&inv) - expected).abs();
            worst = worst.max(err);
            violations += usize::from(!(err <= CLOSED_FORM_TOL));
            checked += 1;
        }
    }
    Ok(CheckOutcome::new(
        Category::ClosedFormNorm,
        checked,
        violations,
        worst,
        CLOSED_FORM_TOL,
        format!("C in {classes:?}, a in 0..0.9"),
    ))
}

/// Calibration sweeps for each class count, folded into one outcome.
pub fn calibration_check(classes: &[usize], trials: usize, seed: u64) -> Result<(CheckOutcome, Vec<CalibrationReport>)> {
    let reports = classes
        .iter()
        .map(|&c| verify_inner_risk_inequality(c, trials, seed))
        .collect::<Result<Vec<_>>>()?;
    let violations = reports.iter().map(|r| r.violations + r.chain.total()).sum();
    let worst = reports.iter().map(|r| r.min_slack).fold(f64::INFINITY, f64::min);
    let outcome = CheckOutcome::new(
        Category::Calibration,
        trials * classes.len(),
        violations,
        worst,
        crate::calibration::INEQUALITY_TOL,
        "worst is the smallest KL minus lower-bound slack".into(),
    );
    Ok((outcome, reports))
}

fn normal_vec(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            scale * z
        })
        .collect()
}

/// A column-stochastic matrix that is sometimes sparse and sometimes
/// singular: the gradient bound does not need invertibility.
fn rough_transition(classes: usize, rng: &mut ChaCha8Rng) -> Result<ColumnStochasticMatrix> {
    let mut columns = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut col = sample_gamma_uniform(classes, rng)?.into_vec();
        if rng.random_bool(0.3) {
            let zero = rng.random_range(0..classes);
            col[zero] = 0.0;
            let total: f64 = col.iter().sum();
            col.iter_mut().for_each(|v| *v /= total);
        }
        columns.push(ProbVector::new(col)?);
    }
    ColumnStochasticMatrix::from_columns(&columns)
}

/// Largest Euclidean norm of the corrected cross-entropy gradient over random `(T, s, c)`.
pub fn lipschitz_witness(trials: usize, seed: u64) -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    let mut violations = 0;
    let bound = std::f64::consts::SQRT_2 + LIPSCHITZ_TOL;
    for trial in 0..trials {
        let mut rng = stream_rng(seed, trial as u64);
        let classes = rng.random_range(2..=10);
        let t = rough_transition(classes, &mut rng)?;
        let scale = [0.1, 1.0, 5.0, 30.0][trial % 4];
        let s = normal_vec(classes, scale, &mut rng);
        let c = rng.random_range(0..classes);
        let g = fc_loss_gradient(&CompositeFCLoss::log(t), &s, c)?;
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(norm);
        violations += usize::from(!(norm <= bound));
    }
    Ok(CheckOutcome::new(
        Category::Lipschitz,
        trials,
        violations,
        worst,
        bound,
        "worst is the largest gradient 2-norm".into(),
    ))
}

/// `max_i |a_i - b_i| / max(max_i |a_i|, max_i |b_i|)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn central_difference(x: &mut [f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + GRADIENT_STEP;
            let up = f(x);
            x[i] = orig - GRADIENT_STEP;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * GRADIENT_STEP)
        })
        .collect()
}

/// Analytic against central-difference gradients for the corrected log loss
/// and the bag-level KL loss, `trials` random instances of each.
pub fn gradient_check(trials: usize, seed: u64) -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    let mut violations = 0;
    for trial in 0..trials {
        let mut rng = stream_rng(seed, trial as u64);
        let classes = rng.random_range(2..=6);
        let t = random_transition(classes, RANDOM_T_MAX_CONDITION, &mut rng)?;
        let loss = CompositeFCLoss::new(t, BaseLoss::Log);
        let mut s = normal_vec(classes, 2.0, &mut rng);
        let c = rng.random_range(0..classes);
        let analytic = fc_loss_gradient(&loss, &s, c)?;
        let numeric = central_difference(&mut s, |x| loss.value(x, c).map(|v| v.value).unwrap_or(f64::NAN));
        let err = relative_error(&analytic, &numeric);

        let n_bags = rng.random_range(1..=3);
        let gammas = (0..n_bags)
            .map(|_| sample_gamma_uniform(classes, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ProbVector> = gammas.iter().collect();
        let sizes: Vec<usize> = (0..n_bags).map(|_| rng.random_range(1..=5)).collect();
        let mut flat = normal_vec(sizes.iter().sum::<usize>() * classes, 2.0, &mut rng);
        let unflatten = |x: &[f64]| -> Vec<Vec<Vec<f64>>> {
            let mut chunks = x.chunks(classes);
            sizes
                .iter()
                .map(|&m| (0..m).map(|_| chunks.next().expect("sized").to_vec()).collect())
                .collect()
        };
        let analytic_kl: Vec<f64> = kl_score_gradient(&refs, &unflatten(&flat))?
            .into_iter()
            .flatten()
            .flatten()
            .collect();
        let numeric_kl = central_difference(&mut flat, |x| {
            kl_loss_from_scores(&refs, &unflatten(x)).map(|v| v.value).unwrap_or(f64::NAN)
        });
        let err = err.max(relative_error(&analytic_kl, &numeric_kl));
        worst = worst.max(err);
        violations += usize::from(!(err < GRADIENT_REL_TOL));
    }
    Ok(CheckOutcome::new(
        Category::Gradient,
        trials,
        violations,
        worst,
        GRADIENT_REL_TOL,
        "worst is the largest relative error".into(),
    ))
}

/// Worst violations of the structural identities for one noise model.
#[derive(Debug, Clone, Copy, Default)]
pub struct ModelDefects {
    pub column_sum: f64,
    pub consistency: f64,
}

/// Column-sum error of `T` and the largest `|T(c1,c2) sigma(c2) - gamma_{c1}(c2) alpha(c1)|`.
pub fn model_defects(model: &GroupNoiseModel, gammas: &[&ProbVector]) -> ModelDefects {
    let t = model.transition.as_matrix();
    let c = t.dim();
    let column_sum = t.column_sums().iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    let mut consistency: f64 = 0.0;
    for c1 in 0..c {
        for c2 in 0..c {
            let lhs = t[(c1, c2)] * model.sigma_hat[c2];
            let rhs = gammas[c1][c2] * model.alpha_hat[c1];
            consistency = consistency.max((lhs - rhs).abs());
        }
    }
    ModelDefects { column_sum, consistency }
}

/// `max_c |(Gamma^T alpha)(c) - sigma(c)|`
pub fn prior_identity_error(gammas: &[&ProbVector], alpha: &ProbVector, sigma: &ProbVector) -> f64 {
    (0..sigma.len())
        .map(|c2| {
            let mixed: f64 = gammas.iter().zip(alpha.as_slice()).map(|(g, a)| g[c2] * a).sum();
            (mixed - sigma[c2]).abs()
        })
        .fold(0.0, f64::max)
}

/// A random group satisfying the grouping assumptions: bag proportions with
/// a well-conditioned matrix and a clean prior strictly inside their hull.
pub fn random_valid_group(classes: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<ProbVector>, ProbVector)> {
    for _ in 0..10_000 {
        let gammas = (0..classes)
            .map(|_| sample_gamma_uniform(classes, rng))
            .collect::<Result<Vec<_>>>()?;
        let rows: Vec<Vec<f64>> = gammas.iter().map(|g| g.as_slice().to_vec()).collect();
        if Matrix::from_rows(&rows)?.condition_one() > RANDOM_T_MAX_CONDITION {
            continue;
        }
        let alpha = sample_gamma_uniform(classes, rng)?;
        if alpha.as_slice().iter().any(|&a| a < 1e-3) {
            continue;
        }
        let sigma: Vec<f64> = (0..classes)
            .map(|c2| gammas.iter().zip(alpha.as_slice()).map(|(g, a)| g[c2] * a).sum())
            .collect();
        return Ok((gammas, ProbVector::new(sigma)?));
    }
    Err(Error::InvalidArgument("could not draw a valid group".into()))
}

/// All three builders on random valid groups.
pub fn transition_check(trials: usize, seed: u64) -> Result<CheckOutcome> {
    let mut worst_sum: f64 = 0.0;
    let mut worst_consistency: f64 = 0.0;
    let mut worst_prior: f64 = 0.0;
    let mut violations = 0;
    for trial in 0..trials {
        let mut rng = stream_rng(seed, trial as u64);
        let classes = rng.random_range(2..=6);
        let (gammas, sigma) = random_valid_group(classes, &mut rng)?;
        let refs: Vec<&ProbVector> = gammas.iter().collect();
        let bags: Vec<Bag> = gammas
            .iter()
            .map(|g| Bag {
                indices: (0..rng.random_range(1..=50)).collect(),
                gamma_hat: g.clone(),
                gamma_true: Some(g.clone()),
            })
            .collect();
        let bag_refs: Vec<&Bag> = bags.iter().collect();
        let ideal = build_ideal(&gammas, &sigma)?;
        let models = [ideal.clone(), build_uniform(&bag_refs)?, build_approx(&bag_refs, &sigma)?];
        let mut bad = false;
        for m in &models {
            let d = model_defects(m, &refs);
            worst_sum = worst_sum.max(d.column_sum);
            worst_consistency = worst_consistency.max(d.consistency);
            bad |= !(d.column_sum <= COLUMN_SUM_TOL && d.consistency <= CONSISTENCY_TOL);
        }
        let prior = prior_identity_error(&refs, &ideal.alpha_hat, &sigma);
        worst_prior = worst_prior.max(prior);
        bad |= !(prior <= PRIOR_IDENTITY_TOL);
        violations += usize::from(bad);
    }
    Ok(CheckOutcome::new(
        Category::Transition,
        trials,
        violations,
        worst_sum.max(worst_consistency),
        COLUMN_SUM_TOL,
        format!(
            "column sums {worst_sum:e}, consistency {worst_consistency:e}, prior identity {worst_prior:e} (tol {PRIOR_IDENTITY_TOL:e})"
        ),
    ))
}

/// A fixed discrete problem: three feature atoms, three classes, two groups.
pub struct DiscreteProblem {
    /// `P(x | y)`, one row per class.
    pub class_conditionals: [[f64; 3]; 3],
    pub sigma: ProbVector,
    pub groups: Vec<Vec<ProbVector>>,
    pub sizes: Vec<Vec<usize>>,
    /// Score vector the fixed classifier assigns to each atom.
    pub scores: [[f64; 3]; 3],
}

impl DiscreteProblem {
    pub fn standard() -> Self {
        let pv = |v: [f64; 3]| ProbVector::new(v.to_vec()).expect("static simplex vector");
        DiscreteProblem {
            class_conditionals: [[0.7, 0.2, 0.1], [0.2, 0.6, 0.2], [0.1, 0.3, 0.6]],
            sigma: pv([0.3, 0.3, 0.4]),
            groups: vec![
                vec![pv([0.6, 0.3, 0.1]), pv([0.2, 0.6, 0.2]), pv([0.1, 0.2, 0.7])],
                vec![pv([0.5, 0.1, 0.4]), pv([0.1, 0.7, 0.2]), pv([0.3, 0.2, 0.5])],
            ],
            sizes: vec![vec![3, 5, 4], vec![6, 2, 7]],
            scores: [[1.0, -0.5, 0.2], [-0.3, 0.8, 0.1], [0.2, 0.1, -0.9]],
        }
    }

    /// `P(x)` for a bag governed by proportion `gamma`.
    pub fn atom_distribution(&self, gamma: &ProbVector) -> [f64; 3] {
        let mut px = [0.0; 3];
        for (y, row) in self.class_conditionals.iter().enumerate() {
            for (x, p) in row.iter().enumerate() {
                px[x] += gamma[y] * p;
            }
        }
        px
    }

    /// Ideal noise models with harmonic-mean weights.
    pub fn models(&self) -> Result<Vec<GroupNoiseModel>> {
        let w = optimal_weights(&self.sizes)?;
        self.groups
            .iter()
            .zip(&self.sizes)
            .zip(w.as_slice())
            .enumerate()
            .map(|(i, ((g, sizes), &w))| {
                let mut m = build_ideal(g, &self.sigma).map_err(|e| e.in_group(i))?;
                m.weight = w;
                m.bag_sizes = sizes.clone();
                m.bag_refs = (i * 3..i * 3 + 3).collect();
                Ok(m)
            })
            .collect()
    }

    /// `sum_i w_i sum_c alpha_i(c) E_{x ~ P_{gamma_ic}} lambda_i(s(x), c)`
    pub fn exact_risk(&self, models: &[GroupNoiseModel]) -> Result<f64> {
        let mut total = 0.0;
        for (m, gammas) in models.iter().zip(&self.groups) {
            let loss = CompositeFCLoss::log(m.transition.clone());
            for (c, gamma) in gammas.iter().enumerate() {
                let px = self.atom_distribution(gamma);
                let mut inner = 0.0;
                for (x, p) in px.iter().enumerate() {
                    inner += p * loss.value(&self.scores[x], c)?.value;
                }
                total += m.weight * m.alpha_hat[c] * inner;
            }
        }
        Ok(total)
    }

    /// One draw of the weighted empirical risk on freshly sampled bags.
    pub fn sample_risk(&self, models: &[GroupNoiseModel], rng: &mut ChaCha8Rng) -> Result<f64> {
        let conditionals = self
            .class_conditionals
            .iter()
            .map(|row| WeightedIndex::new(row).map_err(|e| Error::InvalidArgument(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let mut total = 0.0;
        for (m, gammas) in models.iter().zip(&self.groups) {
            let loss = CompositeFCLoss::log(m.transition.clone());
            for (c, gamma) in gammas.iter().enumerate() {
                let labels = WeightedIndex::new(gamma.as_slice()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                let n = m.bag_sizes[c];
                let coef = m.weight * m.alpha_hat[c] / n as f64;
                for _ in 0..n {
                    let y = labels.sample(rng);
                    let x = conditionals[y].sample(rng);
                    total += coef * loss.value(&self.scores[x], c)?.value;
                }
            }
        }
        Ok(total)
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub standard_error: f64,
    pub exact: f64,
}

impl MonteCarloEstimate {
    pub fn within(&self, sigmas: f64) -> bool {
        (self.mean - self.exact).abs() <= sigmas * self.standard_error
    }
}

pub fn unbiasedness_estimate(resamples: usize, seed: u64) -> Result<MonteCarloEstimate> {
    if resamples < 2 {
        return Err(Error::InvalidArgument("need at least two resamples".into()));
    }
    let problem = DiscreteProblem::standard();
    let models = problem.models()?;
    let exact = problem.exact_risk(&models)?;
    let mut rng = stream_rng(seed, 0);
    let draws = (0..resamples)
        .map(|_| problem.sample_risk(&models, &mut rng))
        .collect::<Result<Vec<f64>>>()?;
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
    Ok(MonteCarloEstimate {
        mean,
        standard_error: (var / n).sqrt(),
        exact,
    })
}

pub fn unbiasedness_check(resamples: usize, seed: u64) -> Result<CheckOutcome> {
    let est = unbiasedness_estimate(resamples, seed)?;
    let z = (est.mean - est.exact).abs() / est.standard_error;
    Ok(CheckOutcome::new(
        Category::Unbiasedness,
        resamples,
        usize::from(!est.within(MC_SIGMAS)),
        z,
        MC_SIGMAS,
        format!("mean {} vs exact {} (se {})", est.mean, est.exact, est.standard_error),
    ))
}

/// Every check. Calibration and unbiasedness use `trials` draws, the
/// Lipschitz witness ten times that, gradient and transition checks a tenth.
pub fn run_suite(opts: &VerifyOptions) -> Result<VerifyReport> {
    if opts.trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    let tenth = (opts.trials / 10).max(1);
    let (calibration, reports) = calibration_check(&CALIBRATION_CLASSES, opts.trials, opts.seed)?;
    let checks = vec![
        closed_form_norm_check(&CALIBRATION_CLASSES, opts.closed_form_perturbation)?,
        calibration,
        lipschitz_witness(opts.trials * 10, opts.seed)?,
        gradient_check(tenth, opts.seed)?,
        transition_check(tenth, opts.seed)?,
        unbiasedness_check(opts.trials.max(2), opts.seed)?,
    ];
    Ok(VerifyReport {
        seed: opts.seed,
        trials: opts.trials,
        passed: checks.iter().all(|c| c.passed),
        checks,
        calibration: reports,
    })
}
