//! Reduction from label proportions to label noise.
//!
//! The bags are split at random into groups of `C`. Inside a group every
//! point of the `c`-th bag receives the noisy label `c`, and the group gets a
//! noise transition matrix
//!
//! ```text
//! T(c1, c2) = gamma_{c1}(c2) * alpha(c1) / sigma(c2)
//! ```
//!
//! where `gamma_{c1}` is the proportion of the `c1`-th bag, `alpha` the prior
//! of the noisy labels and `sigma` the clean prior. The three builders differ
//! only in where `alpha` and `sigma` come from:
//!
//! * [`build_ideal`] takes the true proportions and clean prior, and solves
//!   `Gamma^T alpha = sigma` exactly. It fails unless `sigma` sits strictly
//!   inside the hull of the proportions.
//! * [`build_uniform`] sets `alpha` to the bag-size shares.
//! * [`build_approx`] projects the pooled prior onto the hull by simplex
//!   constrained least squares.
//!
//! The last two then use `sigma_i = Gamma^T alpha` for the group, which makes
//! every column of `T` sum to one by construction.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::bags::{pooled_prior, Bag};
use crate::error::{Error, Result, Violation};
use crate::simplex::{
    invert, solve_simplex_least_squares, ColumnStochasticMatrix, Matrix, ProbVector,
};

/// Which regime builds the transition matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Ideal,
    Uniform,
    Approx,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ideal" => Ok(Mode::Ideal),
            "uniform" => Ok(Mode::Uniform),
            "approx" => Ok(Mode::Approx),
            other => Err(Error::InvalidArgument(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Ideal => "ideal",
            Mode::Uniform => "uniform",
            Mode::Approx => "approx",
        })
    }
}

/// Assignment of bags to groups: `groups[i][c]` is the bag carrying noisy label `c` in group `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grouping {
    pub groups: Vec<Vec<usize>>,
    pub epoch_created: usize,
}

impl Grouping {
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Bags in the order they appear in the grouping.
    pub fn covered_bags(&self) -> impl Iterator<Item = usize> + '_ {
        self.groups.iter().flatten().copied()
    }
}

/// One group's noise model.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNoiseModel {
    pub transition: ColumnStochasticMatrix,
    /// Prior of the noisy labels within the group.
    pub alpha_hat: ProbVector,
    /// Clean prior the group's transition matrix is consistent with.
    pub sigma_hat: ProbVector,
    pub bag_refs: Vec<usize>,
    pub bag_sizes: Vec<usize>,
    pub weight: f64,
}

impl GroupNoiseModel {
    pub fn with_bags(mut self, bag_refs: Vec<usize>, bag_sizes: Vec<usize>) -> Self {
        self.bag_refs = bag_refs;
        self.bag_sizes = bag_sizes;
        self
    }

    pub fn num_points(&self) -> usize {
        self.bag_sizes.iter().sum()
    }
}

/// Uniformly random partition of (a random subset of) the bags into groups of `classes`.
///
/// When `classes` does not divide `n_bags`, a uniformly random subset of
/// `classes * floor(n_bags / classes)` bags is used.
pub fn random_partition<R: Rng + ?Sized>(n_bags: usize, classes: usize, rng: &mut R) -> Result<Grouping> {
    if classes == 0 || n_bags < classes {
        return Err(Error::InvalidArgument(format!(
            "cannot form groups of {classes} from {n_bags} bags"
        )));
    }
    let mut order: Vec<usize> = (0..n_bags).collect();
    order.shuffle(rng);
    let used = classes * (n_bags / classes);
    let groups = order[..used].chunks(classes).map(<[usize]>::to_vec).collect();
    Ok(Grouping {
        groups,
        epoch_created: 0,
    })
}

/// `T(c1, c2) = gamma_{c1}(c2) alpha(c1) / sigma(c2)`, with a uniform column
/// wherever `sigma(c2)` is zero. Columns are renormalized to absorb rounding.
fn transition_matrix(gammas: &[&ProbVector], alpha: &ProbVector, sigma: &ProbVector) -> Result<ColumnStochasticMatrix> {
    let c = gammas.len();
    let mut t = Matrix::zeros(c);
    for c2 in 0..c {
        if sigma[c2] <= 0.0 {
            for c1 in 0..c {
                t[(c1, c2)] = 1.0 / c as f64;
            }
            continue;
        }
        for c1 in 0..c {
            t[(c1, c2)] = gammas[c1][c2] * alpha[c1] / sigma[c2];
        }
        let total: f64 = (0..c).map(|c1| t[(c1, c2)]).sum();
        if total > 0.0 {
            for c1 in 0..c {
                t[(c1, c2)] /= total;
            }
        }
    }
    ColumnStochasticMatrix::new(t)
}

fn gamma_matrix(gammas: &[&ProbVector]) -> Result<Matrix> {
    let c = gammas.len();
    let rows: Vec<Vec<f64>> = gammas.iter().map(|g| g.as_slice().to_vec()).collect();
    if rows.iter().any(|r| r.len() != c) {
        return Err(Error::DimensionMismatch {
            expected: c,
            got: rows.iter().map(Vec::len).find(|&l| l != c).unwrap_or(0),
        });
    }
    Matrix::from_rows(&rows)
}

/// Builder for the ideal regime: exact proportions and exact clean prior.
pub fn build_ideal(group_gammas: &[ProbVector], sigma: &ProbVector) -> Result<GroupNoiseModel> {
    let gammas: Vec<&ProbVector> = group_gammas.iter().collect();
    let gamma_t = gamma_matrix(&gammas)?.transpose();
    if sigma.len() != gammas.len() {
        return Err(Error::DimensionMismatch {
            expected: gammas.len(),
            got: sigma.len(),
        });
    }
    let singular = || Error::AssumptionViolation {
        group: 0,
        kind: Violation::Singular,
    };
    let inverse = match invert(&gamma_t) {
        Ok(inv) => inv,
        Err(Error::SingularMatrix { .. }) => return Err(singular()),
        Err(e) => return Err(e),
    };
    let mut alpha = inverse.mul_vec(sigma.as_slice());
    // one step of iterative refinement
    let residual: Vec<f64> = gamma_t
        .mul_vec(&alpha)
        .iter()
        .zip(sigma.as_slice())
        .map(|(a, s)| s - a)
        .collect();
    for (a, d) in alpha.iter_mut().zip(inverse.mul_vec(&residual)) {
        *a += d;
    }
    let outside = || Error::AssumptionViolation {
        group: 0,
        kind: Violation::PriorOutsideHull,
    };
    if alpha.iter().any(|&a| !(a > 0.0)) {
        return Err(outside());
    }
    let alpha = ProbVector::new(alpha).map_err(|_| outside())?;
    let transition = transition_matrix(&gammas, &alpha, sigma)?;
    Ok(GroupNoiseModel {
        transition,
        alpha_hat: alpha,
        sigma_hat: sigma.clone(),
        bag_refs: Vec::new(),
        bag_sizes: Vec::new(),
        weight: 1.0,
    })
}

fn check_group(group_bags: &[&Bag]) -> Result<()> {
    if group_bags.is_empty() {
        return Err(Error::InvalidArgument("empty group".into()));
    }
    if let Some(k) = group_bags.iter().position(|b| b.is_empty()) {
        return Err(Error::InvalidArgument(format!("bag {k} of the group is empty")));
    }
    Ok(())
}

fn from_alpha(group_bags: &[&Bag], alpha: ProbVector) -> Result<GroupNoiseModel> {
    let gammas: Vec<&ProbVector> = group_bags.iter().map(|b| &b.gamma_hat).collect();
    let gamma_t = gamma_matrix(&gammas)?.transpose();
    let sigma = ProbVector::new(gamma_t.mul_vec(alpha.as_slice()))?;
    let transition = transition_matrix(&gammas, &alpha, &sigma)?;
    Ok(GroupNoiseModel {
        transition,
        alpha_hat: alpha,
        sigma_hat: sigma,
        bag_refs: Vec::new(),
        bag_sizes: group_bags.iter().map(|b| b.len()).collect(),
        weight: 1.0,
    })
}

/// Builder with the noisy prior set to the bag-size shares.
pub fn build_uniform(group_bags: &[&Bag]) -> Result<GroupNoiseModel> {
    check_group(group_bags)?;
    let sizes: Vec<usize> = group_bags.iter().map(|b| b.len()).collect();
    from_alpha(group_bags, ProbVector::from_counts(&sizes)?)
}

/// Builder with the noisy prior fitted to the pooled prior by least squares on the simplex.
pub fn build_approx(group_bags: &[&Bag], sigma_global: &ProbVector) -> Result<GroupNoiseModel> {
    check_group(group_bags)?;
    let gammas: Vec<&ProbVector> = group_bags.iter().map(|b| &b.gamma_hat).collect();
    let alpha = solve_simplex_least_squares(&gamma_matrix(&gammas)?, sigma_global)?;
    from_alpha(group_bags, alpha)
}

impl Error {
    /// Attaches a group index to an assumption violation.
    pub fn in_group(self, group: usize) -> Error {
        match self {
            Error::AssumptionViolation { kind, .. } => Error::AssumptionViolation { group, kind },
            other => other,
        }
    }
}

/// Builds one noise model per group.
///
/// `clean_prior` is required in [`Mode::Ideal`], where bags must also carry
/// their governing proportions. In [`Mode::Approx`] the pooled prior of all
/// bags is the least-squares target. Weights are left at 1.
pub fn build_group_models(
    bags: &[Bag],
    grouping: &Grouping,
    mode: Mode,
    clean_prior: Option<&ProbVector>,
) -> Result<Vec<GroupNoiseModel>> {
    if let Some(bad) = grouping.covered_bags().find(|&k| k >= bags.len()) {
        return Err(Error::Bookkeeping(format!("grouping references bag {bad} of {}", bags.len())));
    }
    let pooled = match mode {
        Mode::Approx => Some(pooled_prior(bags)?),
        _ => None,
    };
    let mut models = Vec::with_capacity(grouping.num_groups());
    for (i, refs) in grouping.groups.iter().enumerate() {
        let group_bags: Vec<&Bag> = refs.iter().map(|&k| &bags[k]).collect();
        let model = match mode {
            Mode::Ideal => {
                let sigma = clean_prior.ok_or_else(|| {
                    Error::InvalidArgument("ideal mode needs the clean prior".into())
                })?;
                let gammas = group_bags
                    .iter()
                    .map(|b| {
                        b.gamma_true.clone().ok_or_else(|| {
                            Error::InvalidArgument("ideal mode needs gamma_true on every bag".into())
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                build_ideal(&gammas, sigma).map_err(|e| e.in_group(i))?
            }
            Mode::Uniform => build_uniform(&group_bags)?,
            Mode::Approx => build_approx(&group_bags, pooled.as_ref().expect("pooled prior"))?,
        };
        models.push(model.with_bags(refs.clone(), group_bags.iter().map(|b| b.len()).collect()));
    }
    Ok(models)
}

/// Group weights proportional to the harmonic mean of each group's bag sizes.
pub fn optimal_weights(bag_sizes_per_group: &[Vec<usize>]) -> Result<ProbVector> {
    if bag_sizes_per_group.is_empty() {
        return Err(Error::InvalidArgument("no groups".into()));
    }
    let harmonic: Vec<f64> = bag_sizes_per_group
        .iter()
        .map(|sizes| {
            if sizes.is_empty() || sizes.contains(&0) {
                return Err(Error::InvalidArgument("bag sizes must be positive".into()));
            }
            let inv: f64 = sizes.iter().map(|&n| 1.0 / n as f64).sum();
            Ok(sizes.len() as f64 / inv)
        })
        .collect::<Result<_>>()?;
    let total: f64 = harmonic.iter().sum();
    ProbVector::new(harmonic.into_iter().map(|h| h / total).collect())
}

#[derive(Serialize)]
struct GroupDump<'a> {
    group: usize,
    #[serde(rename = "T")]
    transition: Vec<Vec<f64>>,
    alpha: &'a [f64],
    sigma_i: &'a [f64],
    bags: &'a [usize],
}

/// Debug dump, one JSON object per group.
pub fn write_group_models_jsonl<W: Write>(models: &[GroupNoiseModel], mut writer: W) -> Result<()> {
    for (group, m) in models.iter().enumerate() {
        let dump = GroupDump {
            group,
            transition: m.transition.as_matrix().to_rows(),
            alpha: m.alpha_hat.as_slice(),
            sigma_i: m.sigma_hat.as_slice(),
            bags: &m.bag_refs,
        };
        serde_json::to_writer(&mut writer, &dump).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn bag(size: usize, gamma: &[f64]) -> Bag {
        Bag {
            indices: (0..size).collect(),
            gamma_hat: pv(gamma),
            gamma_true: None,
        }
    }

    fn assert_matrix(t: &ColumnStochasticMatrix, expected: &[[f64; 2]; 2], tol: f64) {
        for i in 0..2 {
            for j in 0..2 {
                assert!((t[(i, j)] - expected[i][j]).abs() < tol, "T({i},{j}) = {}", t[(i, j)]);
            }
        }
    }

    // T = [[8/11, 2/9], [3/11, 7/9]] from solving 0.8a + 0.3b = 0.55, 0.2a + 0.7b = 0.45 by hand
    const WORKED_T: [[f64; 2]; 2] = [[8.0 / 11.0, 2.0 / 9.0], [3.0 / 11.0, 7.0 / 9.0]];

    #[test]
    fn partition_covers_every_bag_once() {
        let g = random_partition(6, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(g.num_groups(), 2);
        let mut seen: Vec<usize> = g.covered_bags().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn partition_drops_a_random_remainder() {
        let mut omitted = [0usize; 7];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..700 {
            let g = random_partition(7, 3, &mut rng).unwrap();
            assert_eq!(g.num_groups(), 2);
            let seen: Vec<usize> = g.covered_bags().collect();
            let missing = (0..7).find(|k| !seen.contains(k)).unwrap();
            omitted[missing] += 1;
        }
        // each bag omitted about 100 times
        assert!(omitted.iter().all(|&n| n > 50), "{omitted:?}");
    }

    #[test]
    fn partition_needs_enough_bags() {
        assert!(random_partition(2, 3, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn ideal_with_pure_bags_is_identity() {
        let gammas = vec![pv(&[1.0, 0.0, 0.0]), pv(&[0.0, 1.0, 0.0]), pv(&[0.0, 0.0, 1.0])];
        let sigma = pv(&[0.2, 0.3, 0.5]);
        let m = build_ideal(&gammas, &sigma).unwrap();
        assert_eq!(m.alpha_hat, sigma);
        assert!(m.transition.as_matrix().max_abs_diff(&Matrix::identity(3)) < 1e-15);
    }

    #[test]
    fn ideal_worked_example() {
        let gammas = vec![pv(&[0.8, 0.2]), pv(&[0.3, 0.7])];
        let m = build_ideal(&gammas, &pv(&[0.55, 0.45])).unwrap();
        assert!((m.alpha_hat[0] - 0.5).abs() < 1e-12);
        assert_matrix(&m.transition, &WORKED_T, 1e-12);
    }

    #[test]
    fn ideal_rejects_singular_and_outside() {
        let same = vec![pv(&[0.6, 0.4]), pv(&[0.6, 0.4])];
        assert!(matches!(
            build_ideal(&same, &pv(&[0.6, 0.4])),
            Err(Error::AssumptionViolation { kind: Violation::Singular, .. })
        ));
        let gammas = vec![pv(&[0.8, 0.2]), pv(&[0.6, 0.4])];
        assert!(matches!(
            build_ideal(&gammas, &pv(&[0.3, 0.7])),
            Err(Error::AssumptionViolation { kind: Violation::PriorOutsideHull, .. })
        ));
    }

    #[test]
    fn uniform_examples() {
        let (a, b) = (bag(30, &[0.5, 0.5]), bag(70, &[0.2, 0.8]));
        let m = build_uniform(&[&a, &b]).unwrap();
        assert!((m.alpha_hat[0] - 0.3).abs() < 1e-15);

        let (a, b) = (bag(10, &[1.0, 0.0]), bag(10, &[0.0, 1.0]));
        let m = build_uniform(&[&a, &b]).unwrap();
        assert_eq!(m.alpha_hat.as_slice(), &[0.5, 0.5]);
        assert_eq!(m.sigma_hat.as_slice(), &[0.5, 0.5]);
        assert!(m.transition.as_matrix().max_abs_diff(&Matrix::identity(2)) < 1e-15);

        let (a, b) = (bag(10, &[0.8, 0.2]), bag(10, &[0.3, 0.7]));
        let m = build_uniform(&[&a, &b]).unwrap();
        assert!((m.sigma_hat[0] - 0.55).abs() < 1e-15);
        assert_matrix(&m.transition, &WORKED_T, 1e-12);
    }

    #[test]
    fn uniform_handles_absent_class() {
        // class 2 appears in no bag of the group
        let (a, b, c) = (bag(5, &[1.0, 0.0, 0.0]), bag(5, &[0.5, 0.5, 0.0]), bag(5, &[0.0, 1.0, 0.0]));
        let m = build_uniform(&[&a, &b, &c]).unwrap();
        for i in 0..3 {
            assert!((m.transition[(i, 2)] - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_rejects_empty_bag() {
        let (a, b) = (bag(0, &[0.5, 0.5]), bag(3, &[0.5, 0.5]));
        assert!(build_uniform(&[&a, &b]).is_err());
    }

    #[test]
    fn approx_exact_fit_matches_ideal() {
        let (a, b) = (bag(7, &[0.8, 0.2]), bag(13, &[0.3, 0.7]));
        let m = build_approx(&[&a, &b], &pv(&[0.55, 0.45])).unwrap();
        assert!((m.alpha_hat[0] - 0.5).abs() < 1e-6);
        assert_matrix(&m.transition, &WORKED_T, 1e-6);
    }

    #[test]
    fn approx_pure_and_degenerate() {
        let (a, b) = (bag(4, &[1.0, 0.0]), bag(4, &[0.0, 1.0]));
        let m = build_approx(&[&a, &b], &pv(&[0.5, 0.5])).unwrap();
        assert!((m.alpha_hat[0] - 0.5).abs() < 1e-9);
        assert!(m.transition.as_matrix().max_abs_diff(&Matrix::identity(2)) < 1e-9);

        let (a, b) = (bag(4, &[0.5, 0.5]), bag(4, &[0.5, 0.5]));
        let m = build_approx(&[&a, &b], &pv(&[0.5, 0.5])).unwrap();
        let fit = (m.sigma_hat[0] - 0.5).powi(2) + (m.sigma_hat[1] - 0.5).powi(2);
        assert!(fit < 1e-16);
    }

    #[test]
    fn harmonic_weights() {
        let w = optimal_weights(&[vec![4, 4], vec![2, 2]]).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);
        let w = optimal_weights(&[vec![3, 5], vec![3, 5], vec![3, 5]]).unwrap();
        assert!(w.as_slice().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(optimal_weights(&[vec![9, 1]]).unwrap().as_slice(), &[1.0]);
    }

    #[test]
    fn group_models_carry_bookkeeping() {
        let bags = vec![bag(3, &[1.0, 0.0]), bag(5, &[0.0, 1.0]), bag(2, &[0.5, 0.5])];
        let grouping = Grouping {
            groups: vec![vec![2, 0]],
            epoch_created: 0,
        };
        let models = build_group_models(&bags, &grouping, Mode::Uniform, None).unwrap();
        assert_eq!(models[0].bag_refs, vec![2, 0]);
        assert_eq!(models[0].bag_sizes, vec![2, 3]);
        assert!(matches!(
            build_group_models(&bags, &grouping, Mode::Ideal, None),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn dump_format() {
        let (a, b) = (bag(2, &[1.0, 0.0]), bag(2, &[0.0, 1.0]));
        let m = build_uniform(&[&a, &b]).unwrap().with_bags(vec![4, 1], vec![2, 2]);
        let mut buf = Vec::new();
        write_group_models_jsonl(&[m], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "{\"group\":0,\"T\":[[1.0,0.0],[0.0,1.0]],\"alpha\":[0.5,0.5],\"sigma_i\":[0.5,0.5],\"bags\":[4,1]}\n"
        );
    }
}
