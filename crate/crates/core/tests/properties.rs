use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use llpfc::bags::{gaussian_mixture, generate_bags, pooled_prior, sample_gamma_uniform, Bag, Dataset};
use llpfc::baselines::kl_loss_from_scores;
use llpfc::calibration::{random_transition, CalibrationBound};
use llpfc::losses::{fc_loss_gradient, CompositeFCLoss};
use llpfc::reduction::{build_approx, build_ideal, build_uniform};
use llpfc::simplex::{invert, matrix_one_norm, ColumnStochasticMatrix, Matrix, ProbVector};
use llpfc::verify::{model_defects, random_valid_group};

fn simplex_point(classes: usize) -> impl Strategy<Value = ProbVector> {
    prop::collection::vec(0.01f64..1.0, classes).prop_map(|v| {
        let total: f64 = v.iter().sum();
        ProbVector::new(v.into_iter().map(|x| x / total).collect()).unwrap()
    })
}

fn transition(classes: usize) -> impl Strategy<Value = ColumnStochasticMatrix> {
    any::<u64>().prop_map(move |seed| random_transition(classes, 1e6, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn inverse_residual_is_small(t in transition(4)) {
        let m = t.as_matrix();
        let inv = invert(m).unwrap();
        let residual = m.matmul(&inv).max_abs_diff(&Matrix::identity(4));
        prop_assert!(residual <= 1e-9 * m.condition_one().max(1.0), "residual {residual}");
    }

    #[test]
    fn norm_infimum_lemma(t in transition(3), v in prop::collection::vec(-1.0f64..1.0, 3)) {
        let norm = matrix_one_norm(&invert(t.as_matrix()).unwrap());
        let tv = t.as_matrix().mul_vec(&v);
        let lhs: f64 = tv.iter().map(|x| x.abs()).sum();
        let rhs: f64 = v.iter().map(|x| x.abs()).sum::<f64>() / norm;
        prop_assert!(lhs >= rhs - 1e-12);
    }

    #[test]
    fn fc_gradient_bounded_by_sqrt_two(t in transition(5), s in prop::collection::vec(-20.0f64..20.0, 5), c in 0usize..5) {
        let g = fc_loss_gradient(&CompositeFCLoss::log(t), &s, c).unwrap();
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(norm <= std::f64::consts::SQRT_2 + 1e-9);
    }

    #[test]
    fn fc_gradient_sums_to_zero(t in transition(4), s in prop::collection::vec(-5.0f64..5.0, 4), c in 0usize..4) {
        // softmax scores are shift invariant
        let g = fc_loss_gradient(&CompositeFCLoss::log(t), &s, c).unwrap();
        prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn builders_emit_consistent_models(seed in any::<u64>(), sizes in prop::collection::vec(1usize..40, 4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (gammas, sigma) = random_valid_group(4, &mut rng).unwrap();
        let refs: Vec<&ProbVector> = gammas.iter().collect();
        let bags: Vec<Bag> = gammas.iter().zip(&sizes).map(|(g, &n)| Bag {
            indices: (0..n).collect(),
            gamma_hat: g.clone(),
            gamma_true: None,
        }).collect();
        let bag_refs: Vec<&Bag> = bags.iter().collect();
        for model in [build_ideal(&gammas, &sigma).unwrap(), build_uniform(&bag_refs).unwrap(), build_approx(&bag_refs, &sigma).unwrap()] {
            let d = model_defects(&model, &refs);
            prop_assert!(d.column_sum <= 1e-9 && d.consistency <= 1e-9, "{d:?}");
        }
    }

    #[test]
    fn kl_bag_loss_is_at_least_the_entropy_term(gamma in simplex_point(3), scores in prop::collection::vec(prop::collection::vec(-4.0f64..4.0, 3), 1..6)) {
        let loss = kl_loss_from_scores(&[&gamma], &[scores]).unwrap().value;
        let entropy: f64 = gamma.as_slice().iter().map(|g| -g * g.ln()).sum::<f64>() / 3.0;
        prop_assert!(loss >= entropy - 1e-12);
    }
}

/// The inner risk of the corrected log loss under posterior `p` is minimized at `q = p`.
#[test]
fn corrected_inner_risk_is_minimized_at_the_posterior() {
    let grid = 1000;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_transition(2, 1e3, &mut rng).unwrap();
        let p = sample_gamma_uniform(2, &mut rng).unwrap();
        let tp = t.apply(&p);
        let risk = |q0: f64| -> f64 {
            let tq = t.apply(&ProbVector::new(vec![q0, 1.0 - q0]).unwrap());
            -(tp[0] * tq[0].ln() + tp[1] * tq[1].ln())
        };
        let (best, _) = (1..grid)
            .map(|i| i as f64 / grid as f64)
            .map(|q| (q, risk(q)))
            .fold((0.0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        assert!((best - p[0]).abs() <= 1.0 / grid as f64, "seed {seed}: argmin {best}, posterior {}", p[0]);
    }
}

#[test]
fn calibration_bound_for_identity() {
    let b = CalibrationBound::for_matrix(&ColumnStochasticMatrix::identity(3)).unwrap();
    assert_eq!(b.t_inv_one_norm, 1.0);
    assert!((b.theta_lb(0.2) - 0.02).abs() < 1e-15);
}

/// Observed bag proportions are unbiased for the governing ones when no class runs out.
#[test]
fn observed_proportions_are_unbiased() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let classes = 3;
    let bag_size = 20;
    let n_bags = 3000;
    let ds = gaussian_mixture(classes * bag_size * n_bags, classes, 1.0, 0.5, &mut rng).unwrap();
    let bags = generate_bags(&ds, bag_size, n_bags, &mut rng).unwrap();
    for c in 0..classes {
        let diffs: Vec<f64> = bags
            .iter()
            .map(|b| b.gamma_hat[c] - b.gamma_true.as_ref().unwrap()[c])
            .collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() <= 3.0 * sd / n.sqrt(), "class {c}: mean {mean}, se {}", sd / n.sqrt());
    }
}

#[test]
fn bags_are_disjoint_and_pooled_prior_is_size_weighted() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ds = gaussian_mixture(600, 3, 1.0, 0.5, &mut rng).unwrap();
    let bags = generate_bags(&ds, 25, 20, &mut rng).unwrap();
    let mut seen = vec![false; ds.len()];
    for b in &bags {
        for &i in &b.indices {
            assert!(!seen[i], "row {i} reused");
            seen[i] = true;
        }
    }
    let prior = pooled_prior(&bags).unwrap();
    let used: Vec<usize> = bags.iter().flat_map(|b| b.indices.clone()).collect();
    let sub: Dataset = ds.subset(&used).unwrap();
    let counts = sub.class_counts();
    for c in 0..3 {
        assert!((prior[c] - counts[c] as f64 / used.len() as f64).abs() < 1e-12);
    }
}
