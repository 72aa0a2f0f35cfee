//! Proportion-matching baseline: fit the mean predicted distribution of each
//! bag to its label proportion under cross-entropy, on minibatches of bags.
//!
//! For a minibatch of `B` bags the objective is
//! `-(1/(C B)) sum_k sum_c gamma_k(c) log pbar_k(c)` where `pbar_k` is the
//! average softmax output over the points of bag `k`.

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::bags::{Bag, Dataset, LLPInstance};
use crate::error::{Error, Result};
use crate::losses::{softmax, LossValue, SATURATION_CAP};
use crate::model::{evaluate, evaluate_rows, Classifier, ClassifierKind};
use crate::simplex::ProbVector;
use crate::train::{stream_rng, EpochMetrics, MetricsLog, Momentum, OptimizerConfig, STREAM_SHUFFLE};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KLBaselineConfig {
    pub epochs: usize,
    pub bags_per_minibatch: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub track_train_accuracy: bool,
}

impl Default for KLBaselineConfig {
    fn default() -> Self {
        KLBaselineConfig {
            epochs: 100,
            bags_per_minibatch: 2,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            hidden: Vec::new(),
            track_train_accuracy: false,
        }
    }
}

impl KLBaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.bags_per_minibatch == 0 {
            return Err(Error::InvalidArgument("bags_per_minibatch must be at least 1".into()));
        }
        self.optimizer.validate()
    }
}

/// Objective value from per-bag mean predictions. Terms whose mean
/// prediction vanishes where the proportion does not are capped.
fn objective_from_means(gammas: &[&ProbVector], means: &[Vec<f64>]) -> LossValue {
    let classes = gammas[0].len() as f64;
    let norm = classes * gammas.len() as f64;
    let mut value = 0.0;
    let mut saturated = false;
    for (gamma, mean) in gammas.iter().zip(means) {
        for (&g, &m) in gamma.as_slice().iter().zip(mean) {
            if g == 0.0 {
                continue;
            }
            let term = -m.ln();
            if term.is_finite() && term <= SATURATION_CAP {
                value += g * term;
            } else {
                value += g * SATURATION_CAP;
                saturated = true;
            }
        }
    }
    LossValue {
        value: value / norm,
        saturated,
    }
}

fn check_scores(gammas: &[&ProbVector], scores: &[Vec<Vec<f64>>]) -> Result<()> {
    if gammas.is_empty() || gammas.len() != scores.len() {
        return Err(Error::DimensionMismatch {
            expected: gammas.len().max(1),
            got: scores.len(),
        });
    }
    let classes = gammas[0].len();
    for (gamma, bag) in gammas.iter().zip(scores) {
        if bag.is_empty() {
            return Err(Error::InvalidArgument("empty bag".into()));
        }
        if gamma.len() != classes {
            return Err(Error::DimensionMismatch {
                expected: classes,
                got: gamma.len(),
            });
        }
        if let Some(s) = bag.iter().find(|s| s.len() != classes) {
            return Err(Error::DimensionMismatch {
                expected: classes,
                got: s.len(),
            });
        }
    }
    Ok(())
}

fn bag_mean(scores: &[Vec<f64>]) -> Vec<f64> {
    let mut mean = vec![0.0; scores[0].len()];
    for s in scores {
        for (m, p) in mean.iter_mut().zip(softmax(s)) {
            *m += p;
        }
    }
    let m = scores.len() as f64;
    mean.iter_mut().for_each(|v| *v /= m);
    mean
}

/// Objective on explicit score vectors, `scores[k][j]` being point `j` of bag `k`.
pub fn kl_loss_from_scores(gammas: &[&ProbVector], scores: &[Vec<Vec<f64>>]) -> Result<LossValue> {
    check_scores(gammas, scores)?;
    let means: Vec<Vec<f64>> = scores.iter().map(|b| bag_mean(b)).collect();
    Ok(objective_from_means(gammas, &means))
}

/// `dL/dpbar_k(c) = -gamma_k(c) / (C B pbar_k(c))`, zero for capped terms.
fn mean_gradient(gamma: &ProbVector, mean: &[f64], norm: f64) -> Vec<f64> {
    gamma
        .as_slice()
        .iter()
        .zip(mean)
        .map(|(&g, &m)| {
            let capped = !(-m.ln() <= SATURATION_CAP);
            if g == 0.0 || capped {
                0.0
            } else {
                -g / (norm * m)
            }
        })
        .collect()
}

/// `dL/ds_{j,i} = (1/m) p_{j,i} (g_i - sum_c g_c p_{j,c})` for upstream mean gradient `g`.
fn score_gradient(s: &[f64], g: &[f64], m: f64) -> Vec<f64> {
    let p = softmax(s);
    let inner: f64 = g.iter().zip(&p).map(|(a, b)| a * b).sum();
    p.iter().zip(g).map(|(pi, gi)| pi * (gi - inner) / m).collect()
}

/// Gradient of [`kl_loss_from_scores`] with respect to every score vector.
pub fn kl_score_gradient(gammas: &[&ProbVector], scores: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<Vec<f64>>>> {
    check_scores(gammas, scores)?;
    let norm = (gammas[0].len() * gammas.len()) as f64;
    Ok(gammas
        .iter()
        .zip(scores)
        .map(|(gamma, bag)| {
            let g = mean_gradient(gamma, &bag_mean(bag), norm);
            let m = bag.len() as f64;
            bag.iter().map(|s| score_gradient(s, &g, m)).collect()
        })
        .collect())
}

fn check_bags(bags: &[&Bag], ds: &Dataset) -> Result<()> {
    if bags.is_empty() {
        return Err(Error::InvalidArgument("no bags".into()));
    }
    if let Some(k) = bags.iter().position(|b| b.is_empty()) {
        return Err(Error::InvalidArgument(format!("bag {k} is empty")));
    }
    if let Some(&bad) = bags.iter().flat_map(|b| &b.indices).find(|&&i| i >= ds.len()) {
        return Err(Error::InvalidArgument(format!("row {bad} out of range")));
    }
    Ok(())
}

/// Mean softmax output over each bag, accumulated one point at a time.
fn streamed_means(clf: &Classifier, bags: &[&Bag], ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    bags.iter()
        .map(|bag| {
            let mut mean = vec![0.0; clf.classes()];
            for &row in &bag.indices {
                for (m, p) in mean.iter_mut().zip(softmax(&clf.scores(ds.features(row))?)) {
                    *m += p;
                }
            }
            let n = bag.len() as f64;
            mean.iter_mut().for_each(|v| *v /= n);
            Ok(mean)
        })
        .collect()
}

/// The minibatch objective for `clf` on `bags`.
pub fn kl_bag_loss(clf: &Classifier, bags: &[&Bag], ds: &Dataset) -> Result<LossValue> {
    check_bags(bags, ds)?;
    let gammas: Vec<&ProbVector> = bags.iter().map(|b| &b.gamma_hat).collect();
    Ok(objective_from_means(&gammas, &streamed_means(clf, bags, ds)?))
}

/// Parameter gradient of [`kl_bag_loss`], in two streaming passes per bag:
/// the first forms the mean prediction, the second backpropagates.
pub fn kl_bag_loss_gradient(clf: &Classifier, bags: &[&Bag], ds: &Dataset) -> Result<(Vec<f64>, LossValue)> {
    check_bags(bags, ds)?;
    let gammas: Vec<&ProbVector> = bags.iter().map(|b| &b.gamma_hat).collect();
    let means = streamed_means(clf, bags, ds)?;
    let loss = objective_from_means(&gammas, &means);
    let norm = (clf.classes() * bags.len()) as f64;
    let mut grad = vec![0.0; clf.num_params()];
    for ((bag, gamma), mean) in bags.iter().zip(&gammas).zip(&means) {
        let g = mean_gradient(gamma, mean, norm);
        let m = bag.len() as f64;
        for &row in &bag.indices {
            let trace = clf.forward(ds.features(row))?;
            let ds_j = score_gradient(trace.scores(), &g, m);
            clf.backward(&trace, &ds_j, &mut grad);
        }
    }
    Ok((grad, loss))
}

/// Trains the baseline on minibatches of `bags_per_minibatch` bags.
///
/// The reported objective is the full-pass average over all bags.
pub fn train_kl(
    inst: &LLPInstance,
    cfg: &KLBaselineConfig,
    test: Option<&Dataset>,
) -> Result<(Classifier, MetricsLog)> {
    cfg.validate()?;
    let n_bags = inst.bags.len();
    if cfg.bags_per_minibatch > n_bags {
        return Err(Error::InvalidArgument(format!(
            "bags_per_minibatch {} exceeds the {n_bags} bags available",
            cfg.bags_per_minibatch
        )));
    }
    let ds = &inst.dataset;
    let kind = ClassifierKind::from_hidden(ds.dim(), &cfg.hidden, ds.num_classes());
    let mut clf = Classifier::init(kind, cfg.seed)?;
    let mut momentum = Momentum::new(clf.num_params());
    let mut rng = stream_rng(cfg.seed, STREAM_SHUFFLE);
    let all: Vec<&Bag> = inst.bags.iter().collect();
    let rows: Vec<usize> = inst.bags.iter().flat_map(|b| b.indices.iter().copied()).collect();
    let mut log = MetricsLog::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.optimizer.learning_rate_at(epoch, cfg.epochs);
        let mut order: Vec<usize> = (0..n_bags).collect();
        order.shuffle(&mut rng);
        let mut saturations = 0;
        for chunk in order.chunks(cfg.bags_per_minibatch) {
            let batch: Vec<&Bag> = chunk.iter().map(|&k| &inst.bags[k]).collect();
            let (grad, loss) = kl_bag_loss_gradient(&clf, &batch, ds)?;
            saturations += loss.saturated as usize;
            momentum.step(clf.params_mut(), &grad, lr, &cfg.optimizer);
        }
        let objective = kl_bag_loss(&clf, &all, ds)?.value;
        if !objective.is_finite() {
            return Err(Error::NonFinite { index: epoch });
        }
        let train_acc = if cfg.track_train_accuracy {
            Some(evaluate_rows(&clf, ds, &rows)?)
        } else {
            None
        };
        log.epochs.push(EpochMetrics {
            epoch,
            objective,
            train_acc,
            test_acc: test.map(|t| evaluate(&clf, t)).transpose()?,
            regrouped: false,
            saturations,
        });
    }
    Ok((clf, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn loss_examples() {
        let half = pv(&[0.5, 0.5]);
        let flat = vec![vec![vec![0.0, 0.0]; 3]];
        let v = kl_loss_from_scores(&[&half], &flat).unwrap().value;
        assert!((v - 0.346_573_590_279_972_6).abs() < 1e-15);
        let onehot = pv(&[1.0, 0.0]);
        assert!((kl_loss_from_scores(&[&onehot], &flat).unwrap().value - 0.5 * 2f64.ln()).abs() < 1e-15);
        // a confident prediction of class 0 for (1, 0)
        let sure = vec![vec![vec![800.0, 0.0]]];
        let v = kl_loss_from_scores(&[&onehot], &sure).unwrap();
        assert_eq!(v.value, 0.0);
        assert!(!v.saturated);
        let wrong = vec![vec![vec![0.0, 800.0]]];
        assert!(kl_loss_from_scores(&[&onehot], &wrong).unwrap().saturated);
    }

    #[test]
    fn empty_bag_is_rejected() {
        let half = pv(&[0.5, 0.5]);
        assert!(kl_loss_from_scores(&[&half], &[vec![]]).is_err());
        assert!(kl_loss_from_scores(&[], &[]).is_err());
    }

    #[test]
    fn score_gradient_matches_differences() {
        let g1 = pv(&[0.2, 0.5, 0.3]);
        let g2 = pv(&[0.7, 0.0, 0.3]);
        let mut scores = vec![
            vec![vec![0.3, -1.2, 0.8], vec![1.5, 0.1, -0.4]],
            vec![vec![-0.6, 0.9, 0.2], vec![0.0, 0.0, 1.0], vec![2.0, -2.0, 0.5]],
        ];
        let gammas = [&g1, &g2];
        let grad = kl_score_gradient(&gammas, &scores).unwrap();
        let h = 1e-6;
        for k in 0..scores.len() {
            for j in 0..scores[k].len() {
                for i in 0..3 {
                    let orig = scores[k][j][i];
                    scores[k][j][i] = orig + h;
                    let up = kl_loss_from_scores(&gammas, &scores).unwrap().value;
                    scores[k][j][i] = orig - h;
                    let down = kl_loss_from_scores(&gammas, &scores).unwrap().value;
                    scores[k][j][i] = orig;
                    let fd = (up - down) / (2.0 * h);
                    assert!((fd - grad[k][j][i]).abs() < 1e-9, "{fd} vs {}", grad[k][j][i]);
                }
            }
        }
    }

    #[test]
    fn minibatch_larger_than_bag_count_is_rejected() {
        let ds = Dataset::new(vec![vec![0.0], vec![1.0]], vec![0, 1], 2).unwrap();
        let bags = vec![Bag::from_labels(&ds, vec![0, 1], None).unwrap()];
        let inst = LLPInstance::new(ds, bags, 0).unwrap();
        let cfg = KLBaselineConfig {
            bags_per_minibatch: 2,
            epochs: 1,
            ..KLBaselineConfig::default()
        };
        assert!(train_kl(&inst, &cfg, None).is_err());
        let cfg = KLBaselineConfig {
            bags_per_minibatch: 1,
            ..cfg
        };
        assert!(train_kl(&inst, &cfg, None).is_ok());
    }
}
