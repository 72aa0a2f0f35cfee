//! Labeled datasets, bags of unlabeled points annotated with label
//! proportions, and the synthetic bag-generation protocol.
//!
//! A bag is generated by drawing a proportion `gamma` uniformly from the
//! simplex, drawing per-class counts from `Multinomial(bag_size, gamma)`,
//! and then drawing that many unused points of each class from the pool.
//! Points are never reused across bags.

mod io;
mod synthetic;

pub use io::{
    parse_dataset_csv, read_bags_jsonl, read_dataset_csv, write_bags_jsonl, write_dataset_csv,
    BagsMeta,
};
pub use synthetic::gaussian_mixture;

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};
use crate::simplex::ProbVector;

/// Feature matrix plus integer class labels.
///
/// Label reads are counted (see [`Dataset::label_reads`]) so callers can
/// audit that a training path only sees labels where it is allowed to.
#[derive(Debug)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    classes: usize,
    label_reads: AtomicUsize,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Dataset {
            features: self.features.clone(),
            labels: self.labels.clone(),
            dim: self.dim,
            classes: self.classes,
            label_reads: AtomicUsize::new(0),
        }
    }
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::InvalidArgument("dataset has no rows".into()));
        }
        if features.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: features.len(),
                got: labels.len(),
            });
        }
        let dim = features[0].len();
        let mut flat = Vec::with_capacity(features.len() * dim);
        for row in &features {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            flat.extend_from_slice(row);
        }
        Self::from_flat(flat, dim, labels, classes)
    }

    pub fn from_flat(features: Vec<f64>, dim: usize, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("dataset has no rows".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * dim,
                got: features.len(),
            });
        }
        if let Some(index) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            dim,
            classes,
            label_reads: AtomicUsize::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        self.label_reads.fetch_add(self.labels.len(), Ordering::Relaxed);
        &self.labels
    }

    /// Number of individual label reads since construction.
    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::Relaxed)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in self.labels() {
            counts[y] += 1;
        }
        counts
    }

    /// Same data declared over `classes` labels, e.g. to match a bags file.
    pub fn with_classes(mut self, classes: usize) -> Result<Self> {
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        self.classes = classes;
        Ok(self)
    }

    /// Rows `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("index {i} out of range")));
            }
            features.extend_from_slice(self.features(i));
            labels.push(self.labels[i]);
        }
        Dataset::from_flat(features, self.dim, labels, self.classes)
    }
}

/// A set of dataset rows annotated with its observed label proportion.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub indices: Vec<usize>,
    pub gamma_hat: ProbVector,
    /// Governing proportion, known only for synthetic bags.
    pub gamma_true: Option<ProbVector>,
}

impl Bag {
    /// Bag over `indices` whose proportion is the histogram of their labels.
    pub fn from_labels(ds: &Dataset, indices: Vec<usize>, gamma_true: Option<ProbVector>) -> Result<Bag> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty bag".into()));
        }
        let mut counts = vec![0usize; ds.num_classes()];
        for &i in &indices {
            counts[ds.label(i)] += 1;
        }
        Ok(Bag {
            indices,
            gamma_hat: ProbVector::from_counts(&counts)?,
            gamma_true,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Training data for learning from label proportions.
#[derive(Debug, Clone)]
pub struct LLPInstance {
    pub dataset: Dataset,
    pub bags: Vec<Bag>,
    pub seed: u64,
}

impl LLPInstance {
    /// Checks bag structure against the dataset without reading labels.
    pub fn new(dataset: Dataset, bags: Vec<Bag>, seed: u64) -> Result<Self> {
        if bags.is_empty() {
            return Err(Error::InvalidArgument("no bags".into()));
        }
        let classes = dataset.num_classes();
        for (k, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                return Err(Error::InvalidArgument(format!("bag {k} is empty")));
            }
            if bag.gamma_hat.len() != classes {
                return Err(Error::DimensionMismatch {
                    expected: classes,
                    got: bag.gamma_hat.len(),
                });
            }
            if let Some(g) = &bag.gamma_true {
                if g.len() != classes {
                    return Err(Error::DimensionMismatch {
                        expected: classes,
                        got: g.len(),
                    });
                }
            }
            let mut seen = bag.indices.clone();
            seen.sort_unstable();
            if let Some(&last) = seen.last() {
                if last >= dataset.len() {
                    return Err(Error::InvalidArgument(format!(
                        "bag {k} references row {last} of {}",
                        dataset.len()
                    )));
                }
            }
            if seen.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidArgument(format!("bag {k} repeats an index")));
            }
        }
        Ok(LLPInstance { dataset, bags, seed })
    }

    pub fn num_classes(&self) -> usize {
        self.dataset.num_classes()
    }
}

/// Uniform draw from the simplex via normalized exponential spacings.
pub fn sample_gamma_uniform<R: Rng + ?Sized>(classes: usize, rng: &mut R) -> Result<ProbVector> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    let draws: Vec<f64> = (0..classes).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    ProbVector::new(draws.into_iter().map(|e| e / total).collect())
}

/// Per-class counts from `Multinomial(trials, p)`, one categorical draw at a time.
fn multinomial<R: Rng + ?Sized>(trials: usize, p: &[f64], rng: &mut R) -> Vec<usize> {
    let mut counts = vec![0; p.len()];
    for _ in 0..trials {
        counts[categorical(p, rng)] += 1;
    }
    counts
}

fn categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let total: f64 = p.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // rounding can leave u just above the last partial sum
    p.iter().rposition(|&w| w > 0.0).unwrap_or(p.len() - 1)
}

/// Caps `counts` at `available`, moving the overflow to classes with spare
/// points in proportion to their share of `gamma`.
fn truncate_counts<R: Rng + ?Sized>(
    counts: &mut [usize],
    available: &[usize],
    gamma: &[f64],
    rng: &mut R,
) -> Result<()> {
    let mut overflow = 0;
    let mut first_overflowing = None;
    for (c, (n, &a)) in counts.iter_mut().zip(available).enumerate() {
        if *n > a {
            overflow += *n - a;
            first_overflowing.get_or_insert(c);
            *n = a;
        }
    }
    while overflow > 0 {
        let spare: Vec<bool> = counts.iter().zip(available).map(|(n, a)| n < a).collect();
        if !spare.iter().any(|&s| s) {
            return Err(Error::ClassExhausted {
                class: first_overflowing.unwrap_or(0),
                overflow,
            });
        }
        let mut weights: Vec<f64> = gamma
            .iter()
            .zip(&spare)
            .map(|(&g, &s)| if s { g } else { 0.0 })
            .collect();
        if weights.iter().sum::<f64>() <= 0.0 {
            weights = spare.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
        }
        counts[categorical(&weights, rng)] += 1;
        overflow -= 1;
    }
    Ok(())
}

/// Draws `n_bags` disjoint bags of `bag_size` points each from `ds`.
pub fn generate_bags<R: Rng + ?Sized>(
    ds: &Dataset,
    bag_size: usize,
    n_bags: usize,
    rng: &mut R,
) -> Result<Vec<Bag>> {
    if bag_size == 0 || n_bags == 0 {
        return Err(Error::InvalidArgument(
            "bag size and bag count must be positive".into(),
        ));
    }
    let needed = bag_size
        .checked_mul(n_bags)
        .ok_or_else(|| Error::InvalidArgument("bag size times bag count overflows".into()))?;
    if needed > ds.len() {
        return Err(Error::InsufficientData(format!(
            "{n_bags} bags of {bag_size} need {needed} points, dataset has {}",
            ds.len()
        )));
    }
    let classes = ds.num_classes();
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in ds.labels().iter().enumerate() {
        pools[y].push(i);
    }

    let mut bags = Vec::with_capacity(n_bags);
    for _ in 0..n_bags {
        let gamma = sample_gamma_uniform(classes, rng)?;
        let mut counts = multinomial(bag_size, gamma.as_slice(), rng);
        let available: Vec<usize> = pools.iter().map(Vec::len).collect();
        truncate_counts(&mut counts, &available, gamma.as_slice(), rng)?;

        let mut indices = Vec::with_capacity(bag_size);
        for (pool, &k) in pools.iter_mut().zip(&counts) {
            for _ in 0..k {
                let pos = rng.random_range(0..pool.len());
                indices.push(pool.swap_remove(pos));
            }
        }
        indices.sort_unstable();
        bags.push(Bag {
            indices,
            gamma_hat: ProbVector::from_counts(&counts)?,
            gamma_true: Some(gamma),
        });
    }
    Ok(bags)
}

/// Size-weighted average of the bags' observed proportions.
pub fn pooled_prior(bags: &[Bag]) -> Result<ProbVector> {
    let first = bags
        .first()
        .ok_or_else(|| Error::InvalidArgument("no bags".into()))?;
    let mut acc = vec![0.0; first.gamma_hat.len()];
    let mut total = 0usize;
    for bag in bags {
        for (a, &g) in acc.iter_mut().zip(bag.gamma_hat.as_slice()) {
            *a += bag.len() as f64 * g;
        }
        total += bag.len();
    }
    ProbVector::new(acc.into_iter().map(|a| a / total as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn balanced(per_class: usize, classes: usize) -> Dataset {
        let n = per_class * classes;
        let features = (0..n).map(|i| vec![i as f64]).collect();
        let labels = (0..n).map(|i| i % classes).collect();
        Dataset::new(features, labels, classes).unwrap()
    }

    #[test]
    fn gamma_sampling_is_deterministic() {
        let a = sample_gamma_uniform(2, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_gamma_uniform(2, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert!(sample_gamma_uniform(1, &mut ChaCha8Rng::seed_from_u64(7)).is_err());
    }

    #[test]
    fn gamma_mean_is_barycentre() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut mean = [0.0; 3];
        let draws = 100_000;
        for _ in 0..draws {
            let g = sample_gamma_uniform(3, &mut rng).unwrap();
            for c in 0..3 {
                mean[c] += g[c] / draws as f64;
            }
        }
        for m in mean {
            assert!((m - 1.0 / 3.0).abs() < 0.01, "mean {m}");
        }
    }

    #[test]
    fn bags_are_disjoint() {
        let ds = balanced(100, 2);
        let bags = generate_bags(&ds, 10, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(bags.len(), 4);
        let mut all: Vec<usize> = bags.iter().flat_map(|b| b.indices.clone()).collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 40);
        for bag in &bags {
            assert_eq!(bag.len(), 10);
            let expected = Bag::from_labels(&ds, bag.indices.clone(), None).unwrap();
            assert_eq!(bag.gamma_hat, expected.gamma_hat);
        }
    }

    #[test]
    fn singleton_bags_are_one_hot() {
        let ds = balanced(20, 3);
        let bags = generate_bags(&ds, 1, 30, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for bag in bags {
            assert_eq!(bag.gamma_hat.as_slice().iter().filter(|&&g| g == 1.0).count(), 1);
        }
    }

    #[test]
    fn oversized_request_is_rejected() {
        let ds = balanced(5, 2);
        assert!(matches!(
            generate_bags(&ds, 4, 3, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn exhausting_a_class_redistributes() {
        // class 1 has only 2 points, so most bags must spill into class 0
        let labels: Vec<usize> = (0..40).map(|i| usize::from(i < 2)).collect();
        let features = (0..40).map(|i| vec![i as f64]).collect();
        let ds = Dataset::new(features, labels, 2).unwrap();
        let bags = generate_bags(&ds, 10, 4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let ones: f64 = bags.iter().map(|b| b.gamma_hat[1] * b.len() as f64).sum();
        assert!(ones <= 2.0 + 1e-12);
    }

    #[test]
    fn truncation_fails_only_when_everything_is_used() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = vec![5, 0];
        let err = truncate_counts(&mut counts, &[2, 1], &[1.0, 0.0], &mut rng).unwrap_err();
        assert!(matches!(err, Error::ClassExhausted { class: 0, overflow: 2 }));
        let mut counts = vec![5, 0];
        truncate_counts(&mut counts, &[2, 9], &[1.0, 0.0], &mut rng).unwrap();
        assert_eq!(counts, vec![2, 3]);
    }

    #[test]
    fn pooled_prior_examples() {
        let bag = |n: usize, g: Vec<f64>| Bag {
            indices: (0..n).collect(),
            gamma_hat: ProbVector::new(g).unwrap(),
            gamma_true: None,
        };
        let single = vec![bag(5, vec![0.2, 0.8])];
        assert_eq!(pooled_prior(&single).unwrap().as_slice(), &[0.2, 0.8]);
        let even = vec![bag(4, vec![1.0, 0.0]), bag(4, vec![0.0, 1.0])];
        assert_eq!(pooled_prior(&even).unwrap().as_slice(), &[0.5, 0.5]);
        let uneven = vec![bag(30, vec![1.0, 0.0]), bag(70, vec![0.0, 1.0])];
        let p = pooled_prior(&uneven).unwrap();
        assert!((p[0] - 0.3).abs() < 1e-15 && (p[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn instance_rejects_repeated_indices() {
        let ds = balanced(5, 2);
        let bag = Bag {
            indices: vec![1, 1],
            gamma_hat: ProbVector::uniform(2),
            gamma_true: None,
        };
        assert!(LLPInstance::new(ds, vec![bag], 0).is_err());
    }
}
