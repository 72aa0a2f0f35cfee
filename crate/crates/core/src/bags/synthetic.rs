use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Dataset;
use crate::error::{Error, Result};

/// Isotropic 2-D Gaussian mixture with class means evenly spaced on a circle.
///
/// Class `c` has mean `radius * (cos(2 pi c / C), sin(2 pi c / C))` and
/// labels cycle `0, 1, .., C-1` so class sizes differ by at most one.
pub fn gaussian_mixture<R: Rng + ?Sized>(
    n: usize,
    classes: usize,
    radius: f64,
    std_dev: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if n == 0 || classes < 2 {
        return Err(Error::InvalidArgument(
            "need at least one point and two classes".into(),
        ));
    }
    if !(std_dev >= 0.0) {
        return Err(Error::InvalidArgument(format!("bad standard deviation {std_dev}")));
    }
    let mut features = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let angle = TAU * c as f64 / classes as f64;
        let dx: f64 = StandardNormal.sample(rng);
        let dy: f64 = StandardNormal.sample(rng);
        features.push(radius * angle.cos() + std_dev * dx);
        features.push(radius * angle.sin() + std_dev * dy);
        labels.push(c);
    }
    Dataset::from_flat(features, 2, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn class_means_sit_on_the_circle() {
        let ds = gaussian_mixture(3000, 3, 1.0, 0.5, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(ds.class_counts(), vec![1000, 1000, 1000]);
        for c in 0..3 {
            let rows: Vec<&[f64]> = (0..ds.len()).filter(|&i| i % 3 == c).map(|i| ds.features(i)).collect();
            let mx = rows.iter().map(|r| r[0]).sum::<f64>() / rows.len() as f64;
            let my = rows.iter().map(|r| r[1]).sum::<f64>() / rows.len() as f64;
            let angle = TAU * c as f64 / 3.0;
            // 4 standard errors of 0.5 / sqrt(1000)
            assert!((mx - angle.cos()).abs() < 0.064);
            assert!((my - angle.sin()).abs() < 0.064);
        }
    }
}
