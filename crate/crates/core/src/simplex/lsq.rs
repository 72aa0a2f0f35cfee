use super::{invert_with_threshold, project_to_simplex, Matrix, ProbVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct LsqOptions {
    pub max_iterations: usize,
    /// Stop once the projected-gradient mapping has norm below this.
    pub tolerance: f64,
}

impl Default for LsqOptions {
    fn default() -> Self {
        LsqOptions {
            max_iterations: 10_000,
            tolerance: 1e-10,
        }
    }
}

/// `argmin_{a in simplex} ||s - G^T a||^2` with default options.
///
/// `G` holds one bag proportion per row, so `G^T a` mixes those rows.
pub fn solve_simplex_least_squares(g: &Matrix, s: &ProbVector) -> Result<ProbVector> {
    solve_simplex_least_squares_with(g, s, LsqOptions::default())
}

/// Accelerated projected gradient (FISTA) with function-value restarts.
///
/// Every [`POLISH_EVERY`] iterations the support of the current iterate is
/// taken as the active set and the equality-constrained problem on it is
/// solved directly; the result is accepted once it meets the stationarity
/// tolerance. This finishes badly conditioned problems that first-order
/// steps alone approach too slowly.
///
/// Starts from the barycentre, so the result is a deterministic function of
/// the inputs. On hitting the iteration cap the best iterate seen is returned
/// inside [`Error::ConvergenceFailure`].
pub fn solve_simplex_least_squares_with(
    g: &Matrix,
    s: &ProbVector,
    opts: LsqOptions,
) -> Result<ProbVector> {
    let n = g.dim();
    if s.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: s.len(),
        });
    }
    if let Some(index) = g.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }

    // objective f(a) = ||G^T a - s||^2, gradient 2 G (G^T a - s)
    let gt = g.transpose();
    let hessian = g.matmul(&gt);
    let frobenius = hessian.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
    let lipschitz = 2.0 * frobenius.min(super::matrix_one_norm(&hessian));
    let start = ProbVector::uniform(n);
    if lipschitz == 0.0 {
        return Ok(start);
    }

    let objective = |a: &[f64]| -> f64 {
        gt.mul_vec(a)
            .iter()
            .zip(s.as_slice())
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    };
    let gradient = |a: &[f64]| -> Vec<f64> {
        let residual: Vec<f64> = gt
            .mul_vec(a)
            .iter()
            .zip(s.as_slice())
            .map(|(x, y)| x - y)
            .collect();
        g.mul_vec(&residual).into_iter().map(|v| 2.0 * v).collect()
    };
    let step = |a: &[f64], grad: &[f64]| -> Result<ProbVector> {
        let moved: Vec<f64> = a
            .iter()
            .zip(grad)
            .map(|(x, d)| x - d / lipschitz)
            .collect();
        project_to_simplex(&moved)
    };

    let stationarity = |a: &[f64]| -> Result<f64> {
        let mapped = step(a, &gradient(a))?;
        Ok(lipschitz
            * a.iter()
                .zip(mapped.as_slice())
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt())
    };
    let polish = |a: &[f64]| -> Result<Option<ProbVector>> {
        let Some(candidate) = solve_on_support(&hessian, &g.mul_vec(s.as_slice()), a) else {
            return Ok(None);
        };
        if stationarity(&candidate)? <= opts.tolerance {
            return Ok(Some(ProbVector::new_unchecked(candidate)));
        }
        Ok(None)
    };

    let mut x = start.into_vec();
    let mut y = x.clone();
    let mut momentum = 1.0_f64;
    let mut fx = objective(&x);
    let mut best = (fx, x.clone());
    let mut residual = f64::INFINITY;

    for iteration in 0..opts.max_iterations {
        if iteration % POLISH_EVERY == POLISH_EVERY - 1 {
            if let Some(done) = polish(&best.1)? {
                return Ok(done);
            }
        }
        // stationarity at x: L * ||x - P(x - grad/L)||
        let gx = gradient(&x);
        let mapped = step(&x, &gx)?;
        residual = lipschitz
            * x.iter()
                .zip(mapped.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
        if residual <= opts.tolerance {
            return Ok(best_of(best, x, fx));
        }

        let next = step(&y, &gradient(&y))?.into_vec();
        let f_next = objective(&next);
        if f_next > fx {
            // restart momentum from the plain projected-gradient step
            momentum = 1.0;
            y.clone_from(&x);
            x = mapped.into_vec();
            fx = objective(&x);
        } else {
            let m_next = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
            let beta = (momentum - 1.0) / m_next;
            y = next
                .iter()
                .zip(&x)
                .map(|(a, b)| a + beta * (a - b))
                .collect();
            momentum = m_next;
            x = next;
            fx = f_next;
        }
        if fx < best.0 {
            best = (fx, x.clone());
        }
    }

    if let Some(done) = polish(&best.1)? {
        return Ok(done);
    }
    Err(Error::ConvergenceFailure {
        iterations: opts.max_iterations,
        residual,
        best: best.1,
    })
}

/// Iterations between active-set polishing attempts.
pub const POLISH_EVERY: usize = 100;

/// Minimizer of `a^T H a - 2 b^T a` over `{sum a = 1, a_k = 0 off the support of x}`,
/// via the KKT system with one step of iterative refinement. `None` when the
/// system is singular or the solution leaves the simplex.
fn solve_on_support(hessian: &Matrix, b: &[f64], x: &[f64]) -> Option<Vec<f64>> {
    let support: Vec<usize> = (0..x.len()).filter(|&k| x[k] > 0.0).collect();
    let m = support.len();
    if m == 0 {
        return None;
    }
    let mut kkt = Matrix::zeros(m + 1);
    let mut rhs = vec![0.0; m + 1];
    for (i, &si) in support.iter().enumerate() {
        for (j, &sj) in support.iter().enumerate() {
            kkt[(i, j)] = hessian[(si, sj)];
        }
        kkt[(i, m)] = 1.0;
        kkt[(m, i)] = 1.0;
        rhs[i] = b[si];
    }
    rhs[m] = 1.0;
    let inv = invert_with_threshold(&kkt, f64::INFINITY).ok()?;
    let mut sol = inv.mul_vec(&rhs);
    let residual: Vec<f64> = kkt.mul_vec(&sol).iter().zip(&rhs).map(|(a, r)| r - a).collect();
    for (v, d) in sol.iter_mut().zip(inv.mul_vec(&residual)) {
        *v += d;
    }
    if sol[..m].iter().any(|&v| !(v >= 0.0)) {
        return None;
    }
    let mut full = vec![0.0; x.len()];
    for (&k, &v) in support.iter().zip(&sol) {
        full[k] = v;
    }
    let total: f64 = full.iter().sum();
    full.iter_mut().for_each(|v| *v /= total);
    Some(full)
}

fn best_of(best: (f64, Vec<f64>), x: Vec<f64>, fx: f64) -> ProbVector {
    let chosen = if best.0 < fx { best.1 } else { x };
    ProbVector::new_unchecked(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn objective(g: &Matrix, s: &ProbVector, a: &[f64]) -> f64 {
        g.transpose()
            .mul_vec(a)
            .iter()
            .zip(s.as_slice())
            .map(|(x, y)| (x - y).powi(2))
            .sum()
    }

    #[test]
    fn identity_recovers_target() {
        let s = ProbVector::new(vec![0.2, 0.8]).unwrap();
        let a = solve_simplex_least_squares(&Matrix::identity(2), &s).unwrap();
        assert!((a[0] - 0.2).abs() < 1e-9 && (a[1] - 0.8).abs() < 1e-9);
    }

    #[test]
    fn permutation_is_undone() {
        let g = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let s = ProbVector::new(vec![0.3, 0.7]).unwrap();
        let a = solve_simplex_least_squares(&g, &s).unwrap();
        assert!((a[0] - 0.7).abs() < 1e-9 && (a[1] - 0.3).abs() < 1e-9);
    }

    #[test]
    fn exact_fit_two_by_two() {
        let g = Matrix::from_rows(&[vec![0.8, 0.2], vec![0.3, 0.7]]).unwrap();
        let s = ProbVector::new(vec![0.55, 0.45]).unwrap();
        let a = solve_simplex_least_squares(&g, &s).unwrap();
        // grid over the 2-simplex at step 1e-4
        let grid_best = (0..=10_000)
            .map(|k| {
                let t = k as f64 * 1e-4;
                objective(&g, &s, &[t, 1.0 - t])
            })
            .fold(f64::INFINITY, f64::min);
        assert!(grid_best < 1e-20);
        assert!(objective(&g, &s, a.as_slice()) <= grid_best + 1e-8);
        assert!((a[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn degenerate_rows_reach_zero_objective() {
        let g = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let s = ProbVector::uniform(2);
        let a = solve_simplex_least_squares(&g, &s).unwrap();
        assert!(objective(&g, &s, a.as_slice()) < 1e-16);
    }

    #[test]
    fn infeasible_target_lands_on_boundary() {
        // s lies outside the hull of the rows; the minimizer is a vertex
        let g = Matrix::from_rows(&[vec![0.6, 0.4], vec![0.7, 0.3]]).unwrap();
        let s = ProbVector::new(vec![0.1, 0.9]).unwrap();
        let a = solve_simplex_least_squares(&g, &s).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn iteration_cap_reports_best_iterate() {
        let g = Matrix::from_rows(&[vec![0.9, 0.1, 0.0], vec![0.2, 0.5, 0.3], vec![0.1, 0.1, 0.8]]).unwrap();
        let s = ProbVector::new(vec![0.3, 0.3, 0.4]).unwrap();
        let opts = LsqOptions {
            max_iterations: 1,
            tolerance: 0.0,
        };
        match solve_simplex_least_squares_with(&g, &s, opts) {
            Err(Error::ConvergenceFailure { best, .. }) => assert_eq!(best.len(), 3),
            other => panic!("expected ConvergenceFailure, got {other:?}"),
        }
    }
}
