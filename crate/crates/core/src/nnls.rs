//! Nonnegative least squares: minimize `||A x - b||` subject to `x >= 0`,
//! by the Lawson-Hanson active-set method.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnlsError {
    #[error("dimension mismatch: A is {rows}x{cols}, b has {len} entries")]
    Dimension { rows: usize, cols: usize, len: usize },
    #[error("non-finite value in the problem data")]
    NonFinite,
    #[error("active-set iteration limit reached")]
    NoConvergence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NnlsSolution {
    pub x: DVector<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    /// Largest KKT violation, see [`kkt_residual`].
    pub kkt_residual: f64,
}

/// Gradient of `0.5 ||A x - b||^2`.
pub fn gradient(a: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
    a.tr_mul(&(a * x - b))
}

/// Largest violation of the NNLS optimality conditions: `|g_j|` where
/// `x_j > 0`, `max(0, -g_j)` where `x_j = 0`, and `max(0, -x_j)`.
pub fn kkt_residual(a: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>) -> f64 {
    let g = gradient(a, b, x);
    x.iter()
        .zip(g.iter())
        .map(|(&xj, &gj)| {
            if xj > 0.0 {
                gj.abs()
            } else {
                (-gj).max(0.0).max(-xj)
            }
        })
        .fold(0.0, f64::max)
}

/// Unconstrained least squares on the columns in `set`; other entries 0.
fn solve_subset(a: &DMatrix<f64>, b: &DVector<f64>, set: &[usize]) -> DVector<f64> {
    let mut z = DVector::zeros(a.ncols());
    if set.is_empty() {
        return z;
    }
    let sub = a.select_columns(set);
    let svd = sub.svd(true, true);
    let eps = 1e-13 * svd.singular_values.max().max(f64::MIN_POSITIVE);
    let sol = svd.solve(b, eps).expect("u and v were computed");
    for (k, &j) in set.iter().enumerate() {
        z[j] = sol[k];
    }
    z
}

/// Solve NNLS. The dual (gradient) tolerance is scaled by `max(1, |A^T b|_inf)`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<NnlsSolution, NnlsError> {
    let (m, n) = a.shape();
    if b.len() != m {
        return Err(NnlsError::Dimension { rows: m, cols: n, len: b.len() });
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(NnlsError::NonFinite);
    }

    let scale = a.tr_mul(b).amax().max(1.0);
    let tol = 1e-12 * scale;
    let mut x = DVector::zeros(n);
    let mut passive: Vec<usize> = Vec::new();
    let mut blocked = vec![false; n];
    let max_iter = 30 * n.max(1) + 30;
    let mut iterations = 0;

    loop {
        // Most promising descent direction among the active (zero) variables.
        let w = -gradient(a, b, &x);
        let candidate = (0..n)
            .filter(|&j| !passive.contains(&j) && !blocked[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]).then(j.cmp(&i)));
        let Some(t) = candidate else { break };

        passive.push(t);
        passive.sort_unstable();

        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(NnlsError::NoConvergence);
            }
            let z = solve_subset(a, b, &passive);
            if passive.iter().all(|&j| z[j] > 0.0) {
                x = z;
                blocked.iter_mut().for_each(|b| *b = false);
                break;
            }
            if x[t] == 0.0 && z[t] <= 0.0 {
                // The entering variable cannot move; its multiplier is only
                // positive through rounding. Skip it until x changes.
                passive.retain(|&j| j != t);
                blocked[t] = true;
                break;
            }
            // Step from x toward z until the first passive variable hits zero.
            let (hit, alpha) = passive
                .iter()
                .filter(|&&j| z[j] <= 0.0)
                .map(|&j| (j, x[j] / (x[j] - z[j])))
                .min_by(|p, q| p.1.total_cmp(&q.1))
                .expect("some passive z is nonpositive");
            x += (&z - &x) * alpha;
            x[hit] = 0.0;
            passive.retain(|&j| j != hit && x[j] > 0.0);
            for j in 0..n {
                if !passive.contains(&j) {
                    x[j] = 0.0;
                }
            }
        }
    }

    let residual_norm = (a * &x - b).norm();
    let kkt = kkt_residual(a, b, &x);
    Ok(NnlsSolution { x, residual_norm, iterations, kkt_residual: kkt })
}
