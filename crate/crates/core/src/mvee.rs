//! Minimum-volume enclosing ellipsoid centered at the origin.
//!
//! Solves `max log det M  s.t. pᵀMp ≤ 1` through its D-optimal design dual
//! with Frank–Wolfe steps and away steps (Wolfe–Atwood). With design weights
//! `u`, `X(u) = Σ u_i p_i p_iᵀ` and `g_i = p_iᵀX⁻¹p_i`; the weights are
//! optimal iff `max g_i = n`, and `M = X⁻¹/n`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{spd_inverse, sym_eigenvalues, sym_sqrt};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MveeOptions {
    /// Relative optimality tolerance on `max g_i / n − 1`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for MveeOptions {
    fn default() -> Self {
        Self { tol: 1e-7, max_iter: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MveeSolution {
    /// Symmetric `Ŷ` with `{w : ‖Ŷw‖ ≤ 1}` the enclosing ellipsoid.
    pub yhat: DMatrix<f64>,
    /// `M = ŶᵀŶ`.
    pub shape: DMatrix<f64>,
    pub iterations: usize,
    /// Upper bound on `log det M* − log det M`.
    pub log_det_gap: f64,
}

impl MveeSolution {
    pub fn log_det(&self) -> f64 {
        crate::linalg::symmetrize(&self.shape).symmetric_eigenvalues().iter().map(|v| v.ln()).sum()
    }
}

/// Below this eigenvalue ratio of the scatter matrix the points are treated
/// as lying in a proper subspace.
const RANK_RATIO: f64 = 1e-12;

pub fn centered_mvee(points: &[DVector<f64>], options: &MveeOptions) -> Result<MveeSolution> {
    let Some(first) = points.first() else {
        return Err(Error::InvalidArgument("no points for the enclosing ellipsoid".into()));
    };
    let n = first.len();
    if n == 0 || points.iter().any(|p| p.len() != n) {
        return Err(Error::DimensionMismatch {
            context: "enclosing ellipsoid points",
            expected: n,
            found: points.iter().map(|p| p.len()).find(|&l| l != n).unwrap_or(0),
        });
    }
    if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidArgument("non-finite point".into()));
    }
    if !(options.tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let m = points.len();
    let pts = DMatrix::from_fn(n, m, |r, c| points[c][r]);
    let dim = n as f64;

    let mut u = vec![1.0 / m as f64; m];
    let mut x = scatter(&pts, &u);
    let eig = sym_eigenvalues(&x)?;
    let ratio = eig[0] / eig[n - 1];
    if !(ratio > RANK_RATIO) {
        return Err(Error::RankDeficient { dim: n, ratio });
    }

    let mut g = vec![0.0; m];
    let scores = |x: &DMatrix<f64>, g: &mut [f64]| -> Result<()> {
        let xinv = spd_inverse(x, "design matrix")?;
        for (i, gi) in g.iter_mut().enumerate() {
            let p = pts.column(i);
            let mut acc = 0.0;
            for r in 0..n {
                let mut row = 0.0;
                for c in 0..n {
                    row += xinv[(r, c)] * p[c];
                }
                acc += p[r] * row;
            }
            *gi = acc;
        }
        Ok(())
    };

    let mut iterations = 0;
    loop {
        scores(&x, &mut g)?;
        let (j, g_max) = argmax(&g);
        let (k, g_min) = g
            .iter()
            .enumerate()
            .filter(|&(i, _)| u[i] > 0.0)
            .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
        let toward = g_max / dim - 1.0;
        if toward <= options.tol {
            let mut shape = spd_inverse(&x, "design matrix")? / dim;
            // Scale so the farthest point lies exactly on the boundary.
            shape *= dim / g_max;
            let shape = crate::linalg::symmetrize(&shape);
            let yhat = sym_sqrt(&shape)?;
            return Ok(MveeSolution {
                yhat,
                shape,
                iterations,
                log_det_gap: dim * (g_max / dim).ln(),
            });
        }
        if iterations >= options.max_iter {
            return Err(Error::NotConverged {
                what: "enclosing ellipsoid",
                iterations,
                residual: toward,
            });
        }
        iterations += 1;

        let away = 1.0 - g_min / dim;
        let (idx, step) = if toward >= away || u[k] >= 1.0 {
            (j, (g_max - dim) / (dim * (g_max - 1.0)))
        } else {
            let bound = -u[k] / (1.0 - u[k]);
            let free = if g_min > 1.0 { (g_min - dim) / (dim * (g_min - 1.0)) } else { bound };
            (k, free.max(bound))
        };
        for w in u.iter_mut() {
            *w *= 1.0 - step;
        }
        u[idx] += step;
        if u[idx] < 0.0 {
            u[idx] = 0.0;
        }
        let p = pts.column(idx);
        x *= 1.0 - step;
        x.ger(step, &p, &p, 1.0);
        // Refresh periodically to keep rounding from accumulating.
        if iterations % 500 == 0 {
            x = scatter(&pts, &u);
        }
    }
}

/// `Σ u_i p_i p_iᵀ` for the columns `p_i` of `pts`.
fn scatter(pts: &DMatrix<f64>, u: &[f64]) -> DMatrix<f64> {
    let n = pts.nrows();
    let mut x = DMatrix::zeros(n, n);
    for (i, &w) in u.iter().enumerate() {
        if w != 0.0 {
            let p = pts.column(i);
            x.ger(w, &p, &p, 1.0);
        }
    }
    x
}

fn argmax(values: &[f64]) -> (usize, f64) {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
}
