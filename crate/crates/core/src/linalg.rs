//! Small dense solvers used by the calibration and regression fits.
//!
//! The systems here are tiny (tens of columns at most) while the row counts
//! run to a few thousand, so simple O(np^2) Householder QR and O(p^3)
//! Cholesky routines are plenty fast and keep the dependency surface small.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Relative pivot threshold below which a QR column is declared dependent.
const RANK_TOL: f64 = 1e-10;

/// Result of a least-squares solve: coefficients plus the residual sum of
/// squares of the fit.
#[derive(Debug, Clone)]
pub struct LstsqFit {
    pub coefficients: Array1<f64>,
    pub rss: f64,
}

/// Solve `min ||a x - b||_2` by Householder QR with column pivot checks.
///
/// Returns `RankDeficientDesign` naming the offending column indices when a
/// diagonal of R collapses relative to the largest one, rather than silently
/// producing one of the infinitely many minimizers.
pub fn lstsq(a: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Result<LstsqFit> {
    let (n, p) = a.dim();
    if b.len() != n {
        return Err(Error::DimensionMismatch {
            context: "least squares right-hand side".into(),
            expected: n,
            found: b.len(),
        });
    }
    if n < p {
        return Err(Error::DimensionMismatch {
            context: "least squares rows vs columns".into(),
            expected: p,
            found: n,
        });
    }

    let mut r = a.to_owned();
    let mut y = b.to_owned();

    // Householder triangularization, applying each reflector to y as we go.
    for k in 0..p {
        let mut norm = 0.0;
        for i in k..n {
            norm += r[[i, k]] * r[[i, k]];
        }
        let norm = norm.sqrt();
        if norm > 0.0 {
            let alpha = if r[[k, k]] >= 0.0 { -norm } else { norm };
            let mut v = Array1::zeros(n - k);
            for i in k..n {
                v[i - k] = r[[i, k]];
            }
            v[0] -= alpha;
            let vtv: f64 = v.iter().map(|x| x * x).sum();
            if vtv > 0.0 {
                for j in k..p {
                    let mut dot = 0.0;
                    for i in k..n {
                        dot += v[i - k] * r[[i, j]];
                    }
                    let scale = 2.0 * dot / vtv;
                    for i in k..n {
                        r[[i, j]] -= scale * v[i - k];
                    }
                }
                let mut dot = 0.0;
                for i in k..n {
                    dot += v[i - k] * y[i];
                }
                let scale = 2.0 * dot / vtv;
                for i in k..n {
                    y[i] -= scale * v[i - k];
                }
            }
            r[[k, k]] = alpha;
            for i in (k + 1)..n {
                r[[i, k]] = 0.0;
            }
        }
    }

    // Rank check against the largest diagonal magnitude.
    let max_diag = (0..p).map(|k| r[[k, k]].abs()).fold(0.0_f64, f64::max);
    let dependent: Vec<usize> = (0..p)
        .filter(|&k| r[[k, k]].abs() <= RANK_TOL * max_diag.max(1e-300))
        .collect();
    if !dependent.is_empty() {
        return Err(Error::RankDeficientDesign { columns: dependent });
    }

    // Back substitution on the p x p triangle.
    let mut x = Array1::zeros(p);
    for k in (0..p).rev() {
        let mut s = y[k];
        for j in (k + 1)..p {
            s -= r[[k, j]] * x[j];
        }
        x[k] = s / r[[k, k]];
    }

    let rss: f64 = y.iter().skip(p).map(|v| v * v).sum();
    Ok(LstsqFit {
        coefficients: x,
        rss,
    })
}

/// Solve the symmetric positive-definite system `a x = b` by Cholesky.
///
/// If the factorization hits a non-positive pivot the diagonal is inflated by
/// an escalating ridge (1e-10 .. 1e-2 times the mean diagonal); this keeps
/// Newton steps usable near flat regions. Past the largest ridge the system
/// is reported singular with no column attribution (callers that know the
/// column names attach them).
pub fn solve_spd(a: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let p = a.nrows();
    if a.ncols() != p {
        return Err(Error::DimensionMismatch {
            context: "SPD solve matrix".into(),
            expected: p,
            found: a.ncols(),
        });
    }
    if b.len() != p {
        return Err(Error::DimensionMismatch {
            context: "SPD solve right-hand side".into(),
            expected: p,
            found: b.len(),
        });
    }
    if p == 0 {
        return Ok(Array1::zeros(0));
    }

    let mean_diag = (0..p).map(|i| a[[i, i]].abs()).sum::<f64>() / p as f64;
    // A vanishing or non-finite diagonal carries no curvature at all;
    // regularizing it would manufacture an arbitrary answer.
    if mean_diag <= 0.0 || !mean_diag.is_finite() {
        return Err(Error::SingularJacobian { columns: vec![] });
    }
    let mut ridge = 0.0;
    loop {
        match cholesky_solve(a, b, ridge) {
            Some(x) => return Ok(x),
            None => {
                ridge = if ridge == 0.0 {
                    1e-10 * mean_diag
                } else {
                    ridge * 100.0
                };
                if ridge > 1e-2 * mean_diag {
                    return Err(Error::SingularJacobian { columns: vec![] });
                }
            }
        }
    }
}

fn cholesky_solve(
    a: ArrayView2<'_, f64>,
    b: ArrayView1<'_, f64>,
    ridge: f64,
) -> Option<Array1<f64>> {
    let p = a.nrows();
    let mut l = Array2::<f64>::zeros((p, p));
    for j in 0..p {
        for i in j..p {
            let mut s = a[[i, j]];
            if i == j {
                s += ridge;
            }
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[[j, j]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    // Forward then back substitution.
    let mut z = Array1::zeros(p);
    for i in 0..p {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * z[k];
        }
        z[i] = s / l[[i, i]];
    }
    let mut x = Array1::zeros(p);
    for i in (0..p).rev() {
        let mut s = z[i];
        for k in (i + 1)..p {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    Some(x)
}

/// Euclidean norm of a vector.
pub fn norm2(v: ArrayView1<'_, f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Maximum absolute entry of a vector (0 for an empty vector).
pub fn norm_inf(v: ArrayView1<'_, f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}
