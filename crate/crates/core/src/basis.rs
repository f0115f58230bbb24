//! Calibration basis construction.
//!
//! Estimators balance the trial toward the target population on a vector of
//! basis functions g(X). Covariates are first standardized against the
//! design-weighted real-world moments (so penalties treat columns on a
//! common scale), then expanded into either the linear terms or the full
//! quadratic set (linear + squares + pairwise interactions).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which basis expansion to balance on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisDegree {
    /// The p standardized covariates.
    Linear,
    /// Linear terms plus squares and pairwise interactions,
    /// p + p(p+1)/2 columns in total.
    Quadratic,
}

impl std::fmt::Display for BasisDegree {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BasisDegree::Linear => write!(f, "linear"),
            BasisDegree::Quadratic => write!(f, "quadratic"),
        }
    }
}

/// Number of basis columns for `p` covariates.
pub fn basis_dim(p: usize, degree: BasisDegree) -> usize {
    match degree {
        BasisDegree::Linear => p,
        BasisDegree::Quadratic => p + p * (p + 1) / 2,
    }
}

/// Per-covariate affine transform fitted on design-weighted moments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardization {
    /// Fit weighted location/scale per column. Weights need not be
    /// normalized. A column with zero weighted variance cannot be scaled and
    /// is reported by name.
    pub fn fit(
        covariates: ArrayView2<'_, f64>,
        weights: ArrayView1<'_, f64>,
        names: &[String],
    ) -> Result<Self> {
        let (n, p) = covariates.dim();
        if weights.len() != n {
            return Err(Error::DimensionMismatch {
                context: "standardization weights".into(),
                expected: n,
                found: weights.len(),
            });
        }
        let total: f64 = weights.sum();
        if !(total > 0.0) {
            return Err(Error::InvalidConfig(
                "standardization weights sum to zero".into(),
            ));
        }
        let mut means = Vec::with_capacity(p);
        let mut sds = Vec::with_capacity(p);
        for j in 0..p {
            let col = covariates.column(j);
            let mean: f64 = col
                .iter()
                .zip(weights.iter())
                .map(|(&x, &w)| w * x)
                .sum::<f64>()
                / total;
            let var: f64 = col
                .iter()
                .zip(weights.iter())
                .map(|(&x, &w)| w * (x - mean) * (x - mean))
                .sum::<f64>()
                / total;
            let sd = var.sqrt();
            if !(sd > 0.0) {
                return Err(Error::DegenerateColumn {
                    column: names
                        .get(j)
                        .cloned()
                        .unwrap_or_else(|| format!("column {j}")),
                });
            }
            means.push(mean);
            sds.push(sd);
        }
        Ok(Standardization { means, sds })
    }

    pub fn p(&self) -> usize {
        self.means.len()
    }

    /// Apply the transform column-wise: (x - mean) / sd.
    pub fn apply(&self, covariates: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let (n, p) = covariates.dim();
        if p != self.p() {
            return Err(Error::DimensionMismatch {
                context: "standardization columns".into(),
                expected: self.p(),
                found: p,
            });
        }
        let mut out = Array2::zeros((n, p));
        for j in 0..p {
            let mean = self.means[j];
            let sd = self.sds[j];
            for i in 0..n {
                out[[i, j]] = (covariates[[i, j]] - mean) / sd;
            }
        }
        Ok(out)
    }
}

/// A basis expansion with its column names.
#[derive(Debug, Clone)]
pub struct BasisMatrix {
    /// rows x K matrix of basis values.
    pub values: Array2<f64>,
    /// Column names such as `x1`, `x1^2`, `x1:x2`.
    pub names: Vec<String>,
}

impl BasisMatrix {
    pub fn k(&self) -> usize {
        self.values.ncols()
    }
}

/// Column names for the expansion, in the same order `build_basis` emits:
/// linear terms in covariate order, then for each i the square `xi^2`
/// followed by interactions `xi:xj` for j > i.
pub fn basis_column_names(degree: BasisDegree, covariate_names: &[String]) -> Vec<String> {
    let p = covariate_names.len();
    let mut names: Vec<String> = covariate_names.to_vec();
    if degree == BasisDegree::Quadratic {
        for i in 0..p {
            names.push(format!("{}^2", covariate_names[i]));
            for j in (i + 1)..p {
                names.push(format!("{}:{}", covariate_names[i], covariate_names[j]));
            }
        }
    }
    names
}

/// Expand standardized covariates into the requested basis.
pub fn build_basis(
    standardized: ArrayView2<'_, f64>,
    degree: BasisDegree,
    covariate_names: &[String],
) -> BasisMatrix {
    let (n, p) = standardized.dim();
    let k = basis_dim(p, degree);
    let mut values = Array2::zeros((n, k));
    for i in 0..n {
        for j in 0..p {
            values[[i, j]] = standardized[[i, j]];
        }
        if degree == BasisDegree::Quadratic {
            let mut col = p;
            for a in 0..p {
                values[[i, col]] = standardized[[i, a]] * standardized[[i, a]];
                col += 1;
                for b in (a + 1)..p {
                    values[[i, col]] = standardized[[i, a]] * standardized[[i, b]];
                    col += 1;
                }
            }
        }
    }
    BasisMatrix {
        values,
        names: basis_column_names(degree, covariate_names),
    }
}

/// Design-weighted mean of each basis column: the calibration target.
pub fn target_moments(basis: &BasisMatrix, weights: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let (n, k) = basis.values.dim();
    if weights.len() != n {
        return Err(Error::DimensionMismatch {
            context: "target moment weights".into(),
            expected: n,
            found: weights.len(),
        });
    }
    let total: f64 = weights.sum();
    if !(total > 0.0) {
        return Err(Error::InvalidConfig("target weights sum to zero".into()));
    }
    let mut out = Array1::zeros(k);
    for j in 0..k {
        out[j] = basis
            .values
            .column(j)
            .iter()
            .zip(weights.iter())
            .map(|(&g, &w)| w * g)
            .sum::<f64>()
            / total;
    }
    Ok(out)
}
