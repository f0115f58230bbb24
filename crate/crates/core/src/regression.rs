//! Nuisance-model fitting: linear and logistic regressions, with optional
//! SCAD-penalized variants used for sieve outcome models.
//!
//! Identity-link fits are weighted least squares through a QR solve.
//! Logit-link fits run iteratively reweighted least squares. Penalized fits
//! use a one-step local linear approximation: an unpenalized pilot fit sets
//! per-coefficient penalty weights scad_derivative(|β⁰_k|), and the
//! resulting weighted-lasso subproblem is solved by coordinate descent. The
//! intercept column is never penalized.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::Serialize;

use crate::basis::{build_basis, BasisDegree, Standardization};
use crate::calibration::{scad_derivative, ScadParams};
use crate::data::{IntegratedDataset, OutcomeType};
use crate::error::{Error, Result};
use crate::linalg::{lstsq, norm_inf};
use crate::rng::{stream_rng, Stream};

/// Link function of a fitted mean model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Logit,
}

/// A fitted (possibly penalized) generalized linear model.
#[derive(Debug, Clone, Serialize)]
pub struct GlmFit {
    /// Coefficients; index 0 is the intercept when `with_intercept`.
    pub beta: Vec<f64>,
    pub link: Link,
    pub converged: bool,
    pub iterations: usize,
    /// Per-coefficient nonzero mask; all true for unpenalized fits.
    pub selected: Vec<bool>,
    /// Whether column 0 of the design was an intercept this fit added.
    pub with_intercept: bool,
}

impl GlmFit {
    fn from_beta(beta: Array1<f64>, link: Link, iterations: usize, with_intercept: bool) -> Self {
        let selected = beta.iter().map(|&b| b != 0.0).collect();
        GlmFit {
            beta: beta.to_vec(),
            link,
            converged: true,
            iterations,
            selected,
            with_intercept,
        }
    }
}

pub fn expit(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean response at each design row under the fit's link.
pub fn predict(fit: &GlmFit, design: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    let expected = if fit.with_intercept {
        fit.beta.len() - 1
    } else {
        fit.beta.len()
    };
    if design.ncols() != expected {
        return Err(Error::DimensionMismatch {
            context: "prediction design columns".into(),
            expected,
            found: design.ncols(),
        });
    }
    let offset = usize::from(fit.with_intercept);
    let mut eta = Array1::from_elem(
        design.nrows(),
        if fit.with_intercept { fit.beta[0] } else { 0.0 },
    );
    for (i, row) in design.outer_iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            eta[i] += fit.beta[j + offset] * x;
        }
    }
    Ok(match fit.link {
        Link::Identity => eta,
        Link::Logit => eta.mapv(expit),
    })
}

/// Fit y ~ design under the link, optionally with row weights. The design
/// is used as given (callers prepend an intercept column if they want one).
pub fn fit_glm(
    design: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    link: Link,
    weights: Option<ArrayView1<'_, f64>>,
) -> Result<GlmFit> {
    let (n, p) = design.dim();
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            context: "response length".into(),
            expected: n,
            found: y.len(),
        });
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::DimensionMismatch {
                context: "row weight length".into(),
                expected: n,
                found: w.len(),
            });
        }
    }
    if n < p {
        return Err(Error::DimensionMismatch {
            context: "rows vs columns".into(),
            expected: p,
            found: n,
        });
    }
    match link {
        Link::Identity => {
            let beta = weighted_lstsq(design, y, weights)?;
            Ok(GlmFit::from_beta(beta, link, 1, false))
        }
        Link::Logit => irls_logit(design, y, weights),
    }
}

/// Solve min Σ w_i (y_i − x_iᵀβ)² by scaling rows with √w and running QR.
fn weighted_lstsq(
    design: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    weights: Option<ArrayView1<'_, f64>>,
) -> Result<Array1<f64>> {
    match weights {
        None => Ok(lstsq(design, y)?.coefficients),
        Some(w) => {
            let mut a = design.to_owned();
            let mut b = y.to_owned();
            for (i, mut row) in a.outer_iter_mut().enumerate() {
                let s = w[i].max(0.0).sqrt();
                row.mapv_inplace(|v| v * s);
                b[i] *= s;
            }
            Ok(lstsq(a.view(), b.view())?.coefficients)
        }
    }
}

fn irls_logit(
    design: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    weights: Option<ArrayView1<'_, f64>>,
) -> Result<GlmFit> {
    let (n, p) = design.dim();
    let mut beta = Array1::<f64>::zeros(p);
    for iter in 0..50 {
        let eta = design.dot(&beta);
        let mu = eta.mapv(expit);
        // Working response z = η + (y − μ)/v with IRLS weight w·v,
        // v = μ(1−μ) floored away from zero.
        let mut z = Array1::zeros(n);
        let mut wv = Array1::zeros(n);
        for i in 0..n {
            let v = (mu[i] * (1.0 - mu[i])).max(1e-10);
            z[i] = eta[i] + (y[i] - mu[i]) / v;
            wv[i] = v * weights.map_or(1.0, |w| w[i]);
        }
        let next = weighted_lstsq(design, z.view(), Some(wv.view()))?;
        let step = norm_inf((&next - &beta).view());
        beta = next;
        let norm = beta.dot(&beta).sqrt();
        if norm > 1e4 {
            return Err(Error::Separation { norm });
        }
        if step < 1e-10 {
            return Ok(GlmFit::from_beta(beta, Link::Logit, iter + 1, false));
        }
    }
    // IRLS ran out of iterations. If the current iterate already predicts
    // the responses essentially perfectly, the likelihood has its supremum
    // at infinity (separated data) and every further step just inflates the
    // coefficients; report that instead of a silently non-converged fit.
    let mu = design.dot(&beta).mapv(expit);
    if y.iter().zip(mu.iter()).all(|(yi, mi)| (yi - mi).abs() < 1e-6) {
        return Err(Error::Separation {
            norm: beta.dot(&beta).sqrt(),
        });
    }
    let mut fit = GlmFit::from_beta(beta, Link::Logit, 50, false);
    fit.converged = false;
    Ok(fit)
}

/// Quadratic-loss coordinate descent for the weighted-lasso subproblem
///
///   min_β (1/(2n)) Σ w_i (y_i − x_iᵀβ)² + Σ_k pen_k |β_k|
///
/// on precomputed Gram quantities. `gram = XᵀWX/n`, `xty = XᵀWy/n`.
fn coordinate_descent(
    gram: &Array2<f64>,
    xty: &Array1<f64>,
    pen: &[f64],
    mut beta: Array1<f64>,
) -> Array1<f64> {
    let p = beta.len();
    // Residual correlation r_k = xty − gram·β maintained incrementally.
    let mut r = xty - &gram.dot(&beta);
    for _sweep in 0..1000 {
        let mut max_move = 0.0_f64;
        for k in 0..p {
            let gkk = gram[[k, k]];
            if gkk <= 0.0 {
                continue;
            }
            let old = beta[k];
            let rho = r[k] + gkk * old;
            let new = soft_threshold(rho, pen[k]) / gkk;
            if new != old {
                let delta = new - old;
                beta[k] = new;
                for j in 0..p {
                    r[j] -= gram[[j, k]] * delta;
                }
                max_move = max_move.max(delta.abs());
            }
        }
        if max_move < 1e-8 {
            break;
        }
    }
    beta
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// SCAD-penalized GLM via one-step local linear approximation.
///
/// The pilot `fit_glm` sets penalty weights scad_derivative(|β⁰_k|, ξ); the
/// identity link then solves one weighted-lasso problem, while the logit
/// link runs IRLS with the penalized subproblem inside (penalty weights held
/// fixed at the pilot values). Column 0 is treated as the intercept and
/// never penalized.
pub fn fit_scad_glm(
    design: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    link: Link,
    params: ScadParams,
    weights: Option<ArrayView1<'_, f64>>,
) -> Result<GlmFit> {
    let pilot = fit_glm(design, y, link, weights)?;
    if params.xi == 0.0 {
        return Ok(pilot);
    }
    fit_scad_from_pilot(design, y, link, params, weights, &pilot, None, None)
}

/// The penalized solve behind [`fit_scad_glm`], with the unpenalized pilot
/// (and optionally a warm start and a precomputed identity-link Gram system)
/// supplied by the caller so grid sweeps don't redo shared work.
#[allow(clippy::too_many_arguments)]
fn fit_scad_from_pilot(
    design: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    link: Link,
    params: ScadParams,
    weights: Option<ArrayView1<'_, f64>>,
    pilot: &GlmFit,
    init: Option<&Array1<f64>>,
    gram_xty: Option<(&Array2<f64>, &Array1<f64>)>,
) -> Result<GlmFit> {
    let (n, p) = design.dim();
    let nf = n as f64;
    let mut pen = vec![0.0_f64; p];
    for k in 1..p {
        pen[k] = scad_derivative(pilot.beta[k].abs(), params);
    }
    let start = init
        .cloned()
        .unwrap_or_else(|| Array1::from(pilot.beta.clone()));

    let finish = |beta: Array1<f64>, iterations: usize, converged: bool| {
        let mut fit = GlmFit::from_beta(beta, link, iterations, false);
        fit.converged = converged;
        fit
    };

    match link {
        Link::Identity => {
            let beta = match gram_xty {
                Some((gram, xty)) => coordinate_descent(gram, xty, &pen, start),
                None => {
                    let (gram, xty) = gram_quantities(design, y, weights, nf);
                    coordinate_descent(&gram, &xty, &pen, start)
                }
            };
            Ok(finish(beta, pilot.iterations + 1, true))
        }
        Link::Logit => {
            let mut beta = start;
            for iter in 0..50 {
                let eta = design.dot(&beta);
                let mu = eta.mapv(expit);
                let mut z = Array1::zeros(n);
                let mut wv = Array1::zeros(n);
                for i in 0..n {
                    let v = (mu[i] * (1.0 - mu[i])).max(1e-10);
                    z[i] = eta[i] + (y[i] - mu[i]) / v;
                    wv[i] = v * weights.map_or(1.0, |w| w[i]);
                }
                let (gram, xty) = gram_quantities(design, z.view(), Some(wv.view()), nf);
                let next = coordinate_descent(&gram, &xty, &pen, beta.clone());
                let step = norm_inf((&next - &beta).view());
                beta = next;
                let norm = beta.dot(&beta).sqrt();
                if norm > 1e4 {
                    return Err(Error::Separation { norm });
                }
                if step < 1e-8 {
                    return Ok(finish(beta, iter + 1, true));
                }
            }
            Ok(finish(beta, 50, false))
        }
    }
}

fn gram_quantities(
    design: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    weights: Option<ArrayView1<'_, f64>>,
    nf: f64,
) -> (Array2<f64>, Array1<f64>) {
    let mut a = design.to_owned();
    let mut b = y.to_owned();
    if let Some(w) = weights {
        for (i, mut row) in a.outer_iter_mut().enumerate() {
            let s = w[i].max(0.0).sqrt();
            row.mapv_inplace(|v| v * s);
            b[i] *= s;
        }
    }
    let gram = a.t().dot(&a) / nf;
    let xty = a.t().dot(&b) / nf;
    (gram, xty)
}

/// Which sample(s) the outcome models are fit on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeMode {
    /// Per-arm fits on trial rows only.
    TrialOnly,
    /// Per-arm fits pooling trial rows with real-world rows that carry
    /// treatment and outcome.
    PooledRwe,
}

impl std::fmt::Display for OutcomeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OutcomeMode::TrialOnly => write!(f, "trial_only"),
            OutcomeMode::PooledRwe => write!(f, "pooled_rwe"),
        }
    }
}

/// Per-arm outcome-model fits plus the basis plumbing needed to predict on
/// new covariate rows.
#[derive(Debug, Clone)]
pub struct OutcomeModels {
    pub fit0: GlmFit,
    pub fit1: GlmFit,
    pub degree: BasisDegree,
    pub standardization: Standardization,
    pub covariate_names: Vec<String>,
    /// Penalty levels used per arm (0 when unpenalized).
    pub xi: (f64, f64),
}

impl OutcomeModels {
    /// Predicted outcome mean under arm `a` for raw covariate rows.
    pub fn predict_arm(&self, covariates: ArrayView2<'_, f64>, arm: u8) -> Result<Array1<f64>> {
        let z = self.standardization.apply(covariates)?;
        let basis = build_basis(z.view(), self.degree, &self.covariate_names);
        let design = with_intercept(basis.values.view());
        let fit = if arm == 1 { &self.fit1 } else { &self.fit0 };
        predict(fit, design.view())
    }
}

/// Prepend a column of ones.
pub fn with_intercept(values: ArrayView2<'_, f64>) -> Array2<f64> {
    let (n, k) = values.dim();
    let mut out = Array2::ones((n, k + 1));
    for i in 0..n {
        for j in 0..k {
            out[[i, j + 1]] = values[[i, j]];
        }
    }
    out
}

/// Row indices of each arm within (treatment, include-mask).
fn arm_rows(treatment: ArrayView1<'_, f64>, arm: f64) -> Vec<usize> {
    treatment
        .iter()
        .enumerate()
        .filter(|(_, &a)| a == arm)
        .map(|(i, _)| i)
        .collect()
}

fn stack_rows(sources: &[(ArrayView2<'_, f64>, &[usize])]) -> Array2<f64> {
    let k = sources[0].0.ncols();
    let total: usize = sources.iter().map(|(_, rows)| rows.len()).sum();
    let mut out = Array2::zeros((total, k));
    let mut r = 0;
    for (mat, rows) in sources {
        for &i in *rows {
            out.row_mut(r).assign(&mat.row(i));
            r += 1;
        }
    }
    out
}

fn gather(v: ArrayView1<'_, f64>, rows: &[usize]) -> Array1<f64> {
    rows.iter().map(|&i| v[i]).collect()
}

/// Fit the two arm-specific outcome models on the sieve basis.
///
/// The basis is standardized against the design-weighted real-world moments
/// and an unpenalized intercept is prepended. `penalized` switches on the
/// SCAD path; `xi_a = None` then picks each arm's level by 5-fold
/// cross-validated prediction error over an automatic grid.
pub fn fit_outcome_models(
    dataset: &IntegratedDataset,
    degree: BasisDegree,
    mode: OutcomeMode,
    penalized: bool,
    xi_a: Option<(f64, f64)>,
    seed: u64,
) -> Result<OutcomeModels> {
    if mode == OutcomeMode::PooledRwe && !dataset.rwe.has_outcomes() {
        return Err(Error::InvalidConfig(
            "pooled outcome fitting needs treatment and outcome columns in the real-world sample"
                .into(),
        ));
    }
    let link = match dataset.outcome_type {
        OutcomeType::Continuous => Link::Identity,
        OutcomeType::Binary => Link::Logit,
    };
    let standardization = Standardization::fit(
        dataset.rwe.covariates.view(),
        dataset.rwe.design_weights.view(),
        &dataset.rwe.covariate_names,
    )?;

    let trial_z = standardization.apply(dataset.trial.covariates.view())?;
    let trial_basis = build_basis(trial_z.view(), degree, dataset.covariate_names());
    let trial_design = with_intercept(trial_basis.values.view());

    let (rwe_design, rwe_a, rwe_y) = if mode == OutcomeMode::PooledRwe {
        let z = standardization.apply(dataset.rwe.covariates.view())?;
        let b = build_basis(z.view(), degree, dataset.covariate_names());
        (
            Some(with_intercept(b.values.view())),
            dataset.rwe.treatment.clone(),
            dataset.rwe.outcome.clone(),
        )
    } else {
        (None, None, None)
    };

    let mut fits = Vec::with_capacity(2);
    let mut xi_used = [0.0_f64; 2];
    for arm in 0..2u8 {
        let arm_f = arm as f64;
        let trial_rows = arm_rows(dataset.trial.treatment.view(), arm_f);
        let rwe_rows = match &rwe_a {
            Some(ra) => arm_rows(ra.view(), arm_f),
            None => Vec::new(),
        };
        let cols = trial_design.ncols();
        let mut design = Array2::zeros((trial_rows.len() + rwe_rows.len(), cols));
        let mut y = Array1::zeros(design.nrows());
        let mut r = 0;
        for &i in &trial_rows {
            design.row_mut(r).assign(&trial_design.row(i));
            y[r] = dataset.trial.outcome[i];
            r += 1;
        }
        if let (Some(rd), Some(ry)) = (&rwe_design, &rwe_y) {
            for &i in &rwe_rows {
                design.row_mut(r).assign(&rd.row(i));
                y[r] = ry[i];
                r += 1;
            }
        }
        if design.nrows() < design.ncols() {
            return Err(Error::ArmTooSmall {
                arm,
                rows: design.nrows(),
                cols: design.ncols(),
            });
        }
        let fit = if !penalized {
            fit_glm(design.view(), y.view(), link, None)?
        } else {
            let xi = match xi_a {
                Some(pair) => {
                    if arm == 1 {
                        pair.1
                    } else {
                        pair.0
                    }
                }
                None => select_outcome_xi(design.view(), y.view(), link, seed ^ arm as u64)?,
            };
            xi_used[arm as usize] = xi;
            fit_scad_glm(design.view(), y.view(), link, ScadParams::new(xi), None)?
        };
        fits.push(fit);
    }
    if let Some(pair) = xi_a {
        xi_used = [pair.0, pair.1];
    }
    let fit1 = fits.pop().expect("two fits");
    let fit0 = fits.pop().expect("two fits");
    Ok(OutcomeModels {
        fit0,
        fit1,
        degree,
        standardization,
        covariate_names: dataset.covariate_names().to_vec(),
        xi: (xi_used[0], xi_used[1]),
    })
}

/// Pick ξ for one arm's penalized outcome fit by 5-fold CV on held-out
/// squared prediction error, over a grid scaled to the pilot problem.
fn select_outcome_xi(
    design: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    link: Link,
    seed: u64,
) -> Result<f64> {
    let n = design.nrows();
    let folds = 5.min(n);
    if folds < 2 {
        return Ok(0.0);
    }
    // Grid scale: the largest (1/n)|x_kᵀ(y − ȳ)| over penalized columns — the
    // smallest level that zeroes everything in the lasso subproblem.
    let ybar = y.mean().unwrap_or(0.0);
    let mut scale = 0.0_f64;
    for k in 1..design.ncols() {
        let c: f64 = design
            .column(k)
            .iter()
            .zip(y.iter())
            .map(|(&x, &yi)| x * (yi - ybar))
            .sum::<f64>()
            / n as f64;
        scale = scale.max(c.abs());
    }
    if scale == 0.0 {
        return Ok(0.0);
    }
    let grid: Vec<f64> = (0..10)
        .map(|i| {
            let t = i as f64 / 9.0;
            scale * 10f64.powf(-3.0 * (1.0 - t))
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = stream_rng(seed, Stream::CrossValidation, 1);
        order.shuffle(&mut rng);
    }
    let fold_of: Vec<usize> = {
        let mut f = vec![0usize; n];
        for (pos, &row) in order.iter().enumerate() {
            f[row] = pos * folds / n;
        }
        f
    };

    let mut losses = vec![0.0_f64; grid.len()];
    for fold in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != fold).collect();
        let held: Vec<usize> = (0..n).filter(|&i| fold_of[i] == fold).collect();
        if held.is_empty() || train.len() < design.ncols() {
            // Fold too small to fit; fall back to no penalty.
            return Ok(0.0);
        }
        let tr_design = stack_rows(&[(design, &train)]);
        let tr_y = gather(y, &train);
        let te_design = stack_rows(&[(design, &held)]);
        let te_y = gather(y, &held);
        // One pilot per fold; every penalty level reuses it (and, for the
        // identity link, the Gram system) and warm-starts from its neighbour.
        let pilot = match fit_glm(tr_design.view(), tr_y.view(), link, None) {
            Ok(f) => f,
            Err(_) => {
                for l in losses.iter_mut() {
                    *l = f64::INFINITY;
                }
                continue;
            }
        };
        let gram_xty = match link {
            Link::Identity => Some(gram_quantities(
                tr_design.view(),
                tr_y.view(),
                None,
                tr_design.nrows() as f64,
            )),
            Link::Logit => None,
        };
        let mut warm = Array1::from(pilot.beta.clone());
        for (gi, &xi) in grid.iter().enumerate() {
            if !losses[gi].is_finite() {
                continue;
            }
            let fit = if xi == 0.0 {
                Ok(pilot.clone())
            } else {
                fit_scad_from_pilot(
                    tr_design.view(),
                    tr_y.view(),
                    link,
                    ScadParams::new(xi),
                    None,
                    &pilot,
                    Some(&warm),
                    gram_xty.as_ref().map(|(g, x)| (g, x)),
                )
            };
            match fit {
                Ok(fit) => {
                    warm = Array1::from(fit.beta.clone());
                    let pred = predict(&fit, te_design.view())?;
                    losses[gi] += pred
                        .iter()
                        .zip(te_y.iter())
                        .map(|(&p, &t)| (p - t) * (p - t))
                        .sum::<f64>();
                }
                Err(_) => {
                    losses[gi] = f64::INFINITY;
                    warm = Array1::from(pilot.beta.clone());
                }
            }
        }
    }
    let mut best = 0usize;
    for gi in 1..grid.len() {
        if losses[gi] < losses[best] || (losses[gi] == losses[best] && grid[gi] < grid[best]) {
            best = gi;
        }
    }
    if !losses[best].is_finite() {
        return Ok(0.0);
    }
    Ok(grid[best])
}
