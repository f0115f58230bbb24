//! Uncertainty quantification: bootstrap and plug-in variance, Wald
//! intervals.
//!
//! The bootstrap resamples both data sources with replacement and re-runs
//! the entire estimation pipeline — including any cross-validated tuning —
//! on each resample. The plug-in alternative evaluates the asymptotic
//! variance formula for the augmented calibration estimator directly,
//! using kernel regression (continuous outcomes) or the Bernoulli variance
//! function (binary outcomes) for the conditional outcome variances.

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::data::{IntegratedDataset, OutcomeType, RweSample, TrialSample};
use crate::error::{Error, Result};
use crate::estimators::{
    assemble_augmented, calibration_weights_for, run_estimator, Estimator, EstimatorConfig,
};
use crate::exec;
use crate::regression::{fit_outcome_models, OutcomeModels};
use crate::rng::{derive_seed, stream_rng, Stream};
use rand::Rng;

/// Normal quantile for two-sided 95% intervals.
pub const Z_975: f64 = 1.959963984540054;

/// 95% Wald interval around a point estimate.
pub fn wald_ci(tau_hat: f64, se: f64) -> (f64, f64) {
    (tau_hat - Z_975 * se, tau_hat + Z_975 * se)
}

/// Result of a bootstrap run.
#[derive(Debug, Clone, Serialize)]
pub struct BootstrapVariance {
    /// Requested number of resamples.
    pub b: usize,
    /// Resamples on which the pipeline failed and was dropped.
    pub failures: usize,
    pub variance: f64,
    pub se: f64,
    /// Point estimates from the successful resamples.
    #[serde(skip)]
    pub replicates: Vec<f64>,
}

/// Draw one nonparametric resample: trial rows and real-world rows are
/// drawn independently, with replacement, preserving sample sizes. Design
/// weights travel with their rows.
fn resample_dataset<R: Rng>(dataset: &IntegratedDataset, rng: &mut R) -> IntegratedDataset {
    let trial = &dataset.trial;
    let rwe = &dataset.rwe;
    let n = trial.n();
    let m = rwe.m();
    let p = trial.p();

    let trial_idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let rwe_idx: Vec<usize> = (0..m).map(|_| rng.random_range(0..m)).collect();

    let mut t_cov = Array2::zeros((n, p));
    let mut t_a = Array1::zeros(n);
    let mut t_y = Array1::zeros(n);
    for (row, &src) in trial_idx.iter().enumerate() {
        for j in 0..p {
            t_cov[[row, j]] = trial.covariates[[src, j]];
        }
        t_a[row] = trial.treatment[src];
        t_y[row] = trial.outcome[src];
    }

    let mut r_cov = Array2::zeros((m, p));
    let mut r_d = Array1::zeros(m);
    let mut r_a = rwe.treatment.as_ref().map(|_| Array1::zeros(m));
    let mut r_y = rwe.outcome.as_ref().map(|_| Array1::zeros(m));
    for (row, &src) in rwe_idx.iter().enumerate() {
        for j in 0..p {
            r_cov[[row, j]] = rwe.covariates[[src, j]];
        }
        r_d[row] = rwe.design_weights[src];
        if let (Some(dst), Some(a)) = (r_a.as_mut(), rwe.treatment.as_ref()) {
            dst[row] = a[src];
        }
        if let (Some(dst), Some(y)) = (r_y.as_mut(), rwe.outcome.as_ref()) {
            dst[row] = y[src];
        }
    }

    IntegratedDataset {
        trial: TrialSample {
            covariates: t_cov,
            treatment: t_a,
            outcome: t_y,
            covariate_names: trial.covariate_names.clone(),
            known_pi_a: trial.known_pi_a,
        },
        rwe: RweSample {
            covariates: r_cov,
            design_weights: r_d,
            covariate_names: rwe.covariate_names.clone(),
            treatment: r_a,
            outcome: r_y,
        },
        outcome_type: dataset.outcome_type,
    }
}

/// Nonparametric bootstrap standard error for any estimator.
///
/// Each resample re-runs the full pipeline with a fresh cross-validation
/// seed, so tuning variability is part of the variance. Resamples on which
/// the pipeline fails (for example a singular calibration system after an
/// unlucky draw) are dropped and counted; more than `b / 2` failures, or
/// fewer than two successes, abort with [`Error::TooManyFailures`].
pub fn bootstrap_variance(
    dataset: &IntegratedDataset,
    config: &EstimatorConfig,
    b: usize,
    seed: u64,
) -> Result<BootstrapVariance> {
    if b < 2 {
        return Err(Error::InvalidConfig(format!(
            "bootstrap needs at least 2 resamples, got {b}"
        )));
    }
    let draws: Vec<Result<f64>> = exec::map_indexed(b, |idx| {
        let mut rng = stream_rng(seed, Stream::Bootstrap, idx as u64);
        let resampled = resample_dataset(dataset, &mut rng);
        let mut cfg = config.clone();
        cfg.seed = derive_seed(seed, Stream::CrossValidation, idx as u64);
        run_estimator(&resampled, &cfg).map(|r| r.tau_hat)
    });
    let mut replicates = Vec::with_capacity(b);
    let mut failures = 0usize;
    for draw in draws {
        match draw {
            Ok(tau) => replicates.push(tau),
            Err(_) => failures += 1,
        }
    }
    if failures > b / 2 || replicates.len() < 2 {
        return Err(Error::TooManyFailures { failures, total: b });
    }
    let k = replicates.len() as f64;
    let mean = replicates.iter().sum::<f64>() / k;
    let variance = replicates.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (k - 1.0);
    Ok(BootstrapVariance {
        b,
        failures,
        variance,
        se: variance.sqrt(),
        replicates,
    })
}

/// Welch (unequal-variance) standard error of the trial difference in
/// arm means: `√(s₁²/n₁ + s₀²/n₀)`.
pub fn welch_se(trial: &TrialSample) -> Result<f64> {
    let arm = |a: f64| -> Result<(f64, f64)> {
        let ys: Vec<f64> = trial
            .treatment
            .iter()
            .zip(trial.outcome.iter())
            .filter(|(t, _)| **t == a)
            .map(|(_, y)| *y)
            .collect();
        if ys.len() < 2 {
            return Err(Error::ArmTooSmall {
                arm: a as u8,
                rows: ys.len(),
                cols: 2,
            });
        }
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok((var, n))
    };
    let (v1, n1) = arm(1.0)?;
    let (v0, n0) = arm(0.0)?;
    Ok((v1 / n1 + v0 / n0).sqrt())
}

/// Plug-in variance report.
#[derive(Debug, Clone, Serialize)]
pub struct PluginVariance {
    pub variance: f64,
    pub se: f64,
    /// Trial-side contribution (weighted conditional outcome variances).
    pub trial_term: f64,
    /// Population-side contribution (dispersion of the predicted effect).
    pub projection_term: f64,
}

/// Evaluate the asymptotic variance of the augmented estimator given its
/// ingredients:
///
/// ```text
/// V̂ = Σ_i q̂_i² { V̂₁(X_i)/π_A + V̂₀(X_i)/(1−π_A) }
///   + N̂⁻² Σ_j d_j² ( τ̂(X_j) − τ̂ )²
/// ```
///
/// with V̂_a the conditional variance of the outcome in arm `a`: a
/// Nadaraya–Watson smooth of squared residuals for continuous outcomes,
/// μ̂_a(1−μ̂_a) for binary ones. τ̂(X_j) = μ̂₁(X_j) − μ̂₀(X_j) on the
/// real-world rows and N̂ = Σ_j d_j.
pub fn plugin_variance_from_parts(
    dataset: &IntegratedDataset,
    weights: &Array1<f64>,
    models: &OutcomeModels,
    tau_hat: f64,
) -> Result<PluginVariance> {
    let trial = &dataset.trial;
    let pi_a = trial.pi_a();
    let v1 = conditional_variance(dataset, models, 1)?;
    let v0 = conditional_variance(dataset, models, 0)?;
    let mut trial_term = 0.0;
    for i in 0..trial.n() {
        trial_term += weights[i].powi(2) * (v1[i] / pi_a + v0[i] / (1.0 - pi_a));
    }

    let mu1 = models.predict_arm(dataset.rwe.covariates.view(), 1)?;
    let mu0 = models.predict_arm(dataset.rwe.covariates.view(), 0)?;
    let d = &dataset.rwe.design_weights;
    let n_hat = d.sum();
    let mut projection_term = 0.0;
    for j in 0..dataset.rwe.m() {
        let tau_j = mu1[j] - mu0[j];
        projection_term += d[j].powi(2) * (tau_j - tau_hat).powi(2);
    }
    projection_term /= n_hat.powi(2);

    let variance = trial_term + projection_term;
    Ok(PluginVariance {
        variance,
        se: variance.sqrt(),
        trial_term,
        projection_term,
    })
}

/// Plug-in variance for the augmented calibration estimators, recomputing
/// the weights and outcome models the estimator itself would use.
pub fn plugin_variance_acw(
    dataset: &IntegratedDataset,
    config: &EstimatorConfig,
) -> Result<(f64, PluginVariance)> {
    let (degree, penalized) = match config.estimator {
        Estimator::Acw => (config.basis, false),
        Estimator::AcwSieve => (crate::basis::BasisDegree::Quadratic, true),
        other => {
            return Err(Error::InvalidConfig(format!(
                "plug-in variance applies to the augmented estimators, not '{other}'"
            )))
        }
    };
    let (weights, _sol) = calibration_weights_for(dataset, config)?;
    let models = fit_outcome_models(
        dataset,
        degree,
        config.outcome_mode,
        penalized,
        None,
        config.seed,
    )?;
    let tau_hat = assemble_augmented(dataset, &weights, &models)?;
    let plug = plugin_variance_from_parts(dataset, &weights, &models, tau_hat)?;
    Ok((tau_hat, plug))
}

/// Estimate V(Y | X, arm) at every trial point.
fn conditional_variance(
    dataset: &IntegratedDataset,
    models: &OutcomeModels,
    arm: u8,
) -> Result<Array1<f64>> {
    let trial = &dataset.trial;
    let mu = models.predict_arm(trial.covariates.view(), arm)?;
    match dataset.outcome_type {
        OutcomeType::Binary => Ok(mu.mapv(|m| m * (1.0 - m))),
        OutcomeType::Continuous => {
            let z = models.standardization.apply(trial.covariates.view())?;
            let rows: Vec<usize> = (0..trial.n())
                .filter(|&i| trial.treatment[i] == f64::from(arm))
                .collect();
            let sq_resid: Vec<f64> = rows
                .iter()
                .map(|&i| (trial.outcome[i] - mu[i]).powi(2))
                .collect();
            nadaraya_watson(z.view(), &rows, &sq_resid)
        }
    }
}

/// Nadaraya–Watson smoothing of `values` (attached to `source_rows` of the
/// standardized covariate matrix `z`) evaluated at every row of `z`.
///
/// Product Gaussian kernel; per-coordinate bandwidths follow Silverman's
/// rule on the source rows, `h_l = σ̂_l (4 / ((p+2) n_src))^{1/(p+4)}`,
/// floored away from zero so a within-arm constant coordinate cannot zero
/// the kernel outright. Kernel weights are normalized against the nearest
/// source point before exponentiation, so an evaluation point far outside
/// the source cloud degrades to a nearest-neighbor average instead of
/// underflowing to 0/0.
fn nadaraya_watson(
    z: ndarray::ArrayView2<'_, f64>,
    source_rows: &[usize],
    values: &[f64],
) -> Result<Array1<f64>> {
    let p = z.ncols();
    let n_src = source_rows.len();
    if n_src == 0 {
        return Err(Error::EmptyKernelNeighborhood { index: 0 });
    }
    let mut h = vec![0.0; p];
    let rate = (4.0 / ((p as f64 + 2.0) * n_src as f64)).powf(1.0 / (p as f64 + 4.0));
    for l in 0..p {
        let mean = source_rows.iter().map(|&i| z[[i, l]]).sum::<f64>() / n_src as f64;
        let ss = source_rows
            .iter()
            .map(|&i| (z[[i, l]] - mean).powi(2))
            .sum::<f64>();
        let sd = if n_src > 1 {
            (ss / (n_src as f64 - 1.0)).sqrt()
        } else {
            0.0
        };
        h[l] = (sd * rate).max(1e-6);
    }
    let mut quads = vec![0.0; n_src];
    let mut out = Array1::zeros(z.nrows());
    for i in 0..z.nrows() {
        let mut quad_min = f64::INFINITY;
        for (k, &j) in source_rows.iter().enumerate() {
            let mut quad = 0.0;
            for l in 0..p {
                let u = (z[[i, l]] - z[[j, l]]) / h[l];
                quad += u * u;
            }
            quads[k] = quad;
            quad_min = quad_min.min(quad);
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for (k, &quad) in quads.iter().enumerate() {
            let w = (-0.5 * (quad - quad_min)).exp();
            num += w * values[k];
            den += w;
        }
        out[i] = num / den;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{BasisDegree, Standardization};
    use crate::regression::{GlmFit, Link, OutcomeMode};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn wald_interval_is_symmetric_with_fixed_width() {
        let (lo, hi) = wald_ci(1.0, 0.5);
        assert_abs_diff_eq!((lo + hi) / 2.0, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(hi - lo, 2.0 * Z_975 * 0.5, epsilon = 1e-12);
    }

    #[test]
    fn wald_interval_reference_values() {
        let (lo, hi) = wald_ci(-0.083, 0.048);
        assert_abs_diff_eq!(lo, -0.083 - 1.959963984540054 * 0.048, epsilon = 1e-15);
        assert!((lo - (-0.177)).abs() < 5e-4);
        assert!((hi - 0.011).abs() < 5e-4);
    }

    fn names(p: usize) -> Vec<String> {
        (1..=p).map(|j| format!("x{j}")).collect()
    }

    #[test]
    fn welch_se_matches_hand_computation() {
        // Treated outcomes {1, 3}: s² = 2, n = 2. Control {0, 2, 4}:
        // s² = 4, n = 3. SE = √(2/2 + 4/3).
        let trial = TrialSample {
            covariates: Array2::zeros((5, 1)),
            treatment: array![1.0, 1.0, 0.0, 0.0, 0.0],
            outcome: array![1.0, 3.0, 0.0, 2.0, 4.0],
            covariate_names: names(1),
            known_pi_a: None,
        };
        let se = welch_se(&trial).unwrap();
        assert_abs_diff_eq!(se, (1.0_f64 + 4.0 / 3.0).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn welch_se_rejects_singleton_arm() {
        let trial = TrialSample {
            covariates: Array2::zeros((3, 1)),
            treatment: array![1.0, 0.0, 0.0],
            outcome: array![1.0, 0.0, 2.0],
            covariate_names: names(1),
            known_pi_a: None,
        };
        assert!(matches!(
            welch_se(&trial),
            Err(Error::ArmTooSmall { arm: 1, .. })
        ));
    }

    fn small_dataset() -> IntegratedDataset {
        let trial = TrialSample {
            covariates: array![
                [0.2],
                [1.4],
                [-0.6],
                [2.1],
                [0.9],
                [1.7],
                [0.4],
                [-0.1],
                [1.1],
                [0.7]
            ],
            treatment: array![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
            outcome: array![5.1, 3.2, 4.4, 2.9, 6.0, 3.8, 4.9, 2.5, 5.5, 3.1],
            covariate_names: names(1),
            known_pi_a: Some(0.5),
        };
        let rwe = RweSample {
            covariates: array![[0.5], [1.0], [1.5], [0.0], [2.0], [0.8], [1.2], [0.3]],
            design_weights: Array1::from_elem(8, 5.0),
            covariate_names: names(1),
            treatment: None,
            outcome: None,
        };
        IntegratedDataset {
            trial,
            rwe,
            outcome_type: OutcomeType::Continuous,
        }
    }

    #[test]
    fn bootstrap_is_deterministic_and_positive() {
        let ds = small_dataset();
        let cfg = EstimatorConfig::new(Estimator::Naive, 9);
        let a = bootstrap_variance(&ds, &cfg, 40, 123).unwrap();
        let b = bootstrap_variance(&ds, &cfg, 40, 123).unwrap();
        assert_eq!(a.replicates, b.replicates, "same seed, same resamples");
        assert!(a.se > 0.0);
        let c = bootstrap_variance(&ds, &cfg, 40, 124).unwrap();
        assert_ne!(a.replicates, c.replicates, "different seed differs");
    }

    #[test]
    fn bootstrap_rejects_tiny_b() {
        let ds = small_dataset();
        let cfg = EstimatorConfig::new(Estimator::Naive, 9);
        assert!(matches!(
            bootstrap_variance(&ds, &cfg, 1, 1),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn bootstrap_surfaces_pervasive_failures() {
        // A constant covariate makes standardization fail on every
        // resample, so the calibration estimator cannot run at all.
        let mut ds = small_dataset();
        ds.trial.covariates.fill(1.0);
        ds.rwe.covariates.fill(1.0);
        let cfg = EstimatorConfig::new(Estimator::Cw, 9);
        match bootstrap_variance(&ds, &cfg, 10, 5) {
            Err(Error::TooManyFailures { failures, total }) => {
                assert_eq!(failures, 10);
                assert_eq!(total, 10);
            }
            other => panic!("expected TooManyFailures, got {other:?}"),
        }
    }

    /// With constant residuals in each arm the kernel smooth is exact, so
    /// the whole formula can be checked by hand.
    #[test]
    fn plugin_variance_matches_hand_computation() {
        let ds = small_dataset();
        let n = ds.trial.n();
        let standardization = Standardization::fit(
            ds.rwe.covariates.view(),
            ds.rwe.design_weights.view(),
            &ds.rwe.covariate_names,
        )
        .unwrap();
        // Zero outcome models: residuals are the outcomes themselves. Make
        // outcomes constant per arm so squared residuals are constant and
        // any kernel average reproduces them exactly.
        let mut ds2 = ds.clone();
        for i in 0..n {
            ds2.trial.outcome[i] = if ds2.trial.treatment[i] == 1.0 { 3.0 } else { -2.0 };
        }
        // Covers the explicit ones column plus the single basis column.
        let zero = GlmFit {
            beta: vec![0.0, 0.0],
            link: Link::Identity,
            converged: true,
            iterations: 0,
            selected: vec![false, false],
            with_intercept: false,
        };
        let models = OutcomeModels {
            fit0: zero.clone(),
            fit1: zero,
            degree: BasisDegree::Linear,
            standardization,
            covariate_names: ds2.covariate_names().to_vec(),
            xi: (0.0, 0.0),
        };
        let weights = Array1::from_elem(n, 1.0 / n as f64);
        let tau_hat = 0.7;
        let plug = plugin_variance_from_parts(&ds2, &weights, &models, tau_hat).unwrap();

        // Trial term: Σ (1/n)² (9/0.5 + 4/0.5) = n (1/n²) · 26 = 26/n.
        let expected_trial = 26.0 / n as f64;
        assert_abs_diff_eq!(plug.trial_term, expected_trial, epsilon = 1e-10);
        // Projection term: predictions are zero, so τ̂(X_j) − τ̂ = −0.7 and
        // the sum is N̂⁻² Σ d² (0.49) with d ≡ 5, N̂ = 40, m = 8.
        let expected_proj = 8.0 * 25.0 * 0.49 / 1600.0;
        assert_abs_diff_eq!(plug.projection_term, expected_proj, epsilon = 1e-12);
        assert_abs_diff_eq!(
            plug.variance,
            expected_trial + expected_proj,
            epsilon = 1e-10
        );
    }

    #[test]
    fn binary_conditional_variance_is_bernoulli() {
        let mut ds = small_dataset();
        ds.outcome_type = OutcomeType::Binary;
        for i in 0..ds.trial.n() {
            ds.trial.outcome[i] = f64::from(i % 2 == 0);
        }
        let standardization = Standardization::fit(
            ds.rwe.covariates.view(),
            ds.rwe.design_weights.view(),
            &ds.rwe.covariate_names,
        )
        .unwrap();
        // All-zero logistic coefficients give μ = 1/2 everywhere, hence
        // V = 1/4.
        let half = GlmFit {
            beta: vec![0.0, 0.0],
            link: Link::Logit,
            converged: true,
            iterations: 0,
            selected: vec![false, false],
            with_intercept: false,
        };
        let models = OutcomeModels {
            fit0: half.clone(),
            fit1: half,
            degree: BasisDegree::Linear,
            standardization,
            covariate_names: ds.covariate_names().to_vec(),
            xi: (0.0, 0.0),
        };
        let v = conditional_variance(&ds, &models, 1).unwrap();
        for &vi in v.iter() {
            assert_abs_diff_eq!(vi, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn kernel_smooth_of_constant_is_constant() {
        let z = array![[0.0], [0.5], [1.0], [1.5], [2.0]];
        let rows = vec![0, 2, 4];
        let vals = vec![3.0, 3.0, 3.0];
        let out = nadaraya_watson(z.view(), &rows, &vals).unwrap();
        for &o in out.iter() {
            assert_abs_diff_eq!(o, 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn kernel_smooth_survives_far_outlier() {
        // The last evaluation point sits hundreds of bandwidths from every
        // source; raw kernel sums underflow there, but the stabilized form
        // must return the nearest source's value.
        let z = array![[0.0], [0.1], [0.2], [500.0]];
        let rows = vec![0, 1, 2];
        let vals = vec![1.0, 2.0, 3.0];
        let out = nadaraya_watson(z.view(), &rows, &vals).unwrap();
        assert!(out[3].is_finite());
        assert_abs_diff_eq!(out[3], 3.0, epsilon = 1e-9);
    }

    #[test]
    fn kernel_smooth_interpolates_locally() {
        // Two well-separated clusters with different values: evaluation
        // inside a cluster should be dominated by that cluster's value.
        // Ten points per cluster keep the rule-of-thumb bandwidth well
        // below the cluster separation.
        let mut rows = Vec::new();
        let mut vals = Vec::new();
        let mut pts = Vec::new();
        for k in 0..10 {
            pts.push(0.02 * k as f64);
            vals.push(1.0);
        }
        for k in 0..10 {
            pts.push(10.0 + 0.02 * k as f64);
            vals.push(9.0);
        }
        for i in 0..20 {
            rows.push(i);
        }
        let z = Array2::from_shape_vec((20, 1), pts).unwrap();
        let out = nadaraya_watson(z.view(), &rows, &vals).unwrap();
        assert!(out[0] < 1.5, "near cluster A: {}", out[0]);
        assert!(out[19] > 8.5, "near cluster B: {}", out[19]);
    }

    #[test]
    fn plugin_variance_runs_end_to_end_on_acw() {
        let ds = small_dataset();
        let mut cfg = EstimatorConfig::new(Estimator::Acw, 3);
        cfg.basis = BasisDegree::Linear;
        cfg.outcome_mode = OutcomeMode::TrialOnly;
        let (tau, plug) = plugin_variance_acw(&ds, &cfg).unwrap();
        assert!(tau.is_finite());
        assert!(plug.variance > 0.0);
        assert!(plug.se > 0.0);
        assert_abs_diff_eq!(
            plug.variance,
            plug.trial_term + plug.projection_term,
            epsilon = 1e-12
        );
    }
}
