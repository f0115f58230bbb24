//! The five point estimators of the population average treatment effect.
//!
//! All of them contrast the two trial arms; they differ in how trial rows
//! are reweighted toward the target population and whether outcome
//! regressions absorb residual confounding of trial participation:
//!
//! * naive — difference in arm means, no reweighting;
//! * ipsw — inverse probability of trial participation, estimated by
//!   logistic regression on the stacked trial + real-world sample;
//! * cw — calibration weights balancing basis moments to the
//!   design-weighted population;
//! * acw — cw plus outcome-regression augmentation (doubly robust);
//! * acw_sieve — acw on the quadratic sieve basis with SCAD-penalized
//!   selection of both the balance constraints and the outcome terms.

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::basis::{build_basis, target_moments, BasisDegree, Standardization};
use crate::calibration::{
    cv_select_xi, default_xi_grid, solve_dual, solve_penalized_dual, CalibrationSolution,
    CalibrationSummary, ScadParams, SolveOptions,
};
use crate::data::{IntegratedDataset, OutcomeType};
use crate::error::{Error, Result};
use crate::regression::{
    fit_glm, fit_outcome_models, predict, GlmFit, Link, OutcomeMode, OutcomeModels,
};

/// Estimator identifiers, also the CLI vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Naive,
    Ipsw,
    Cw,
    Acw,
    AcwSieve,
}

impl Estimator {
    pub const ALL: [Estimator; 5] = [
        Estimator::Naive,
        Estimator::Ipsw,
        Estimator::Cw,
        Estimator::Acw,
        Estimator::AcwSieve,
    ];
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Estimator::Naive => "naive",
            Estimator::Ipsw => "ipsw",
            Estimator::Cw => "cw",
            Estimator::Acw => "acw",
            Estimator::AcwSieve => "acw_sieve",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Estimator::Naive),
            "ipsw" => Ok(Estimator::Ipsw),
            "cw" => Ok(Estimator::Cw),
            "acw" => Ok(Estimator::Acw),
            "acw-sieve" | "acw_sieve" => Ok(Estimator::AcwSieve),
            other => Err(Error::InvalidConfig(format!("unknown estimator '{other}'"))),
        }
    }
}

/// Everything needed to (re)run one estimator, including on bootstrap
/// resamples.
#[derive(Debug, Clone, Serialize)]
pub struct EstimatorConfig {
    pub estimator: Estimator,
    /// Balance basis for cw/acw (the sieve estimator always uses the
    /// quadratic basis; naive/ipsw ignore this).
    pub basis: BasisDegree,
    pub outcome_mode: OutcomeMode,
    /// Calibration penalty grid override; `None` uses the automatic grid.
    pub xi_grid: Option<Vec<f64>>,
    /// Seed for cross-validation fold shuffles.
    pub seed: u64,
}

impl EstimatorConfig {
    pub fn new(estimator: Estimator, seed: u64) -> Self {
        EstimatorConfig {
            estimator,
            basis: BasisDegree::Linear,
            outcome_mode: OutcomeMode::TrialOnly,
            xi_grid: None,
            seed,
        }
    }
}

/// Echo of the run configuration carried in every report.
#[derive(Debug, Clone, Serialize)]
pub struct ConfigEcho {
    pub estimator: Estimator,
    pub outcome_type: OutcomeType,
    pub basis: BasisDegree,
    pub outcome_mode: OutcomeMode,
    pub n_trial: usize,
    pub m_rwe: usize,
    pub pi_a: f64,
    pub seed: u64,
}

/// Nuisance-fit diagnostics carried alongside the point estimate.
#[derive(Debug, Clone, Default, Serialize)]
pub struct NuisanceDiagnostics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration_xi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampling_model: Option<GlmFit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome_fit_0: Option<GlmFit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome_fit_1: Option<GlmFit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome_xi: Option<(f64, f64)>,
}

/// A point estimate with its uncertainty (when computed) and diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub estimator: Estimator,
    pub tau_hat: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci95: Option<(f64, f64)>,
    pub nuisance: NuisanceDiagnostics,
    pub config_echo: ConfigEcho,
}

fn echo(dataset: &IntegratedDataset, config: &EstimatorConfig, basis: BasisDegree) -> ConfigEcho {
    ConfigEcho {
        estimator: config.estimator,
        outcome_type: dataset.outcome_type,
        basis,
        outcome_mode: config.outcome_mode,
        n_trial: dataset.trial.n(),
        m_rwe: dataset.rwe.m(),
        pi_a: dataset.trial.pi_a(),
        seed: config.seed,
    }
}

/// Difference in trial arm means.
pub fn estimate_naive(
    dataset: &IntegratedDataset,
    config: &EstimatorConfig,
) -> Result<EstimateReport> {
    let trial = &dataset.trial;
    let (mut sum1, mut n1, mut sum0, mut n0) = (0.0, 0usize, 0.0, 0usize);
    for (a, y) in trial.treatment.iter().zip(trial.outcome.iter()) {
        if *a == 1.0 {
            sum1 += y;
            n1 += 1;
        } else {
            sum0 += y;
            n0 += 1;
        }
    }
    if n1 == 0 {
        return Err(Error::ArmEmpty { arm: 1 });
    }
    if n0 == 0 {
        return Err(Error::ArmEmpty { arm: 0 });
    }
    Ok(EstimateReport {
        estimator: Estimator::Naive,
        tau_hat: sum1 / n1 as f64 - sum0 / n0 as f64,
        se: None,
        ci95: None,
        nuisance: NuisanceDiagnostics::default(),
        config_echo: echo(dataset, config, config.basis),
    })
}

/// Inverse probability of sampling weighting.
///
/// The participation probability is fit by logistic regression on the
/// stacked sample — trial rows labeled 1 with unit weight, real-world rows
/// labeled 0 carrying their design weight — over an intercept plus the
/// standardized linear covariates. The estimate is the difference of
/// within-arm weighted outcome means with weights 1/π̂.
pub fn estimate_ipsw(
    dataset: &IntegratedDataset,
    config: &EstimatorConfig,
) -> Result<EstimateReport> {
    let trial = &dataset.trial;
    let rwe = &dataset.rwe;
    let standardization = Standardization::fit(
        rwe.covariates.view(),
        rwe.design_weights.view(),
        &rwe.covariate_names,
    )?;
    let trial_z = standardization.apply(trial.covariates.view())?;
    let rwe_z = standardization.apply(rwe.covariates.view())?;

    let n = trial.n();
    let m = rwe.m();
    let p = trial.p();
    let mut design = Array2::ones((n + m, p + 1));
    let mut label = Array1::zeros(n + m);
    let mut weight = Array1::ones(n + m);
    for i in 0..n {
        for j in 0..p {
            design[[i, j + 1]] = trial_z[[i, j]];
        }
        label[i] = 1.0;
    }
    for i in 0..m {
        for j in 0..p {
            design[[n + i, j + 1]] = rwe_z[[i, j]];
        }
        weight[n + i] = rwe.design_weights[i];
    }
    let fit = fit_glm(design.view(), label.view(), Link::Logit, Some(weight.view()))?;
    let pi_hat = predict(&fit, design.view())?;

    let (mut num1, mut den1, mut num0, mut den0) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let w = 1.0 / pi_hat[i].max(1e-300);
        if trial.treatment[i] == 1.0 {
            num1 += w * trial.outcome[i];
            den1 += w;
        } else {
            num0 += w * trial.outcome[i];
            den0 += w;
        }
    }
    if den1 == 0.0 {
        return Err(Error::ArmEmpty { arm: 1 });
    }
    if den0 == 0.0 {
        return Err(Error::ArmEmpty { arm: 0 });
    }
    Ok(EstimateReport {
        estimator: Estimator::Ipsw,
        tau_hat: num1 / den1 - num0 / den0,
        se: None,
        ci95: None,
        nuisance: NuisanceDiagnostics {
            sampling_model: Some(fit),
            ..Default::default()
        },
        config_echo: echo(dataset, config, BasisDegree::Linear),
    })
}

/// Shared calibration plumbing: standardize on the real-world design
/// weights, expand the basis on both samples, and return the trial basis,
/// target moments, and standardization.
struct CalibrationPieces {
    trial_basis: crate::basis::BasisMatrix,
    targets: Array1<f64>,
}

fn calibration_pieces(dataset: &IntegratedDataset, degree: BasisDegree) -> Result<CalibrationPieces> {
    let standardization = Standardization::fit(
        dataset.rwe.covariates.view(),
        dataset.rwe.design_weights.view(),
        &dataset.rwe.covariate_names,
    )?;
    let trial_z = standardization.apply(dataset.trial.covariates.view())?;
    let trial_basis = build_basis(trial_z.view(), degree, dataset.covariate_names());
    let rwe_z = standardization.apply(dataset.rwe.covariates.view())?;
    let rwe_basis = build_basis(rwe_z.view(), degree, dataset.covariate_names());
    let targets = target_moments(&rwe_basis, dataset.rwe.design_weights.view())?;
    Ok(CalibrationPieces {
        trial_basis,
        targets,
    })
}

/// Weighted arm contrast Σ q_i { A_i Y_i/π_A − (1−A_i)Y_i/(1−π_A) }.
fn weighted_contrast(dataset: &IntegratedDataset, weights: &Array1<f64>) -> f64 {
    let trial = &dataset.trial;
    let pi_a = trial.pi_a();
    trial
        .treatment
        .iter()
        .zip(trial.outcome.iter())
        .zip(weights.iter())
        .map(|((&a, &y), &q)| q * (a * y / pi_a - (1.0 - a) * y / (1.0 - pi_a)))
        .sum()
}

/// Calibration weighting on the requested basis.
pub fn estimate_cw(
    dataset: &IntegratedDataset,
    config: &EstimatorConfig,
) -> Result<EstimateReport> {
    let pieces = calibration_pieces(dataset, config.basis)?;
    let sol = solve_dual(&pieces.trial_basis, pieces.targets.view(), SolveOptions::default())?;
    let tau_hat = weighted_contrast(dataset, &sol.weights);
    Ok(EstimateReport {
        estimator: Estimator::Cw,
        tau_hat,
        se: None,
        ci95: None,
        nuisance: NuisanceDiagnostics {
            calibration: Some(sol.summary(&pieces.trial_basis.names)),
            ..Default::default()
        },
        config_echo: echo(dataset, config, config.basis),
    })
}

/// The augmented estimate given calibration weights and outcome models:
/// weighted residual contrast plus the design-weighted mean predicted
/// effect.
pub(crate) fn assemble_augmented(
    dataset: &IntegratedDataset,
    weights: &Array1<f64>,
    models: &OutcomeModels,
) -> Result<f64> {
    let trial = &dataset.trial;
    let pi_a = trial.pi_a();
    let mu1_trial = models.predict_arm(trial.covariates.view(), 1)?;
    let mu0_trial = models.predict_arm(trial.covariates.view(), 0)?;
    let mut residual_term = 0.0;
    for i in 0..trial.n() {
        let a = trial.treatment[i];
        let y = trial.outcome[i];
        residual_term += weights[i]
            * (a * (y - mu1_trial[i]) / pi_a - (1.0 - a) * (y - mu0_trial[i]) / (1.0 - pi_a));
    }
    let mu1_rwe = models.predict_arm(dataset.rwe.covariates.view(), 1)?;
    let mu0_rwe = models.predict_arm(dataset.rwe.covariates.view(), 0)?;
    let d = &dataset.rwe.design_weights;
    let total = d.sum();
    let projection: f64 = d
        .iter()
        .zip(mu1_rwe.iter().zip(mu0_rwe.iter()))
        .map(|(&dj, (&m1, &m0))| dj * (m1 - m0))
        .sum::<f64>()
        / total;
    Ok(residual_term + projection)
}

/// Augmented calibration weighting with externally supplied outcome models;
/// `estimate_acw` fits them, tests can inject alternatives.
pub fn estimate_acw_with_models(
    dataset: &IntegratedDataset,
    config: &EstimatorConfig,
    models: &OutcomeModels,
) -> Result<EstimateReport> {
    let pieces = calibration_pieces(dataset, config.basis)?;
    let sol = solve_dual(&pieces.trial_basis, pieces.targets.view(), SolveOptions::default())?;
    let tau_hat = assemble_augmented(dataset, &sol.weights, models)?;
    Ok(EstimateReport {
        estimator: Estimator::Acw,
        tau_hat,
        se: None,
        ci95: None,
        nuisance: NuisanceDiagnostics {
            calibration: Some(sol.summary(&pieces.trial_basis.names)),
            outcome_fit_0: Some(models.fit0.clone()),
            outcome_fit_1: Some(models.fit1.clone()),
            ..Default::default()
        },
        config_echo: echo(dataset, config, config.basis),
    })
}

/// Augmented calibration weighting: unpenalized calibration and outcome
/// models on the same basis.
pub fn estimate_acw(
    dataset: &IntegratedDataset,
    config: &EstimatorConfig,
) -> Result<EstimateReport> {
    let models = fit_outcome_models(
        dataset,
        config.basis,
        config.outcome_mode,
        false,
        None,
        config.seed,
    )?;
    estimate_acw_with_models(dataset, config, &models)
}

/// Augmented calibration weighting on the quadratic sieve basis with
/// SCAD-penalized multiplier selection (level by cross-validation) and
/// SCAD-penalized outcome models.
pub fn estimate_acw_sieve(
    dataset: &IntegratedDataset,
    config: &EstimatorConfig,
) -> Result<EstimateReport> {
    let degree = BasisDegree::Quadratic;
    let pieces = calibration_pieces(dataset, degree)?;
    let grid_owned;
    let grid: &[f64] = match &config.xi_grid {
        Some(g) => g,
        None => {
            grid_owned = default_xi_grid(&pieces.trial_basis, pieces.targets.view());
            &grid_owned
        }
    };
    let (xi_star, _losses) = cv_select_xi(
        &pieces.trial_basis,
        pieces.targets.view(),
        grid,
        5,
        config.seed,
    )?;
    let init = solve_dual(&pieces.trial_basis, pieces.targets.view(), SolveOptions::default())?;
    let sol = solve_penalized_dual(
        &pieces.trial_basis,
        pieces.targets.view(),
        ScadParams::new(xi_star),
        SolveOptions::default(),
        Some(init.lambda.view()),
    )?;
    let models = fit_outcome_models(
        dataset,
        degree,
        config.outcome_mode,
        true,
        None,
        config.seed,
    )?;
    let tau_hat = assemble_augmented(dataset, &sol.weights, &models)?;
    Ok(EstimateReport {
        estimator: Estimator::AcwSieve,
        tau_hat,
        se: None,
        ci95: None,
        nuisance: NuisanceDiagnostics {
            calibration: Some(sol.summary(&pieces.trial_basis.names)),
            calibration_xi: Some(xi_star),
            outcome_fit_0: Some(models.fit0.clone()),
            outcome_fit_1: Some(models.fit1.clone()),
            outcome_xi: Some(models.xi),
            ..Default::default()
        },
        config_echo: echo(dataset, config, degree),
    })
}

/// Dispatch one estimator.
pub fn run_estimator(
    dataset: &IntegratedDataset,
    config: &EstimatorConfig,
) -> Result<EstimateReport> {
    match config.estimator {
        Estimator::Naive => estimate_naive(dataset, config),
        Estimator::Ipsw => estimate_ipsw(dataset, config),
        Estimator::Cw => estimate_cw(dataset, config),
        Estimator::Acw => estimate_acw(dataset, config),
        Estimator::AcwSieve => estimate_acw_sieve(dataset, config),
    }
}

/// Expose the calibration weights an estimator would use; needed by the
/// plug-in variance formula.
pub fn calibration_weights_for(
    dataset: &IntegratedDataset,
    config: &EstimatorConfig,
) -> Result<(Array1<f64>, CalibrationSolution)> {
    match config.estimator {
        Estimator::Cw | Estimator::Acw => {
            let pieces = calibration_pieces(dataset, config.basis)?;
            let sol =
                solve_dual(&pieces.trial_basis, pieces.targets.view(), SolveOptions::default())?;
            Ok((sol.weights.clone(), sol))
        }
        Estimator::AcwSieve => {
            let pieces = calibration_pieces(dataset, BasisDegree::Quadratic)?;
            let grid_owned;
            let grid: &[f64] = match &config.xi_grid {
                Some(g) => g,
                None => {
                    grid_owned = default_xi_grid(&pieces.trial_basis, pieces.targets.view());
                    &grid_owned
                }
            };
            let (xi_star, _) = cv_select_xi(
                &pieces.trial_basis,
                pieces.targets.view(),
                grid,
                5,
                config.seed,
            )?;
            let init =
                solve_dual(&pieces.trial_basis, pieces.targets.view(), SolveOptions::default())?;
            let sol = solve_penalized_dual(
                &pieces.trial_basis,
                pieces.targets.view(),
                ScadParams::new(xi_star),
                SolveOptions::default(),
                Some(init.lambda.view()),
            )?;
            Ok((sol.weights.clone(), sol))
        }
        other => Err(Error::InvalidConfig(format!(
            "estimator '{other}' does not use calibration weights"
        ))),
    }
}
