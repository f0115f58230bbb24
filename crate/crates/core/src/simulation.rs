//! Simulation study: data-generating processes and the Monte Carlo harness.
//!
//! Each replicate draws a finite super-population, selects a trial from its
//! first half through a covariate-dependent participation model, draws a
//! design-weighted simple random sample from the second half, runs the
//! requested estimators, and compares them against that replicate's
//! finite-population average treatment effect.
//!
//! Four scenarios cross two misspecification axes. Misspecified components
//! are generated from nonlinear transforms of the covariates while every
//! fitted model only ever sees the untransformed ones:
//!
//! * s1 — outcome and sampling both generated from the raw covariates;
//! * s2 — sampling misspecified (participation driven by the transforms);
//! * s3 — outcome misspecified (outcomes driven by the transforms);
//! * s4 — both misspecified.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::data::{IntegratedDataset, OutcomeType, RweSample, TrialSample};
use crate::error::{Error, Result};
use crate::estimators::{run_estimator, Estimator, EstimatorConfig};
use crate::exec;
use crate::regression::OutcomeMode;
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::variance::{bootstrap_variance, plugin_variance_acw, wald_ci, welch_se};

/// Number of covariates in the simulated designs.
pub const SIM_P: usize = 4;

/// Selection-model intercept giving roughly a 2% participation rate on the
/// default population half (about 1000 trial rows).
pub const DEFAULT_SELECTION_INTERCEPT: f64 = -2.5;

/// Selection-model intercept for the large-sample preset, tuned so that
/// about 0.45% of the full population (about 2250 rows) enters the trial.
pub const LARGE_N_SELECTION_INTERCEPT: f64 = -3.37;

/// Misspecification scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    S1,
    S2,
    S3,
    S4,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::S1, Scenario::S2, Scenario::S3, Scenario::S4];

    /// Outcomes are generated from the transformed covariates.
    pub fn outcome_misspecified(self) -> bool {
        matches!(self, Scenario::S3 | Scenario::S4)
    }

    /// Trial participation is generated from the transformed covariates.
    pub fn sampling_misspecified(self) -> bool {
        matches!(self, Scenario::S2 | Scenario::S4)
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Scenario::S1 => "s1",
            Scenario::S2 => "s2",
            Scenario::S3 => "s3",
            Scenario::S4 => "s4",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s1" | "1" => Ok(Scenario::S1),
            "s2" | "2" => Ok(Scenario::S2),
            "s3" | "3" => Ok(Scenario::S3),
            "s4" | "4" => Ok(Scenario::S4),
            other => Err(Error::InvalidConfig(format!("unknown scenario '{other}'"))),
        }
    }
}

/// Full configuration of one Monte Carlo run.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub outcome_type: OutcomeType,
    /// Rows per population half; the trial is selected from the first half
    /// and the real-world sample drawn from the second.
    pub pop_half: usize,
    /// Real-world sample size (simple random sample without replacement).
    pub rwe_size: usize,
    /// Intercept of the trial participation model.
    pub selection_intercept: f64,
    /// Monte Carlo replicates.
    pub reps: usize,
    /// Bootstrap resamples per replicate; 0 skips uncertainty entirely
    /// (bias-only runs).
    pub bootstrap_b: usize,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, outcome_type: OutcomeType, seed: u64) -> Self {
        ScenarioConfig {
            scenario,
            outcome_type,
            pop_half: 50_000,
            rwe_size: 5_000,
            selection_intercept: DEFAULT_SELECTION_INTERCEPT,
            reps: 300,
            bootstrap_b: 50,
            seed,
        }
    }

    /// Large-sample preset: a 500k population, a 10k real-world sample, and
    /// a rarer trial (~0.45% of the population).
    pub fn large_n(mut self) -> Self {
        self.pop_half = 250_000;
        self.rwe_size = 10_000;
        self.selection_intercept = LARGE_N_SELECTION_INTERCEPT;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.pop_half < 2 {
            return Err(Error::InvalidConfig("population half must be at least 2".into()));
        }
        if self.rwe_size == 0 || self.rwe_size > self.pop_half {
            return Err(Error::InvalidConfig(format!(
                "real-world sample size {} must lie in 1..={}",
                self.rwe_size, self.pop_half
            )));
        }
        if self.reps == 0 {
            return Err(Error::InvalidConfig("reps must be positive".into()));
        }
        Ok(())
    }
}

/// One simulated super-population with both potential outcomes realized.
pub struct Population {
    /// Raw covariates, N x 4; these are what fitted models see.
    pub x: Array2<f64>,
    /// Transformed covariates, N x 4, standardized to mean 1 and variance 1;
    /// misspecified components are generated from these.
    pub x_star: Array2<f64>,
    pub y0: Array1<f64>,
    pub y1: Array1<f64>,
}

impl Population {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// Finite-population average treatment effect of this draw.
    pub fn tau_true(&self) -> f64 {
        (&self.y1 - &self.y0).mean().unwrap_or(f64::NAN)
    }
}

fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Generate a super-population of `2 * pop_half` rows.
///
/// Covariates are independent N(1,1). The transformed set distorts them
/// through the classic nonlinear quartet
/// `(exp(X₁/2), X₂/(1+exp(X₁)) + 10, (X₁X₃/25 + 0.6)³, (X₂+X₄+20)²)`, each
/// column affinely standardized to empirical mean 1 and variance 1.
/// Continuous potential outcomes are
/// `Y(a) = −100 + 27.4·a·W₁ + 13.7·(W₂+W₃+W₄) + ε_a` with independent
/// standard-normal noise per arm; binary ones are Bernoulli with
/// `logit P(Y(a)=1) = 1 − 2a·W₁ − W₂ − W₃ + W₄`. `W` is the raw or the
/// transformed set according to the scenario's outcome axis.
pub fn generate_population<R: Rng>(config: &ScenarioConfig, rng: &mut R) -> Population {
    let n = 2 * config.pop_half;
    let mut x = Array2::zeros((n, SIM_P));
    for i in 0..n {
        for j in 0..SIM_P {
            let z: f64 = rng.sample(StandardNormal);
            x[[i, j]] = 1.0 + z;
        }
    }

    let mut x_star = Array2::zeros((n, SIM_P));
    for i in 0..n {
        let (x1, x2, x3, x4) = (x[[i, 0]], x[[i, 1]], x[[i, 2]], x[[i, 3]]);
        x_star[[i, 0]] = (x1 / 2.0).exp();
        x_star[[i, 1]] = x2 / (1.0 + x1.exp()) + 10.0;
        x_star[[i, 2]] = (x1 * x3 / 25.0 + 0.6).powi(3);
        x_star[[i, 3]] = (x2 + x4 + 20.0).powi(2);
    }
    for j in 0..SIM_P {
        let mut col = x_star.column_mut(j);
        let mean = col.mean().unwrap();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        col.mapv_inplace(|v| (v - mean) / sd + 1.0);
    }

    let w = if config.scenario.outcome_misspecified() {
        &x_star
    } else {
        &x
    };
    let mut y0 = Array1::zeros(n);
    let mut y1 = Array1::zeros(n);
    match config.outcome_type {
        OutcomeType::Continuous => {
            for i in 0..n {
                let base =
                    -100.0 + 13.7 * (w[[i, 1]] + w[[i, 2]] + w[[i, 3]]);
                let e0: f64 = rng.sample(StandardNormal);
                let e1: f64 = rng.sample(StandardNormal);
                y0[i] = base + e0;
                y1[i] = base + 27.4 * w[[i, 0]] + e1;
            }
        }
        OutcomeType::Binary => {
            for i in 0..n {
                let shared = 1.0 - w[[i, 1]] - w[[i, 2]] + w[[i, 3]];
                let p0 = expit(shared);
                let p1 = expit(shared - 2.0 * w[[i, 0]]);
                let u0: f64 = rng.random();
                let u1: f64 = rng.random();
                y0[i] = f64::from(u0 < p0);
                y1[i] = f64::from(u1 < p1);
            }
        }
    }

    Population { x, x_star, y0, y1 }
}

fn covariate_names() -> Vec<String> {
    (1..=SIM_P).map(|j| format!("x{j}")).collect()
}

/// Select the trial from the first half and draw the real-world sample from
/// the second half of a generated population.
///
/// Participation follows `logit π_δ = intercept − 0.5V₁ − 0.3V₂ − 0.5V₃ −
/// 0.4V₄` with `V` raw or transformed per the scenario's sampling axis;
/// treatment is a fair coin. The dataset does not pin the randomization
/// probability, so downstream arm contrasts normalize by the realized
/// treated fraction — the count-normalized contrast is what keeps the
/// weighted estimators' variance below the naive difference when outcomes
/// sit far from zero. If a treatment arm comes up empty the draw is
/// retried, up to ten times. The real-world sample is a simple random
/// sample whose constant
/// design weight is `pop_half / rwe_size`; its observed treatment follows a
/// covariate-dependent assignment model on the raw covariates and its
/// outcome is the potential outcome of that arm.
pub fn draw_samples<R: Rng>(
    population: &Population,
    config: &ScenarioConfig,
    rng: &mut R,
) -> Result<IntegratedDataset> {
    let half = config.pop_half;
    let v = if config.scenario.sampling_misspecified() {
        &population.x_star
    } else {
        &population.x
    };

    let mut selected: Vec<usize> = Vec::new();
    let mut treatment: Vec<f64> = Vec::new();
    let mut ok = false;
    for _attempt in 0..10 {
        selected.clear();
        for i in 0..half {
            let eta = config.selection_intercept
                - 0.5 * v[[i, 0]]
                - 0.3 * v[[i, 1]]
                - 0.5 * v[[i, 2]]
                - 0.4 * v[[i, 3]];
            if rng.random::<f64>() < expit(eta) {
                selected.push(i);
            }
        }
        if selected.len() < 2 {
            continue;
        }
        treatment = selected
            .iter()
            .map(|_| f64::from(rng.random::<f64>() < 0.5))
            .collect();
        let treated = treatment.iter().sum::<f64>();
        if treated > 0.0 && treated < treatment.len() as f64 {
            ok = true;
            break;
        }
    }
    if !ok {
        return Err(Error::TrialArmEmpty { attempts: 10 });
    }

    let n = selected.len();
    let mut t_cov = Array2::zeros((n, SIM_P));
    let mut t_y = Array1::zeros(n);
    for (row, &i) in selected.iter().enumerate() {
        for j in 0..SIM_P {
            t_cov[[row, j]] = population.x[[i, j]];
        }
        t_y[row] = if treatment[row] == 1.0 {
            population.y1[i]
        } else {
            population.y0[i]
        };
    }

    let m = config.rwe_size;
    let mut rwe_idx: Vec<usize> = rand::seq::index::sample(rng, half, m)
        .into_iter()
        .map(|i| i + half)
        .collect();
    rwe_idx.sort_unstable();
    let design_weight = half as f64 / m as f64;
    let mut r_cov = Array2::zeros((m, SIM_P));
    let mut r_a = Array1::zeros(m);
    let mut r_y = Array1::zeros(m);
    for (row, &i) in rwe_idx.iter().enumerate() {
        for j in 0..SIM_P {
            r_cov[[row, j]] = population.x[[i, j]];
        }
        // Real-world treatment assignment always depends on the raw
        // covariates: logit e_A = −X₁ + 0.5X₂ − 0.25X₃ − 0.1X₄.
        let eta = -population.x[[i, 0]] + 0.5 * population.x[[i, 1]]
            - 0.25 * population.x[[i, 2]]
            - 0.1 * population.x[[i, 3]];
        let a = f64::from(rng.random::<f64>() < expit(eta));
        r_a[row] = a;
        r_y[row] = if a == 1.0 {
            population.y1[i]
        } else {
            population.y0[i]
        };
    }

    let dataset = IntegratedDataset {
        trial: TrialSample {
            covariates: t_cov,
            treatment: Array1::from_vec(treatment),
            outcome: t_y,
            covariate_names: covariate_names(),
            known_pi_a: None,
        },
        rwe: RweSample {
            covariates: r_cov,
            design_weights: Array1::from_elem(m, design_weight),
            covariate_names: covariate_names(),
            treatment: Some(r_a),
            outcome: Some(r_y),
        },
        outcome_type: config.outcome_type,
    };
    Ok(dataset)
}

/// The estimator configuration the Monte Carlo study uses: linear balance
/// basis for cw/acw, pooled real-world outcome fitting for the augmented
/// estimators (the sieve always works on the quadratic basis).
pub fn harness_config(estimator: Estimator, seed: u64) -> EstimatorConfig {
    let mut cfg = EstimatorConfig::new(estimator, seed);
    if matches!(estimator, Estimator::Acw | Estimator::AcwSieve) {
        cfg.outcome_mode = OutcomeMode::PooledRwe;
    }
    cfg
}

/// Per-estimator results of one replicate.
#[derive(Debug, Clone, Serialize)]
pub struct ReplicateEstimate {
    pub estimator: Estimator,
    pub tau_hat: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covered: Option<bool>,
}

/// One Monte Carlo replicate.
#[derive(Debug, Clone, Serialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub trial_n: usize,
    pub tau_true: f64,
    pub estimates: Vec<ReplicateEstimate>,
}

/// Aggregated operating characteristics of one estimator.
#[derive(Debug, Clone, Serialize)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    /// Mean of τ̂ − τ₀ across replicates.
    pub bias: f64,
    /// Monte Carlo standard error of the bias.
    pub bias_mc_se: f64,
    /// Sample variance of the point estimates.
    pub mc_variance: f64,
    /// Mean bootstrap variance, when bootstrap ran.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_boot_variance: Option<f64>,
    /// 100 · (mean bootstrap variance − MC variance) / MC variance.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rel_bias_boot_var_pct: Option<f64>,
    /// Percent of replicates whose 95% interval covered the replicate truth.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage_pct: Option<f64>,
}

/// Full result of a Monte Carlo run.
#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloReport {
    pub scenario: Scenario,
    pub outcome_type: OutcomeType,
    pub reps: usize,
    pub bootstrap_b: usize,
    pub seed: u64,
    pub pop_half: usize,
    pub rwe_size: usize,
    /// Mean finite-population effect across replicates.
    pub tau_true_mean: f64,
    pub mean_trial_n: f64,
    pub estimators: Vec<EstimatorSummary>,
    /// Replicate-level detail; not part of the serialized summary.
    #[serde(skip)]
    pub replicates: Vec<ReplicateRecord>,
}

/// Run the Monte Carlo study.
///
/// Replicates are independent and mapped over the worker pool; every random
/// stream is keyed by `(seed, stage, replicate)`, so the report is
/// bit-identical for any thread count. A failure in any replicate aborts
/// the run with the replicate index attached.
pub fn run_monte_carlo(
    config: &ScenarioConfig,
    estimators: &[Estimator],
    threads: usize,
) -> Result<MonteCarloReport> {
    config.validate()?;
    if estimators.is_empty() {
        return Err(Error::InvalidConfig("no estimators requested".into()));
    }

    let replicates = exec::with_threads(threads, || {
        exec::try_map_indexed(config.reps, |r| {
            run_replicate(config, estimators, r).map_err(|e| e.in_replicate(r))
        })
    })??;

    let reps = config.reps as f64;
    let tau_true_mean = replicates.iter().map(|rec| rec.tau_true).sum::<f64>() / reps;
    let mean_trial_n = replicates.iter().map(|rec| rec.trial_n as f64).sum::<f64>() / reps;

    let mut summaries = Vec::with_capacity(estimators.len());
    for (k, &est) in estimators.iter().enumerate() {
        let errors: Vec<f64> = replicates
            .iter()
            .map(|rec| rec.estimates[k].tau_hat - rec.tau_true)
            .collect();
        let taus: Vec<f64> = replicates
            .iter()
            .map(|rec| rec.estimates[k].tau_hat)
            .collect();
        let bias = errors.iter().sum::<f64>() / reps;
        let err_var =
            errors.iter().map(|e| (e - bias).powi(2)).sum::<f64>() / (reps - 1.0).max(1.0);
        let bias_mc_se = (err_var / reps).sqrt();
        let tau_mean = taus.iter().sum::<f64>() / reps;
        let mc_variance =
            taus.iter().map(|t| (t - tau_mean).powi(2)).sum::<f64>() / (reps - 1.0).max(1.0);

        let (mean_boot_variance, rel_bias_boot_var_pct) = if config.bootstrap_b > 0 {
            let boot_vars: Vec<f64> = replicates
                .iter()
                .filter_map(|rec| rec.estimates[k].se.map(|s| s * s))
                .collect();
            let mean_bv = boot_vars.iter().sum::<f64>() / boot_vars.len() as f64;
            (
                Some(mean_bv),
                Some(100.0 * (mean_bv - mc_variance) / mc_variance),
            )
        } else {
            (None, None)
        };
        // Coverage is reported whenever per-replicate intervals exist —
        // bootstrap intervals when resampling ran, closed-form ones on
        // bias-only runs.
        let with_ci: Vec<bool> = replicates
            .iter()
            .filter_map(|rec| rec.estimates[k].covered)
            .collect();
        let coverage_pct = if with_ci.is_empty() {
            None
        } else {
            Some(100.0 * with_ci.iter().filter(|&&c| c).count() as f64 / with_ci.len() as f64)
        };

        summaries.push(EstimatorSummary {
            estimator: est,
            bias,
            bias_mc_se,
            mc_variance,
            mean_boot_variance,
            rel_bias_boot_var_pct,
            coverage_pct,
        });
    }

    Ok(MonteCarloReport {
        scenario: config.scenario,
        outcome_type: config.outcome_type,
        reps: config.reps,
        bootstrap_b: config.bootstrap_b,
        seed: config.seed,
        pop_half: config.pop_half,
        rwe_size: config.rwe_size,
        tau_true_mean,
        mean_trial_n,
        estimators: summaries,
        replicates,
    })
}

fn run_replicate(
    config: &ScenarioConfig,
    estimators: &[Estimator],
    r: usize,
) -> Result<ReplicateRecord> {
    let mut rng_pop = stream_rng(config.seed, Stream::Population, r as u64);
    let population = generate_population(config, &mut rng_pop);
    let tau_true = population.tau_true();

    let mut rng_samp = stream_rng(config.seed, Stream::Sampling, r as u64);
    let dataset = draw_samples(&population, config, &mut rng_samp)?;
    drop(population);

    let cv_seed = derive_seed(config.seed, Stream::CrossValidation, r as u64);
    let boot_seed = derive_seed(config.seed, Stream::Bootstrap, r as u64);

    let mut estimates = Vec::with_capacity(estimators.len());
    for &est in estimators {
        let cfg = harness_config(est, cv_seed);
        let (tau_hat, se) = if config.bootstrap_b > 0 {
            let report = run_estimator(&dataset, &cfg)?;
            let boot = bootstrap_variance(&dataset, &cfg, config.bootstrap_b, boot_seed)?;
            (report.tau_hat, Some(boot.se))
        } else {
            // Bias-only runs still get cheap closed-form uncertainty where
            // one exists: the Welch standard error for the in-trial
            // contrast, the asymptotic plug-in formula for the augmented
            // estimators. The weighting-only estimators stay point-only.
            match est {
                Estimator::Naive => {
                    let report = run_estimator(&dataset, &cfg)?;
                    (report.tau_hat, Some(welch_se(&dataset.trial)?))
                }
                Estimator::Acw | Estimator::AcwSieve => {
                    let (tau, plug) = plugin_variance_acw(&dataset, &cfg)?;
                    (tau, Some(plug.se))
                }
                _ => (run_estimator(&dataset, &cfg)?.tau_hat, None),
            }
        };
        let covered = se.map(|s| {
            let (lo, hi) = wald_ci(tau_hat, s);
            lo <= tau_true && tau_true <= hi
        });
        estimates.push(ReplicateEstimate {
            estimator: est,
            tau_hat,
            se,
            covered,
        });
    }
    Ok(ReplicateRecord {
        replicate: r,
        trial_n: dataset.trial.n(),
        tau_true,
        estimates,
    })
}
