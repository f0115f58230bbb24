//! Throwaway probe: where the quadratic-basis augmented estimator's
//! scenario-4 bias comes from — calibration selection, outcome selection,
//! or the basis itself.

use acw_core::basis::BasisDegree;
use acw_core::calibration::{solve_dual, SolveOptions};
use acw_core::data::OutcomeType;
use acw_core::estimators::{
    assemble_augmented, calibration_pieces, calibration_weights_for, Estimator, EstimatorConfig,
};
use acw_core::regression::{fit_outcome_models, OutcomeMode};
use acw_core::rng::{derive_seed, stream_rng, Stream};
use acw_core::simulation::{draw_samples, generate_population, Scenario, ScenarioConfig};

struct Acc {
    vals: Vec<f64>,
}

impl Acc {
    fn new() -> Self {
        Acc { vals: Vec::new() }
    }
    fn push(&mut self, v: f64) {
        self.vals.push(v);
    }
    fn report(&self, label: &str) {
        let n = self.vals.len() as f64;
        let mean = self.vals.iter().sum::<f64>() / n;
        let var = self.vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        println!(
            "{label:>28}: bias {mean:>8.3} (se {:.3})  mc_var {var:>8.3}",
            (var / n).sqrt()
        );
    }
}

fn main() {
    let config = ScenarioConfig::new(Scenario::S4, OutcomeType::Continuous, 20_260_401);
    let reps = 400;
    let mut quad_unpen = Acc::new(); // dense quadratic weights, unpenalized outcome
    let mut scad_weights_only = Acc::new(); // selected weights, unpenalized outcome
    let mut scad_outcome_only = Acc::new(); // dense weights, penalized outcome
    let mut sieve = Acc::new(); // shipped: both penalized

    for r in 0..reps {
        let mut rng_pop = stream_rng(config.seed, Stream::Population, r);
        let pop = generate_population(&config, &mut rng_pop);
        let tau0 = pop.tau_true();
        let mut rng_samp = stream_rng(config.seed, Stream::Sampling, r);
        let ds = draw_samples(&pop, &config, &mut rng_samp).unwrap();
        let cv_seed = derive_seed(config.seed, Stream::CrossValidation, r);

        let pieces = calibration_pieces(&ds, BasisDegree::Quadratic).unwrap();
        let dense = solve_dual(&pieces.trial_basis, pieces.targets.view(), SolveOptions::default())
            .unwrap();

        let mut cfg = EstimatorConfig::new(Estimator::AcwSieve, cv_seed);
        cfg.outcome_mode = OutcomeMode::PooledRwe;
        let (selected_w, _) = calibration_weights_for(&ds, &cfg).unwrap();

        let models_plain = fit_outcome_models(
            &ds,
            BasisDegree::Quadratic,
            OutcomeMode::PooledRwe,
            false,
            None,
            cv_seed,
        )
        .unwrap();
        let models_pen = fit_outcome_models(
            &ds,
            BasisDegree::Quadratic,
            OutcomeMode::PooledRwe,
            true,
            None,
            cv_seed,
        )
        .unwrap();

        quad_unpen.push(assemble_augmented(&ds, &dense.weights, &models_plain).unwrap() - tau0);
        scad_weights_only
            .push(assemble_augmented(&ds, &selected_w, &models_plain).unwrap() - tau0);
        scad_outcome_only.push(assemble_augmented(&ds, &dense.weights, &models_pen).unwrap() - tau0);
        sieve.push(assemble_augmented(&ds, &selected_w, &models_pen).unwrap() - tau0);
    }
    quad_unpen.report("dense w, plain outcome");
    scad_weights_only.report("selected w, plain outcome");
    scad_outcome_only.report("dense w, penalized outcome");
    sieve.report("selected w, penalized (ship)");
}
