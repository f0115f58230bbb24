//! Independent oracles for the calibration solvers.
//!
//! Each test solves the same problem the production code solves, but by a
//! method too slow or too special-cased to ship: scalar bisection, projected
//! gradient descent on the primal, exhaustive support enumeration with grid
//! refinement, and a from-scratch re-implementation of the cross-validation
//! bookkeeping. Agreement pins down the solver outputs, not just their
//! invariants.

use acw_core::basis::BasisMatrix;
use acw_core::calibration::{
    cv_select_xi, dual_objective, scad_penalty, solve_dual, solve_penalized_dual, ScadParams,
    SolveOptions,
};
use acw_core::rng::{stream_rng, Stream};
use ndarray::{array, Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;

fn basis_of(values: Array2<f64>) -> BasisMatrix {
    let names = (1..=values.ncols()).map(|j| format!("g{j}")).collect();
    BasisMatrix { values, names }
}

/// Random instance whose targets are an interior point of the basis hull,
/// so the calibration problem is feasible with strictly positive weights.
fn random_instance(rng: &mut impl Rng, n: usize, k: usize) -> (BasisMatrix, Array1<f64>) {
    let mut values = Array2::zeros((n, k));
    for v in values.iter_mut() {
        *v = rng.random_range(-1.5..1.5);
    }
    let mut hull = Array1::zeros(n);
    for w in hull.iter_mut() {
        *w = rng.random_range(0.2..1.0);
    }
    let total = hull.sum();
    hull /= total;
    let targets = values.t().dot(&hull);
    (basis_of(values), targets)
}

/// With one basis column the dual reduces to a scalar equation: the
/// softmax-weighted mean of the column is strictly increasing in λ, so
/// bisection nails the root to machine precision.
#[test]
fn single_column_solution_matches_bisection() {
    let g = array![[-1.0], [0.0], [1.0], [2.0]];
    let basis = basis_of(g.clone());
    let target = array![0.2];

    let weighted_mean = |lambda: f64| -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..4 {
            let w = (lambda * g[[i, 0]]).exp();
            num += w * g[[i, 0]];
            den += w;
        }
        num / den
    };
    let (mut lo, mut hi) = (-30.0_f64, 30.0_f64);
    assert!(weighted_mean(lo) < 0.2 && weighted_mean(hi) > 0.2);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if weighted_mean(mid) < 0.2 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lambda_star = 0.5 * (lo + hi);

    let sol = solve_dual(&basis, target.view(), SolveOptions::default()).unwrap();
    assert!(
        (sol.lambda[0] - lambda_star).abs() < 1e-10,
        "newton {} vs bisection {lambda_star}",
        sol.lambda[0]
    );
    let den: f64 = (0..4).map(|i| (lambda_star * g[[i, 0]]).exp()).sum();
    for i in 0..4 {
        let q_i = (lambda_star * g[[i, 0]]).exp() / den;
        assert!((sol.weights[i] - q_i).abs() < 1e-10);
    }
}

/// Tiny dense linear solve for the projection step of the primal oracle;
/// deliberately not the crate's own linear algebra.
fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let d = b.len();
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        let diag = a[col][col];
        assert!(diag.abs() > 1e-12, "singular projection system");
        for row in 0..d {
            if row == col {
                continue;
            }
            let f = a[row][col] / diag;
            for j in 0..d {
                a[row][j] -= f * a[col][j];
            }
            b[row] -= f * b[col];
        }
    }
    (0..d).map(|i| b[i] / a[i][i]).collect()
}

/// Projected gradient descent on the primal problem
/// min Σ q log q  s.t.  Σ q = 1, Σ q g(X_i) = g̃:
/// gradient steps on the entropy followed by exact projection onto the
/// affine constraint set. Slow but independent of the dual derivation.
fn primal_projected_gradient(basis: &BasisMatrix, targets: &Array1<f64>) -> Array1<f64> {
    let n = basis.values.nrows();
    let k = basis.k();
    let d = k + 1;
    // Constraint matrix A: first column all ones, then the basis columns;
    // the feasible set is {q : Aᵀ q = b}.
    let mut a = Array2::zeros((n, d));
    for i in 0..n {
        a[[i, 0]] = 1.0;
        for j in 0..k {
            a[[i, j + 1]] = basis.values[[i, j]];
        }
    }
    let mut b = Array1::zeros(d);
    b[0] = 1.0;
    for j in 0..k {
        b[j + 1] = targets[j];
    }

    let project = |q: &Array1<f64>| -> Array1<f64> {
        // q − A (AᵀA)⁻¹ (Aᵀq − b)
        let resid = a.t().dot(q) - &b;
        let ata: Vec<Vec<f64>> = (0..d)
            .map(|r| (0..d).map(|c| a.column(r).dot(&a.column(c))).collect())
            .collect();
        let corr = gauss_solve(ata, resid.to_vec());
        let corr = Array1::from_vec(corr);
        q - &a.dot(&corr)
    };

    let mut q = project(&Array1::from_elem(n, 1.0 / n as f64));
    let step = 5e-3;
    for _ in 0..100_000 {
        let grad = q.mapv(|v| 1.0 + v.max(1e-12).ln());
        q = project(&(&q - &(step * &grad)));
    }
    // Certify the oracle's own feasibility before using it as a reference.
    let feas = a.t().dot(&q) - &b;
    let worst = feas.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
    assert!(worst < 1e-9, "oracle infeasible: {worst}");
    assert!(q.iter().all(|&v| v > 0.0), "oracle left the interior");
    q
}

#[test]
fn small_instances_match_projected_gradient_primal() {
    let mut rng = stream_rng(901, Stream::CrossValidation, 77);
    for trial in 0..6 {
        let n = 4 + trial % 3;
        let k = 1 + trial % 2;
        let (basis, targets) = random_instance(&mut rng, n, k);
        let sol = solve_dual(&basis, targets.view(), SolveOptions::default()).unwrap();
        let oracle = primal_projected_gradient(&basis, &targets);
        for i in 0..n {
            assert!(
                (sol.weights[i] - oracle[i]).abs() < 1e-5,
                "instance {trial}, row {i}: solver {} vs oracle {}",
                sol.weights[i],
                oracle[i]
            );
        }
    }
}

/// Penalized objective the sieve solver minimizes.
fn penalized_objective(
    lambda: &Array1<f64>,
    basis: &BasisMatrix,
    targets: &Array1<f64>,
    params: ScadParams,
) -> f64 {
    let (value, _) = dual_objective(lambda.view(), basis.values.view(), targets.view());
    value
        + lambda
            .iter()
            .map(|&l| scad_penalty(l.abs(), params))
            .sum::<f64>()
}

/// Exhaustive oracle for two basis columns: enumerate all four support
/// patterns and minimize over each by iterated grid refinement (41 points
/// per axis, shrinking tenfold per pass). The global minimum over supports
/// is the oracle value.
fn subset_enumeration_oracle(
    basis: &BasisMatrix,
    targets: &Array1<f64>,
    params: ScadParams,
) -> (f64, Vec<bool>) {
    let mut best = (f64::INFINITY, vec![false, false]);
    for mask in 0..4_u32 {
        let support: Vec<usize> = (0..2).filter(|j| mask & (1 << j) != 0).collect();
        let mut center = vec![0.0; support.len()];
        let mut span = 6.0;
        let mut local = if support.is_empty() {
            penalized_objective(&Array1::zeros(2), basis, targets, params)
        } else {
            f64::INFINITY
        };
        for _pass in 0..6 {
            if support.is_empty() {
                break;
            }
            let pts = 41;
            let mut pass_best = (f64::INFINITY, center.clone());
            let mut idx = vec![0usize; support.len()];
            loop {
                let mut lambda = Array1::zeros(2);
                for (pos, &j) in support.iter().enumerate() {
                    let t = idx[pos] as f64 / (pts - 1) as f64;
                    lambda[j] = center[pos] - span + 2.0 * span * t;
                }
                let f = penalized_objective(&lambda, basis, targets, params);
                if f < pass_best.0 {
                    pass_best = (f, support.iter().map(|&j| lambda[j]).collect());
                }
                // Odometer over the (≤2)-dimensional grid.
                let mut carry = 0;
                while carry < idx.len() {
                    idx[carry] += 1;
                    if idx[carry] < pts {
                        break;
                    }
                    idx[carry] = 0;
                    carry += 1;
                }
                if carry == idx.len() {
                    break;
                }
            }
            center = pass_best.1.clone();
            local = pass_best.0;
            span /= 10.0;
        }
        if local < best.0 {
            let mut sel = vec![false, false];
            for &j in &support {
                sel[j] = true;
            }
            // Supports are nested: a coordinate sitting at zero inside a
            // larger support duplicates the smaller one, so strict
            // improvement keeps the minimal support.
            best = (local, sel);
        }
    }
    best
}

#[test]
fn penalized_toy_matches_subset_enumeration() {
    // Column 1 carries a real imbalance; column 2 has comparable spread but
    // an almost-balanced target, so its multiplier is small and a moderate
    // penalty should zero it.
    let values = array![
        [-1.2, 0.9],
        [-0.7, -0.8],
        [-0.2, 0.4],
        [0.3, -1.0],
        [0.8, 0.7],
        [1.1, -0.3],
        [-0.4, 0.2],
        [0.6, -0.1]
    ];
    let basis = basis_of(values);
    let uniform = Array1::from_elem(8, 0.125);
    let mut targets = basis.values.t().dot(&uniform);
    targets[0] += 0.3;
    targets[1] += 0.01;

    let params = ScadParams::new(0.15);
    let init = solve_dual(&basis, targets.view(), SolveOptions::default()).unwrap();
    let sol = solve_penalized_dual(
        &basis,
        targets.view(),
        params,
        SolveOptions::default(),
        Some(init.lambda.view()),
    )
    .unwrap();
    let solver_value = penalized_objective(&sol.lambda, &basis, &targets, params);

    let (oracle_value, oracle_support) = subset_enumeration_oracle(&basis, &targets, params);
    assert!(
        (solver_value - oracle_value).abs() < 1e-5,
        "solver {solver_value} vs oracle {oracle_value}"
    );
    assert_eq!(sol.selected, oracle_support, "support sets disagree");
    assert!(oracle_support[0] && !oracle_support[1], "toy should select only column 1");
}

/// From-scratch re-implementation of the cross-validation score: same fold
/// rule (seeded shuffle, contiguous chunks), same held-out renormalized
/// balance loss divided by the selected-column count, same tie-breaking.
fn cv_reference(
    basis: &BasisMatrix,
    targets: &Array1<f64>,
    grid: &[f64],
    folds: usize,
    seed: u64,
) -> (f64, Vec<f64>) {
    let n = basis.values.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, Stream::CrossValidation, 0);
    order.shuffle(&mut rng);
    let mut fold_of = vec![0usize; n];
    for (pos, &row) in order.iter().enumerate() {
        fold_of[row] = pos * folds / n;
    }

    let mut losses = vec![0.0_f64; grid.len()];
    for fold in 0..folds {
        let train_rows: Vec<usize> = (0..n).filter(|&i| fold_of[i] != fold).collect();
        let held: Vec<usize> = (0..n).filter(|&i| fold_of[i] == fold).collect();
        let mut train = Array2::zeros((train_rows.len(), basis.k()));
        for (r, &i) in train_rows.iter().enumerate() {
            train.row_mut(r).assign(&basis.values.row(i));
        }
        let train = BasisMatrix {
            values: train,
            names: basis.names.clone(),
        };
        let init = solve_dual(&train, targets.view(), SolveOptions::default()).unwrap();
        let mut warm = init.lambda.clone();
        for (gi, &xi) in grid.iter().enumerate() {
            let sol = solve_penalized_dual(
                &train,
                targets.view(),
                ScadParams::new(xi),
                SolveOptions::default(),
                Some(warm.view()),
            )
            .unwrap();
            warm = sol.lambda.clone();
            if sol.n_selected() == 0 {
                losses[gi] = f64::INFINITY;
                continue;
            }
            let eta: Vec<f64> = held
                .iter()
                .map(|&i| basis.values.row(i).dot(&sol.lambda))
                .collect();
            let max = eta.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let total: f64 = eta.iter().map(|&v| (v - max).exp()).sum();
            let fold_loss: f64 = held
                .iter()
                .zip(&eta)
                .map(|(&i, &e)| {
                    let resid: f64 = basis
                        .values
                        .row(i)
                        .iter()
                        .zip(targets.iter())
                        .map(|(&g, &t)| (g - t) * (g - t))
                        .sum::<f64>()
                        .sqrt();
                    (e - max).exp() / total * resid
                })
                .sum();
            losses[gi] += fold_loss / sol.n_selected() as f64;
        }
    }
    let mut best = 0;
    for gi in 1..grid.len() {
        if losses[gi] < losses[best] || (losses[gi] == losses[best] && grid[gi] < grid[best]) {
            best = gi;
        }
    }
    (grid[best], losses)
}

#[test]
fn cv_selection_matches_reference_reimplementation() {
    let mut rng = stream_rng(515, Stream::CrossValidation, 3);
    let (basis, mut targets) = random_instance(&mut rng, 25, 2);
    targets[0] += 0.25;
    targets[1] += 0.02;
    let grid = [1e-3, 0.08, 0.6];
    let seed = 424_242;

    let (xi_star, losses) = cv_select_xi(&basis, targets.view(), &grid, 5, seed).unwrap();
    let (xi_ref, losses_ref) = cv_reference(&basis, &targets, &grid, 5, seed);

    assert_eq!(xi_star, xi_ref, "selected penalty levels differ");
    for (a, b) in losses.iter().zip(&losses_ref) {
        if a.is_finite() || b.is_finite() {
            assert!((a - b).abs() < 1e-6, "losses {a} vs {b}");
        }
    }
}

/// Invariants over a spread of random sizes: weights normalized, strictly
/// positive, and balancing the basis to solver tolerance.
#[test]
fn random_instances_satisfy_calibration_invariants() {
    let mut rng = stream_rng(2_718, Stream::CrossValidation, 28);
    for trial in 0..50 {
        let n = rng.random_range(20..=200);
        let k = rng.random_range(1..=10);
        let (basis, targets) = random_instance(&mut rng, n, k);
        let sol = match solve_dual(&basis, targets.view(), SolveOptions::default()) {
            Ok(s) => s,
            Err(e) => panic!("instance {trial} (n={n}, k={k}) failed: {e}"),
        };
        assert!((sol.weights.sum() - 1.0).abs() < 1e-12, "instance {trial} sum");
        assert!(
            sol.weights.iter().all(|&q| q > 0.0),
            "instance {trial} positivity"
        );
        let worst = sol
            .balance_residual
            .iter()
            .fold(0.0_f64, |m, &v| m.max(v.abs()));
        assert!(worst <= 1e-8, "instance {trial} balance {worst}");
    }
}
