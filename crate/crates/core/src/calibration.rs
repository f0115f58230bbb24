//! Calibration weighting: entropy-balancing weights via a convex dual.
//!
//! The primal problem picks trial weights q minimizing Σ q_i log q_i subject
//! to Σ q_i = 1 and the balance constraints Σ q_i g(X_i) = g̃. Its dual is
//! the unconstrained convex program
//!
//! ```text
//! minimize over λ:  f(λ) = log Σ_i exp(λᵀ g_i) − λᵀ g̃
//! ```
//!
//! whose stationarity condition recovers q_i as a softmax of λᵀg_i. The dual
//! is solved by damped Newton. A SCAD-penalized variant shrinks multipliers
//! of basis functions that contribute little balance, with the penalty level
//! ξ picked by cross-validation on held-out balance quality.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::Serialize;

use crate::basis::BasisMatrix;
use crate::error::{Error, Result};
use crate::linalg::{norm_inf, solve_spd};
use crate::rng::{stream_rng, Stream};

/// SCAD penalty configuration: level ξ and concavity b.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScadParams {
    pub xi: f64,
    pub b: f64,
}

impl ScadParams {
    pub fn new(xi: f64) -> Self {
        ScadParams { xi, b: 3.7 }
    }
}

impl Default for ScadParams {
    fn default() -> Self {
        ScadParams::new(0.0)
    }
}

/// Newton solver controls.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            max_iter: 100,
            grad_tol: 1e-9,
        }
    }
}

/// Maximum outer iterations of the penalized (local quadratic) scheme.
const PENALIZED_MAX_ITER: usize = 200;
/// Ridge added to |λ_k| in the quadratic approximation's diagonal.
const LQA_EPS: f64 = 1e-6;
/// Multipliers below this magnitude after convergence are set to exact zero.
const HARD_THRESHOLD: f64 = 1e-4;
/// Stationarity tolerance of the penalized solve: sup-norm of the penalized
/// score over surviving coordinates (sub-threshold coordinates instead meet
/// the subdifferential condition |gradient| ≤ ξ).
const KKT_TOL: f64 = 1e-9;

/// Solved calibration problem: multipliers, weights, and diagnostics.
#[derive(Debug, Clone)]
pub struct CalibrationSolution {
    /// Lagrange multipliers, one per basis column (zeros for deselected).
    pub lambda: Array1<f64>,
    /// Calibration weights over trial rows; positive, summing to one.
    pub weights: Array1<f64>,
    /// Σ_i q_i g(X_i) − g̃ at the solution.
    pub balance_residual: Array1<f64>,
    /// Nonzero-multiplier mask (all true for unpenalized solves).
    pub selected: Vec<bool>,
    /// Dual objective value at the solution.
    pub dual_value: f64,
    /// Newton / outer iterations used.
    pub iterations: usize,
    /// Penalty level the solve ran at (0 = unpenalized).
    pub xi: f64,
}

impl CalibrationSolution {
    pub fn n_selected(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    /// JSON-friendly diagnostics bundle.
    pub fn summary(&self, column_names: &[String]) -> CalibrationSummary {
        CalibrationSummary {
            lambda: self.lambda.to_vec(),
            selected_columns: column_names
                .iter()
                .zip(&self.selected)
                .filter(|(_, &s)| s)
                .map(|(n, _)| n.clone())
                .collect(),
            balance_residual: self.balance_residual.to_vec(),
            iterations: self.iterations,
            dual_value: self.dual_value,
            xi: self.xi,
        }
    }
}

/// Serializable view of a [`CalibrationSolution`].
#[derive(Debug, Clone, Serialize)]
pub struct CalibrationSummary {
    pub lambda: Vec<f64>,
    pub selected_columns: Vec<String>,
    pub balance_residual: Vec<f64>,
    pub iterations: usize,
    pub dual_value: f64,
    pub xi: f64,
}

/// Weights q_i(λ) ∝ exp(λᵀg_i), with the max exponent subtracted before
/// exponentiation, plus the stabilized log Σ exp term.
fn softmax(eta: ArrayView1<'_, f64>) -> (Array1<f64>, f64) {
    let max = eta.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut w: Array1<f64> = eta.mapv(|v| (v - max).exp());
    let total = w.sum();
    w /= total;
    (w, max + total.ln())
}

/// Dual objective value and gradient at λ.
///
/// Value: log Σ exp(λᵀg_i) − λᵀg̃. Gradient: Σ q_i g_i − g̃, the balance
/// residual of the implied weights.
pub fn dual_objective(
    lambda: ArrayView1<'_, f64>,
    basis_values: ArrayView2<'_, f64>,
    targets: ArrayView1<'_, f64>,
) -> (f64, Array1<f64>) {
    let (value, grad, _) = dual_state(lambda, basis_values, targets);
    (value, grad)
}

fn dual_state(
    lambda: ArrayView1<'_, f64>,
    g: ArrayView2<'_, f64>,
    targets: ArrayView1<'_, f64>,
) -> (f64, Array1<f64>, Array1<f64>) {
    let eta = g.dot(&lambda);
    let (q, lse) = softmax(eta.view());
    let value = lse - lambda.dot(&targets);
    let grad = g.t().dot(&q) - &targets;
    (value, grad, q)
}

/// Weighted covariance Σ q_i (g_i − ḡ)(g_i − ḡ)ᵀ with ḡ = Σ q_i g_i:
/// the Hessian of the dual.
fn dual_hessian(g: ArrayView2<'_, f64>, q: ArrayView1<'_, f64>) -> Array2<f64> {
    let gbar = g.t().dot(&q);
    let mut centered = g.to_owned();
    for (i, mut row) in centered.outer_iter_mut().enumerate() {
        let s = q[i].sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - gbar[j]) * s;
        }
    }
    centered.t().dot(&centered)
}

/// Indices of basis columns that are linearly dependent (or constant) over
/// the trial rows, detected on the column-centered matrix.
fn dependent_columns(g: ArrayView2<'_, f64>) -> Vec<usize> {
    let (n, k) = g.dim();
    let mut centered = g.to_owned();
    for j in 0..k {
        let mean = centered.column(j).sum() / n as f64;
        centered.column_mut(j).mapv_inplace(|v| v - mean);
    }
    // Gram-Schmidt with a relative tolerance; cheaper to reason about than
    // full pivoted QR and adequate for tens of columns.
    let mut basis_vecs: Vec<Array1<f64>> = Vec::new();
    let mut dependent = Vec::new();
    let scale = centered
        .iter()
        .fold(0.0_f64, |m, &v| m.max(v.abs()))
        .max(1e-300);
    for j in 0..k {
        let mut v = centered.column(j).to_owned();
        for b in &basis_vecs {
            let coef = v.dot(b);
            v.scaled_add(-coef, b);
        }
        let norm = v.dot(&v).sqrt();
        if norm <= 1e-10 * scale * (n as f64).sqrt() {
            dependent.push(j);
        } else {
            basis_vecs.push(v / norm);
        }
    }
    dependent
}

fn check_rank(basis: &BasisMatrix) -> Result<()> {
    let dep = dependent_columns(basis.values.view());
    if dep.is_empty() {
        Ok(())
    } else {
        Err(Error::SingularJacobian {
            columns: dep
                .into_iter()
                .map(|j| {
                    basis
                        .names
                        .get(j)
                        .cloned()
                        .unwrap_or_else(|| format!("column {j}"))
                })
                .collect(),
        })
    }
}

fn solution_from_lambda(
    lambda: Array1<f64>,
    g: ArrayView2<'_, f64>,
    targets: ArrayView1<'_, f64>,
    iterations: usize,
    xi: f64,
) -> CalibrationSolution {
    let (value, grad, q) = dual_state(lambda.view(), g, targets);
    let selected = lambda.iter().map(|&l| l != 0.0).collect();
    CalibrationSolution {
        lambda,
        weights: q,
        balance_residual: grad,
        selected,
        dual_value: value,
        iterations,
        xi,
    }
}

/// Solve the unpenalized dual by Newton's method with Armijo backtracking.
pub fn solve_dual(
    basis: &BasisMatrix,
    targets: ArrayView1<'_, f64>,
    opts: SolveOptions,
) -> Result<CalibrationSolution> {
    check_rank(basis)?;
    let g = basis.values.view();
    let k = g.ncols();
    if targets.len() != k {
        return Err(Error::DimensionMismatch {
            context: "calibration targets".into(),
            expected: k,
            found: targets.len(),
        });
    }
    let lambda = newton_loop(g, targets, Array1::zeros(k), opts)?;
    Ok(solution_from_lambda(
        lambda.0, g, targets, lambda.1, 0.0,
    ))
}

fn newton_loop(
    g: ArrayView2<'_, f64>,
    targets: ArrayView1<'_, f64>,
    mut lambda: Array1<f64>,
    opts: SolveOptions,
) -> Result<(Array1<f64>, usize)> {
    let (mut value, mut grad, mut q) = dual_state(lambda.view(), g, targets);
    for iter in 0..opts.max_iter {
        if norm_inf(grad.view()) <= opts.grad_tol {
            return Ok((lambda, iter));
        }
        let h = dual_hessian(g, q.view());
        let delta = solve_spd(h.view(), (-&grad).view())?;
        let slope = grad.dot(&delta);
        let mut step = 1.0;
        loop {
            let cand = &lambda + &(step * &delta);
            let (cand_value, cand_grad, cand_q) = dual_state(cand.view(), g, targets);
            // Once the promised decrease falls below the objective's float
            // resolution, the Armijo comparison only sees ±1-ulp noise and
            // can reject an exact Newton step; switch to requiring a strict
            // drop in the gradient norm instead.
            let accepted = cand_value <= value + 1e-4 * step * slope
                || ((step * slope).abs() <= f64::EPSILON * (1.0 + value.abs())
                    && norm_inf(cand_grad.view()) <= (1.0 - 1e-4 * step) * norm_inf(grad.view()));
            if accepted {
                lambda = cand;
                value = cand_value;
                grad = cand_grad;
                q = cand_q;
                break;
            }
            step *= 0.5;
            if step < 1e-14 {
                return Err(Error::NotConverged {
                    iterations: iter,
                    residual_norm: norm_inf(grad.view()),
                    last_iterate: lambda.to_vec(),
                });
            }
        }
    }
    if norm_inf(grad.view()) <= opts.grad_tol {
        Ok((lambda, opts.max_iter))
    } else {
        Err(Error::NotConverged {
            iterations: opts.max_iter,
            residual_norm: norm_inf(grad.view()),
            last_iterate: lambda.to_vec(),
        })
    }
}

/// SCAD penalty derivative q_ξ(t) for t ≥ 0:
/// ξ on [0, ξ), then the clipped linear decay (bξ − t)₊/(b − 1), zero past bξ.
pub fn scad_derivative(t: f64, params: ScadParams) -> f64 {
    let ScadParams { xi, b } = params;
    debug_assert!(t >= 0.0);
    if xi == 0.0 {
        return 0.0;
    }
    if t < xi {
        xi
    } else {
        (b * xi - t).max(0.0) / (b - 1.0)
    }
}

/// SCAD penalty p_ξ(t) = ∫₀ᵗ q_ξ(s) ds for t ≥ 0.
pub fn scad_penalty(t: f64, params: ScadParams) -> f64 {
    let ScadParams { xi, b } = params;
    debug_assert!(t >= 0.0);
    if xi == 0.0 {
        return 0.0;
    }
    if t <= xi {
        xi * t
    } else if t <= b * xi {
        (2.0 * b * xi * t - t * t - xi * xi) / (2.0 * (b - 1.0))
    } else {
        xi * xi * (b + 1.0) / 2.0
    }
}

/// Solve the SCAD-penalized dual by iterated local quadratic approximation.
///
/// The penalized stationarity condition is gradient(λ) + q_ξ(|λ|)∘sign(λ)
/// = 0. Each outer step solves (H + E)Δ = −(gradient + q_ξ∘sign) with E the
/// diagonal q_ξ(|λ_k|)/(|λ_k| + 1e-6), then damps the step until the
/// penalized objective decreases. Multipliers below 1e-4 in magnitude after
/// convergence are zeroed and the reduced system re-solved on the surviving
/// columns. `init` seeds the iteration; when absent the unpenalized solution
/// is used (starting from a dense iterate lets coordinates leave zero, which
/// the quadratic approximation itself cannot do).
pub fn solve_penalized_dual(
    basis: &BasisMatrix,
    targets: ArrayView1<'_, f64>,
    params: ScadParams,
    opts: SolveOptions,
    init: Option<ArrayView1<'_, f64>>,
) -> Result<CalibrationSolution> {
    if params.xi == 0.0 {
        return solve_dual(basis, targets, opts);
    }
    check_rank(basis)?;
    let g = basis.values.view();
    let k = g.ncols();
    if targets.len() != k {
        return Err(Error::DimensionMismatch {
            context: "calibration targets".into(),
            expected: k,
            found: targets.len(),
        });
    }

    let mut total_iters = 0;
    let mut lambda = match init {
        Some(v) => v.to_owned(),
        None => {
            let (l, it) = newton_loop(g, targets, Array1::zeros(k), opts)?;
            total_iters += it;
            l
        }
    };

    // Active-set LQA. Within a pass, coordinates entering the magnitude
    // band below the hard threshold are frozen where they are — updating
    // them makes the quadratic model's diagonal stiff (ξ/(|λ|+ε)) and
    // stalls every surviving coordinate. Between passes the frozen
    // coordinates are hard-thresholded to exact zero and the system
    // re-solved on the survivors. A zeroed coordinate violating the
    // subdifferential condition |gradient| ≤ ξ re-enters, seeded just
    // outside the band (the quadratic approximation cannot move a
    // coordinate sitting exactly at zero).
    let mut active: Vec<usize> = (0..k).collect();
    for _round in 0..12 {
        let it = lqa_loop(g, targets, &mut lambda, &mut active, params)?;
        total_iters += it;
        let mut swept = false;
        for j in 0..k {
            if lambda[j] != 0.0 && !active.contains(&j) {
                lambda[j] = 0.0;
                swept = true;
            }
        }
        if swept {
            active = (0..k).filter(|&j| lambda[j] != 0.0).collect();
            continue;
        }
        let (_, grad, q) = dual_state(lambda.view(), g, targets);
        let mut reactivated = false;
        for j in 0..k {
            if lambda[j] != 0.0 {
                continue;
            }
            // One-dimensional model along coordinate j: the penalized
            // optimum sits at (|∇_j| − ξ)/H_jj past the kink. Zero stays
            // optimal unless that point clears the hard threshold — a
            // violation smaller than the threshold would be swept right
            // back, so re-entry would only cycle.
            let slack = grad[j].abs() - params.xi;
            if slack <= 0.0 {
                continue;
            }
            let col = g.column(j);
            let mean: f64 = col.iter().zip(q.iter()).map(|(&v, &w)| v * w).sum();
            let h_jj: f64 = col
                .iter()
                .zip(q.iter())
                .map(|(&v, &w)| w * (v - mean) * (v - mean))
                .sum::<f64>()
                .max(1e-12);
            if slack > h_jj * HARD_THRESHOLD {
                lambda[j] = -grad[j].signum() * slack / h_jj;
                active.push(j);
                reactivated = true;
            }
        }
        if !reactivated {
            return Ok(solution_from_lambda(lambda, g, targets, total_iters, params.xi));
        }
        active.sort_unstable();
        active.dedup();
    }
    Err(Error::NotConverged {
        iterations: total_iters,
        residual_norm: {
            let (_, grad, _) = dual_state(lambda.view(), g, targets);
            norm_inf(grad.view())
        },
        last_iterate: lambda.to_vec(),
    })
}

/// One local-quadratic-approximation loop updating only `active` coordinates
/// of `lambda`. Coordinates are frozen out of `active` (values left in
/// place) once further updates could only creep; the caller zeroes them
/// between passes. Returns iterations used; convergence is penalized-score
/// stationarity over the survivors.
///
/// All per-iteration linear algebra runs on the active column block; the
/// frozen columns' contributions to the linear predictor, the target inner
/// product, and the penalty are cached and re-derived only when the active
/// set changes.
fn lqa_loop(
    g: ArrayView2<'_, f64>,
    targets: ArrayView1<'_, f64>,
    lambda: &mut Array1<f64>,
    active: &mut Vec<usize>,
    params: ScadParams,
) -> Result<usize> {
    let k = lambda.len();
    let mut prev_move: Option<Array1<f64>> = None;
    let mut cache = ActiveBlock::build(g, targets, lambda, active, params);
    for iter in 0..PENALIZED_MAX_ITER {
        if active.is_empty() {
            return Ok(iter);
        }
        let na = active.len();
        let l_act: Array1<f64> = active.iter().map(|&i| lambda[i]).collect();
        let eta = &cache.base_eta + &cache.g_act.dot(&l_act);
        let (q, lse) = softmax(eta.view());
        let value = cache.value_at(&l_act, lse, params);
        let grad_act = cache.g_act.t().dot(&q) - &cache.t_act;

        // Freeze sweep: a coordinate stops being updated once it is inside
        // the magnitude band (its E-diagonal entry ξ/(|λ|+ε) would otherwise
        // dwarf the Hessian and stall every other coordinate), or once it is
        // below the penalty kink with a one-dimensional optimum inside the
        // band — such a coordinate only creeps toward zero at rate
        // 1 − score/ξ per iteration, so we short-circuit the crawl. Frozen
        // values stay put; the caller zeroes them between passes.
        let keep: Vec<usize> = (0..na)
            .filter(|&ai| {
                let i = active[ai];
                let magnitude = lambda[i].abs();
                if magnitude < HARD_THRESHOLD {
                    return false;
                }
                if magnitude >= params.xi {
                    return true;
                }
                let col = cache.g_act.column(ai);
                let mean: f64 = col.dot(&q);
                let h_ii: f64 = col
                    .iter()
                    .zip(q.iter())
                    .map(|(&v, &w)| w * (v - mean) * (v - mean))
                    .sum::<f64>()
                    .max(1e-12);
                // Quadratic-model gradient re-based at zero; a stationary
                // point at small nonzero λ_i has |∇_i| = ξ, so the raw
                // gradient cannot distinguish it from a coordinate headed
                // for zero.
                let slack = (grad_act[ai] - h_ii * lambda[i]).abs() - params.xi;
                slack > h_ii * HARD_THRESHOLD
            })
            .collect();
        if keep.len() < na {
            *active = keep.iter().map(|&ai| active[ai]).collect();
            cache = ActiveBlock::build(g, targets, lambda, active, params);
            continue;
        }

        // Stationarity over the survivors: the penalized score must vanish.
        let mut kkt = 0.0_f64;
        let mut score = Array1::zeros(na);
        for (ai, &i) in active.iter().enumerate() {
            let pen = scad_derivative(lambda[i].abs(), params);
            score[ai] = grad_act[ai] + pen * lambda[i].signum();
            kkt = kkt.max(score[ai].abs());
        }
        if kkt < KKT_TOL {
            return Ok(iter);
        }

        // Reduced system: q-weighted covariance of the active block plus
        // the quadratic-approximation diagonal. The q-weighted column means
        // come for free as grad + targets (grad = Gᵀq − targets).
        let mut h_red = {
            let mut centered = cache.g_act.to_owned();
            for (i, mut row) in centered.outer_iter_mut().enumerate() {
                let s = q[i].sqrt();
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - (grad_act[j] + cache.t_act[j])) * s;
                }
            }
            centered.t().dot(&centered)
        };
        for (ai, &i) in active.iter().enumerate() {
            let pen = scad_derivative(lambda[i].abs(), params);
            h_red[[ai, ai]] += pen / (lambda[i].abs() + LQA_EPS);
        }
        let delta_red = solve_spd(h_red.view(), (-&score).view())?;
        let slope: f64 = score.dot(&delta_red);
        let dir_eta = cache.g_act.dot(&delta_red);

        let mut delta = Array1::zeros(k);
        for (ai, &i) in active.iter().enumerate() {
            delta[i] = delta_red[ai];
        }

        // The quadratic model majorizes the penalty near a small stationary
        // coordinate (curvature ξ/(|λ|+ε) versus a locally linear penalty),
        // so plain unit steps contract geometrically. When consecutive
        // directions are nearly collinear, first try the geometric-series
        // limit 1/(1−ρ) of the crawl; the acceptance test below still
        // guards it, so a failed extrapolation just falls back to 1.
        let mut step = 1.0;
        if let Some(prev) = prev_move.as_ref() {
            let dot = delta.dot(prev);
            let nd = delta.dot(&delta).sqrt();
            let np = prev.dot(prev).sqrt();
            if nd > 0.0 && np > 0.0 {
                let cos = dot / (nd * np);
                let rho = nd / np;
                if cos > 0.9 && rho > 0.3 && rho < 0.999 {
                    step = (1.0 / (1.0 - rho)).min(100.0);
                }
            }
        }
        let mut accepted = false;
        while step >= 1e-12 {
            let cand_l = &l_act + &(step * &delta_red);
            let cand_eta = &eta + &(step * &dir_eta);
            let (cand_q, cand_lse) = softmax(cand_eta.view());
            let cand_value = cache.value_at(&cand_l, cand_lse, params);
            // Same float-resolution fallback as the unpenalized loop: when
            // the promised decrease is beneath the value's ulp, accept on a
            // strict reduction of the penalized score instead.
            let take = cand_value <= value + 1e-4 * step * slope.min(0.0)
                || ((step * slope).abs() <= f64::EPSILON * (1.0 + value.abs()) && {
                    let cand_grad = cache.g_act.t().dot(&cand_q) - &cache.t_act;
                    let mut cand_kkt = 0.0_f64;
                    for ai in 0..na {
                        let pen = scad_derivative(cand_l[ai].abs(), params);
                        cand_kkt =
                            cand_kkt.max((cand_grad[ai] + pen * cand_l[ai].signum()).abs());
                    }
                    cand_kkt <= (1.0 - 1e-4 * step) * kkt
                });
            if take {
                let moved = step * norm_inf(delta.view());
                for (ai, &i) in active.iter().enumerate() {
                    lambda[i] = cand_l[ai];
                }
                accepted = true;
                prev_move = Some(step * &delta);
                if moved < 1e-10 * (1.0 + norm_inf(lambda.view())) {
                    return Ok(iter + 1);
                }
                break;
            }
            step = if step > 1.0 { 1.0 } else { step * 0.5 };
        }
        if !accepted {
            // No descent direction survives damping: the iterate is at the
            // bottom of the quadratic model; stop here.
            return Ok(iter + 1);
        }
    }
    Ok(PENALIZED_MAX_ITER)
}

/// Column block and frozen-coordinate offsets backing [`lqa_loop`].
struct ActiveBlock {
    /// Trial basis restricted to the active columns (n × |active|).
    g_act: Array2<f64>,
    /// Targets restricted to the active columns.
    t_act: Array1<f64>,
    /// Linear-predictor contribution of frozen nonzero coordinates.
    base_eta: Array1<f64>,
    /// λᵀ targets contribution of frozen coordinates.
    base_dot: f64,
    /// Penalty contribution of frozen coordinates.
    base_pen: f64,
}

impl ActiveBlock {
    fn build(
        g: ArrayView2<'_, f64>,
        targets: ArrayView1<'_, f64>,
        lambda: &Array1<f64>,
        active: &[usize],
        params: ScadParams,
    ) -> Self {
        let (n, k) = g.dim();
        let na = active.len();
        let mut g_act = Array2::zeros((n, na));
        let mut t_act = Array1::zeros(na);
        for (ai, &i) in active.iter().enumerate() {
            g_act.column_mut(ai).assign(&g.column(i));
            t_act[ai] = targets[i];
        }
        let mut is_active = vec![false; k];
        for &i in active {
            is_active[i] = true;
        }
        let mut base_eta = Array1::zeros(n);
        let mut base_dot = 0.0;
        let mut base_pen = 0.0;
        for j in 0..k {
            if is_active[j] || lambda[j] == 0.0 {
                continue;
            }
            base_pen += scad_penalty(lambda[j].abs(), params);
            base_dot += lambda[j] * targets[j];
            base_eta.scaled_add(lambda[j], &g.column(j));
        }
        ActiveBlock {
            g_act,
            t_act,
            base_eta,
            base_dot,
            base_pen,
        }
    }

    /// Penalized dual value at active coordinates `l_act`, given the
    /// log-sum-exp of the full linear predictor.
    fn value_at(&self, l_act: &Array1<f64>, lse: f64, params: ScadParams) -> f64 {
        lse - (self.base_dot + l_act.dot(&self.t_act)) + self.base_pen
            + l_act
                .iter()
                .map(|&l| scad_penalty(l.abs(), params))
                .sum::<f64>()
    }
}

/// Default penalty grid: 20 points log-spaced over [1e-4, 1] scaled by the
/// size of the imbalance at λ = 0.
pub fn default_xi_grid(basis: &BasisMatrix, targets: ArrayView1<'_, f64>) -> Vec<f64> {
    let (_, grad0) = dual_objective(
        Array1::zeros(basis.k()).view(),
        basis.values.view(),
        targets,
    );
    let scale = norm_inf(grad0.view()).max(1e-12);
    let points = 20;
    (0..points)
        .map(|i| {
            let t = i as f64 / (points - 1) as f64;
            // 10^(-4(1-t)) sweeps 1e-4 .. 1 geometrically.
            scale * 10f64.powf(-4.0 * (1.0 - t))
        })
        .collect()
}

/// Held-out balance loss and selection for one ξ over the folds.
#[derive(Debug, Clone, Serialize)]
pub struct CvPoint {
    pub xi: f64,
    pub loss: f64,
}

/// Pick the SCAD level by 5-fold cross-validation on the trial rows.
///
/// For each candidate ξ the penalized dual is fit on four folds; weights are
/// renormalized over the held-out fold and the loss
/// Σ_i q_i ‖g(X_i) − g̃‖₂ / K̂ accumulated, with K̂ the number of selected
/// columns (fits selecting nothing score +∞). The target moments g̃ stay
/// fixed at the full real-world values throughout. Ties prefer the smaller
/// ξ, then the earlier grid entry.
pub fn cv_select_xi(
    basis: &BasisMatrix,
    targets: ArrayView1<'_, f64>,
    grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let n = basis.values.nrows();
    if n < folds {
        return Err(Error::InvalidConfig(format!(
            "{n} trial rows cannot form {folds} folds"
        )));
    }

    // Seeded shuffle, then contiguous chunks of near-equal size.
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, Stream::CrossValidation, 0);
    shuffle(&mut order, &mut rng);
    let fold_of: Vec<usize> = {
        let mut f = vec![0usize; n];
        for (pos, &row) in order.iter().enumerate() {
            f[row] = pos * folds / n;
        }
        f
    };

    // Residual norms ‖g_i − g̃‖₂ are fold-independent; compute once.
    let resid_norm: Vec<f64> = (0..n)
        .map(|i| {
            basis
                .values
                .row(i)
                .iter()
                .zip(targets.iter())
                .map(|(&g, &t)| (g - t) * (g - t))
                .sum::<f64>()
                .sqrt()
        })
        .collect();

    let mut losses = vec![0.0_f64; grid.len()];
    let mut any_success = false;
    let mut last_error: Option<Error> = None;

    for fold in 0..folds {
        let train_rows: Vec<usize> = (0..n).filter(|&i| fold_of[i] != fold).collect();
        let heldout_rows: Vec<usize> = (0..n).filter(|&i| fold_of[i] == fold).collect();
        if heldout_rows.is_empty() {
            continue;
        }
        let train = BasisMatrix {
            values: select_rows(basis.values.view(), &train_rows),
            names: basis.names.clone(),
        };
        // Shared dense starting point for every ξ on this fold.
        let init = match solve_dual(&train, targets, SolveOptions::default()) {
            Ok(s) => Some(s.lambda),
            Err(e) => {
                last_error = Some(e);
                None
            }
        };
        // Walk the grid from the smallest penalty up, seeding each level
        // with the previous level's solution; neighbouring solutions are
        // close, so most solves finish in a handful of iterations. A failed
        // level falls back to the dense unpenalized start.
        let mut warm = init.clone();
        for (gi, &xi) in grid.iter().enumerate() {
            if !losses[gi].is_finite() {
                continue;
            }
            let fit = match &warm {
                Some(l) => solve_penalized_dual(
                    &train,
                    targets,
                    ScadParams::new(xi),
                    SolveOptions::default(),
                    Some(l.view()),
                ),
                None => Err(last_error
                    .clone()
                    .unwrap_or(Error::InvalidConfig("fold init failed".into()))),
            };
            match fit {
                Ok(sol) => {
                    any_success = true;
                    warm = Some(sol.lambda.clone());
                    let k_hat = sol.n_selected();
                    if k_hat == 0 {
                        losses[gi] = f64::INFINITY;
                        continue;
                    }
                    // Renormalize exp(λᵀg) over the held-out rows.
                    let eta: Vec<f64> = heldout_rows
                        .iter()
                        .map(|&i| basis.values.row(i).dot(&sol.lambda))
                        .collect();
                    let max = eta.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    let total: f64 = eta.iter().map(|&v| (v - max).exp()).sum();
                    let fold_loss: f64 = heldout_rows
                        .iter()
                        .zip(&eta)
                        .map(|(&i, &e)| (e - max).exp() / total * resid_norm[i])
                        .sum();
                    losses[gi] += fold_loss / k_hat as f64;
                }
                Err(e) => {
                    losses[gi] = f64::INFINITY;
                    last_error = Some(e);
                    warm = init.clone();
                }
            }
        }
    }

    if !any_success {
        return Err(Error::AllFoldsFailed {
            last: last_error
                .map(|e| e.to_string())
                .unwrap_or_else(|| "no folds evaluated".into()),
        });
    }

    let mut best = 0usize;
    for gi in 1..grid.len() {
        let better = losses[gi] < losses[best]
            || (losses[gi] == losses[best] && grid[gi] < grid[best]);
        if better {
            best = gi;
        }
    }
    if !losses[best].is_finite() {
        return Err(Error::AllFoldsFailed {
            last: "every penalty level scored +inf".into(),
        });
    }
    Ok((grid[best], losses))
}

fn select_rows(values: ArrayView2<'_, f64>, rows: &[usize]) -> Array2<f64> {
    let k = values.ncols();
    let mut out = Array2::zeros((rows.len(), k));
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(r).assign(&values.row(i));
    }
    out
}

fn shuffle(order: &mut [usize], rng: &mut impl rand::Rng) {
    use rand::seq::SliceRandom;
    order.shuffle(rng);
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn basis_of(values: Array2<f64>) -> BasisMatrix {
        let names = (1..=values.ncols()).map(|j| format!("x{j}")).collect();
        BasisMatrix { values, names }
    }

    #[test]
    fn zero_multiplier_gives_log_n_and_mean_gradient() {
        let b = basis_of(array![[-1.0, 2.0], [0.0, 1.0], [1.0, -3.0], [2.0, 0.5]]);
        let targets = array![0.2, 0.0];
        let (value, grad) = dual_objective(
            Array1::zeros(2).view(),
            b.values.view(),
            targets.view(),
        );
        assert_abs_diff_eq!(value, 4.0_f64.ln(), epsilon = 1e-15);
        // Unweighted column means: (0.5, 0.125).
        assert_abs_diff_eq!(grad[0], 0.5 - 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(grad[1], 0.125, epsilon = 1e-15);
    }

    #[test]
    fn already_balanced_solves_in_zero_iterations() {
        let b = basis_of(array![[-1.0], [0.0], [1.0], [2.0]]);
        let targets = array![0.5]; // the unweighted mean
        let sol = solve_dual(&b, targets.view(), SolveOptions::default()).unwrap();
        assert_eq!(sol.iterations, 0);
        assert_abs_diff_eq!(sol.lambda[0], 0.0, epsilon = 1e-12);
        for &q in sol.weights.iter() {
            assert_abs_diff_eq!(q, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn duplicate_column_reports_singular_jacobian() {
        let b = BasisMatrix {
            values: array![[1.0, 1.0], [2.0, 2.0], [-1.0, -1.0], [0.5, 0.5]],
            names: vec!["x1".into(), "x1_copy".into()],
        };
        match solve_dual(&b, array![0.0, 0.0].view(), SolveOptions::default()) {
            Err(Error::SingularJacobian { columns }) => {
                assert_eq!(columns, vec!["x1_copy".to_string()]);
            }
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn solved_weights_balance_the_basis() {
        let b = basis_of(array![
            [-1.2, 0.3],
            [0.4, -0.8],
            [1.9, 0.1],
            [0.3, 1.4],
            [-0.6, -0.2],
            [2.2, 0.9]
        ]);
        let targets = array![0.4, 0.1];
        let sol = solve_dual(&b, targets.view(), SolveOptions::default()).unwrap();
        assert!(norm_inf(sol.balance_residual.view()) <= 1e-9);
        assert_abs_diff_eq!(sol.weights.sum(), 1.0, epsilon = 1e-12);
        assert!(sol.weights.iter().all(|&q| q > 0.0));
    }

    #[test]
    fn scad_derivative_piecewise_values() {
        let p = ScadParams::new(0.8);
        assert_eq!(scad_derivative(0.0, p), 0.8);
        assert_eq!(scad_derivative(0.4, p), 0.8);
        assert_abs_diff_eq!(scad_derivative(0.8, p), 0.8, epsilon = 1e-15);
        // t = 2ξ: (bξ − 2ξ)/(b − 1) = ξ(b−2)/(b−1) = 0.8·1.7/2.7.
        assert_abs_diff_eq!(scad_derivative(1.6, p), 0.8 * 1.7 / 2.7, epsilon = 1e-15);
        assert_eq!(scad_derivative(0.8 * 3.7, p), 0.0);
        assert_eq!(scad_derivative(0.8 * 7.4, p), 0.0);
    }

    #[test]
    fn scad_derivative_continuous_at_knots() {
        let p = ScadParams::new(0.37);
        let eps = 1e-12;
        assert_abs_diff_eq!(
            scad_derivative(p.xi - eps, p),
            scad_derivative(p.xi + eps, p),
            epsilon = 1e-11
        );
        assert_abs_diff_eq!(
            scad_derivative(p.b * p.xi - eps, p),
            scad_derivative(p.b * p.xi + eps, p),
            epsilon = 1e-11
        );
    }

    #[test]
    fn scad_penalty_is_integral_of_derivative() {
        let p = ScadParams::new(0.5);
        for &t in &[0.0, 0.2, 0.5, 0.9, 1.5, 1.85, 2.5, 10.0] {
            // Trapezoid quadrature of q over [0, t].
            let steps = 20000;
            let mut acc = 0.0;
            for s in 0..steps {
                let a = t * s as f64 / steps as f64;
                let b = t * (s + 1) as f64 / steps as f64;
                acc += 0.5 * (scad_derivative(a, p) + scad_derivative(b, p)) * (b - a);
            }
            assert_abs_diff_eq!(scad_penalty(t, p), acc, epsilon = 1e-6);
        }
        // Flat past bξ.
        assert_eq!(scad_penalty(3.0, p), scad_penalty(100.0, p));
        assert_abs_diff_eq!(
            scad_penalty(100.0, p),
            0.25 * (3.7 + 1.0) / 2.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn zero_penalty_matches_unpenalized() {
        let b = basis_of(array![
            [-1.0, 0.3],
            [0.0, -0.8],
            [1.0, 0.1],
            [2.0, 1.4],
            [0.3, -0.2]
        ]);
        let targets = array![0.3, 0.05];
        let plain = solve_dual(&b, targets.view(), SolveOptions::default()).unwrap();
        let pen = solve_penalized_dual(
            &b,
            targets.view(),
            ScadParams::new(0.0),
            SolveOptions::default(),
            None,
        )
        .unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(plain.lambda[j], pen.lambda[j], epsilon = 1e-8);
        }
    }

    #[test]
    fn huge_penalty_shrinks_everything() {
        let b = basis_of(array![[-1.0], [0.0], [1.0], [2.0]]);
        let targets = array![0.45];
        let plain = solve_dual(&b, targets.view(), SolveOptions::default()).unwrap();
        let xi = 10.0 * plain.lambda[0].abs();
        let pen = solve_penalized_dual(
            &b,
            targets.view(),
            ScadParams::new(xi),
            SolveOptions::default(),
            None,
        )
        .unwrap();
        assert_eq!(pen.lambda[0], 0.0);
        assert_eq!(pen.n_selected(), 0);
        for &q in pen.weights.iter() {
            assert_abs_diff_eq!(q, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn cv_rejects_empty_grid() {
        let b = basis_of(array![[-1.0], [0.0], [1.0], [2.0], [0.5]]);
        assert!(matches!(
            cv_select_xi(&b, array![0.3].view(), &[], 5, 1),
            Err(Error::EmptyGrid)
        ));
    }

    #[test]
    fn cv_degenerate_zero_grid_returns_zero() {
        let values = Array2::from_shape_fn((40, 2), |(i, j)| {
            ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0
        });
        let b = basis_of(values);
        let targets = array![0.1, -0.05];
        let (xi, losses) = cv_select_xi(&b, targets.view(), &[0.0], 5, 7).unwrap();
        assert_eq!(xi, 0.0);
        assert_eq!(losses.len(), 1);
        assert!(losses[0].is_finite());
    }

    #[test]
    fn cv_duplicate_grid_entries_tie_to_first() {
        let values = Array2::from_shape_fn((40, 2), |(i, j)| {
            ((i * 5 + j * 2) % 13) as f64 / 6.0 - 1.0
        });
        let b = basis_of(values);
        let targets = array![0.12, -0.02];
        let (_, losses) = cv_select_xi(&b, targets.view(), &[0.05, 0.05], 5, 3).unwrap();
        assert_eq!(losses[0], losses[1]);
    }

    #[test]
    fn default_grid_spans_four_decades() {
        let b = basis_of(array![[-1.0], [0.0], [1.0], [2.0]]);
        let grid = default_xi_grid(&b, array![0.0].view());
        assert_eq!(grid.len(), 20);
        // ‖grad(0)‖∞ = |mean − target| = 0.5.
        assert_abs_diff_eq!(grid[0], 0.5e-4, epsilon = 1e-18);
        assert_abs_diff_eq!(grid[19], 0.5, epsilon = 1e-12);
        assert!(grid.windows(2).all(|w| w[0] < w[1]));
    }
}
