//! Penalized-quadratic building blocks shared by every M-step update.
//!
//! All problems are written as maximizations:
//! `½·Σ d_i (c_i − b_0 − x_i'b)²` is subtracted, and so is `γ‖b‖₁`.

use nalgebra::DMatrix;

use crate::error::{MoeError, Result};
use crate::model::LinearCoef;

/// `sign(u) · max(|u| − γ, 0)`.
#[inline]
pub fn soft_threshold(u: f64, gamma: f64) -> f64 {
    debug_assert!(gamma >= 0.0);
    if u > gamma {
        u - gamma
    } else if u < -gamma {
        u + gamma
    } else {
        0.0
    }
}

/// Weighted least squares with an ℓ1 penalty on the slopes:
/// maximize `−½ Σ d_i (c_i − b_0 − x_i'b)² − γ‖b‖₁`.
#[derive(Clone, Copy, Debug)]
pub struct WeightedLassoProblem<'a> {
    pub x: &'a DMatrix<f64>,
    pub weights: &'a [f64],
    pub targets: &'a [f64],
    pub penalty: f64,
    /// When false the intercept stays at its initial value.
    pub fit_intercept: bool,
}

impl<'a> WeightedLassoProblem<'a> {
    pub fn new(x: &'a DMatrix<f64>, weights: &'a [f64], targets: &'a [f64], penalty: f64) -> Result<Self> {
        let problem = Self { x, weights, targets, penalty, fit_intercept: true };
        problem.validate()?;
        Ok(problem)
    }

    pub fn without_intercept(mut self) -> Self {
        self.fit_intercept = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.nrows();
        if self.weights.len() != n || self.targets.len() != n {
            return Err(MoeError::Dimension(format!(
                "lasso problem: {n} rows, {} weights, {} targets",
                self.weights.len(),
                self.targets.len()
            )));
        }
        if !(self.penalty >= 0.0) {
            return Err(MoeError::InvalidConfig(format!("lasso penalty {} is negative", self.penalty)));
        }
        if self.weights.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return Err(MoeError::InvalidData("lasso weights must be finite and non-negative".into()));
        }
        if !self.weights.iter().any(|&d| d > 0.0) {
            return Err(MoeError::InvalidData("lasso weights are all zero".into()));
        }
        if self.targets.iter().any(|c| !c.is_finite()) {
            return Err(MoeError::InvalidData("lasso targets must be finite".into()));
        }
        Ok(())
    }

    fn residuals(&self, b: &LinearCoef) -> Vec<f64> {
        let fitted = b.eval_all(self.x);
        self.targets.iter().zip(fitted).map(|(c, f)| c - f).collect()
    }

    /// Objective value at `b`.
    pub fn objective(&self, b: &LinearCoef) -> f64 {
        let r = self.residuals(b);
        let rss: f64 = r.iter().zip(self.weights).map(|(r, d)| d * r * r).sum();
        -0.5 * rss - self.penalty * b.l1_slopes()
    }

    /// Smooth-part scores `Σ_i d_i r_i` (intercept) and `Σ_i d_i r_i x_ij`.
    pub fn scores(&self, b: &LinearCoef) -> (f64, Vec<f64>) {
        let r = self.residuals(b);
        self.scores_from_residuals(&r)
    }

    fn scores_from_residuals(&self, r: &[f64]) -> (f64, Vec<f64>) {
        let wr: Vec<f64> = r.iter().zip(self.weights).map(|(r, d)| r * d).collect();
        let g0 = wr.iter().sum();
        let g = (0..self.x.ncols())
            .map(|j| self.x.column(j).iter().zip(&wr).map(|(x, w)| x * w).sum())
            .collect();
        (g0, g)
    }

    /// Largest violation of the subgradient optimality conditions at `b`.
    pub fn kkt_violation(&self, b: &LinearCoef) -> f64 {
        let r = self.residuals(b);
        self.kkt_from_residuals(b, &r)
    }

    fn kkt_from_residuals(&self, b: &LinearCoef, r: &[f64]) -> f64 {
        let (g0, g) = self.scores_from_residuals(r);
        let mut worst: f64 = if self.fit_intercept { g0.abs() } else { 0.0 };
        for (gj, bj) in g.iter().zip(&b.slopes) {
            let v = if *bj == 0.0 {
                (gj.abs() - self.penalty).max(0.0)
            } else {
                (gj - self.penalty * bj.signum()).abs()
            };
            worst = worst.max(v);
        }
        worst
    }
}

/// Stopping controls for [`solve_weighted_lasso`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LassoOptions {
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self { tol: 1e-7, max_sweeps: 10_000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LassoSolution {
    pub coef: LinearCoef,
    pub sweeps: usize,
    pub converged: bool,
}

/// Cyclic coordinate ascent, intercept first then slopes `1..=p`.
///
/// Each sweep records the largest coordinate move, measured in score units
/// (`|Δb_j| · Σ d_i x_ij²`). Once that drops below `tol`, the subgradient
/// conditions are checked directly. The solver stops when they hold to
/// within `tol`, or to within the floating-point noise floor of the problem.
/// A column with `Σ d_i x_ij² = 0` is pinned at zero.
pub fn solve_weighted_lasso(
    problem: &WeightedLassoProblem<'_>,
    init: &LinearCoef,
    opts: &LassoOptions,
) -> Result<LassoSolution> {
    problem.validate()?;
    let x = problem.x;
    let (n, p) = x.shape();
    if init.p() != p {
        return Err(MoeError::Dimension(format!("lasso init has {} slopes, design has {p}", init.p())));
    }
    if !(opts.tol > 0.0) {
        return Err(MoeError::InvalidConfig("lasso tol must be positive".into()));
    }
    let d = problem.weights;
    let gamma = problem.penalty;

    let curv: Vec<f64> = (0..p)
        .map(|j| x.column(j).iter().zip(d).map(|(v, w)| w * v * v).sum())
        .collect();
    let d_sum: f64 = d.iter().sum();

    // Rounding in the running residual limits how small a score can get.
    let max_abs_x = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale: f64 = d.iter().zip(problem.targets).map(|(w, c)| w * (c.abs() + 1.0)).sum::<f64>()
        * (1.0 + max_abs_x);
    let noise_floor = 1e-13 * scale;
    let kkt_tol = opts.tol.max(noise_floor);

    let mut b = init.clone();
    for (j, c) in curv.iter().enumerate() {
        if *c == 0.0 {
            b.slopes[j] = 0.0;
        }
    }
    let mut r = problem.residuals(&b);
    let mut converged = false;
    let mut sweeps = 0;

    while sweeps < opts.max_sweeps {
        sweeps += 1;
        #[cfg(debug_assertions)]
        let before = problem.objective(&b);
        let mut max_move = 0.0f64;

        if problem.fit_intercept {
            let s: f64 = r.iter().zip(d).map(|(r, w)| r * w).sum();
            let delta = s / d_sum;
            if delta != 0.0 {
                b.intercept += delta;
                for ri in r.iter_mut() {
                    *ri -= delta;
                }
                max_move = max_move.max(delta.abs() * d_sum);
            }
        }

        for j in 0..p {
            if curv[j] == 0.0 {
                continue;
            }
            let col = x.column(j);
            let old = b.slopes[j];
            let mut s = 0.0;
            for i in 0..n {
                s += d[i] * col[i] * r[i];
            }
            // Score with the j-th coordinate removed from the fit.
            let partial = s + curv[j] * old;
            let new = soft_threshold(partial, gamma) / curv[j];
            let delta = new - old;
            if delta != 0.0 {
                b.slopes[j] = new;
                for i in 0..n {
                    r[i] -= col[i] * delta;
                }
                max_move = max_move.max(delta.abs() * curv[j]);
            }
        }

        #[cfg(debug_assertions)]
        {
            let after = problem.objective(&b);
            debug_assert!(
                after >= before - 1e-9 * (1.0 + before.abs()),
                "lasso objective decreased: {before} -> {after}"
            );
        }

        if max_move < kkt_tol {
            // Refresh the running residual before the exact check.
            r = problem.residuals(&b);
            if problem.kkt_from_residuals(&b, &r) <= kkt_tol {
                converged = true;
                break;
            }
        }
    }

    Ok(LassoSolution { coef: b, sweeps, converged })
}

/// Backtracking constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineSearchConfig {
    /// Shrink factor `ρ ∈ (0, 1)`.
    pub shrink: f64,
    /// Sufficient-increase constant `σ ∈ (0, 0.5)`.
    pub sufficient_increase: f64,
    pub max_trials: usize,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        Self { shrink: 0.5, sufficient_increase: 0.01, max_trials: 30 }
    }
}

impl LineSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(MoeError::InvalidConfig("line-search shrink must lie in (0, 1)".into()));
        }
        if !(self.sufficient_increase > 0.0 && self.sufficient_increase < 0.5) {
            return Err(MoeError::InvalidConfig("line-search constant must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineSearchOutcome {
    pub point: Vec<f64>,
    pub value: f64,
    /// Accepted step; zero when no trial improved the objective.
    pub step: f64,
}

/// Backtracks along `x_t = (1 − t)·current + t·candidate` for
/// `t = 1, ρ, ρ², …`.
///
/// A trial is accepted when it strictly increases the objective and gains at
/// least `σ·t·max(predicted_gain, 0)`. The predicted gain is the surrogate's
/// first-order increase from `current` to `candidate`. Non-finite trial
/// values count as failures. If every trial fails, the current point is
/// returned with `t = 0`.
pub fn backtracking_line_search<F>(
    mut objective: F,
    current: &[f64],
    current_value: f64,
    candidate: &[f64],
    predicted_gain: f64,
    cfg: &LineSearchConfig,
) -> LineSearchOutcome
where
    F: FnMut(&[f64]) -> f64,
{
    debug_assert_eq!(current.len(), candidate.len());
    let gain = if predicted_gain.is_finite() { predicted_gain.max(0.0) } else { 0.0 };
    let mut t = 1.0;
    let mut trial = vec![0.0; current.len()];
    for _ in 0..cfg.max_trials {
        for ((o, a), b) in trial.iter_mut().zip(current).zip(candidate) {
            *o = if t == 1.0 { *b } else { a + t * (b - a) };
        }
        let v = objective(&trial);
        if v.is_finite() && v > current_value && v >= current_value + cfg.sufficient_increase * t * gain {
            return LineSearchOutcome { point: trial, value: v, step: t };
        }
        t *= cfg.shrink;
    }
    LineSearchOutcome { point: current.to_vec(), value: current_value, step: 0.0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
        assert_eq!(soft_threshold(1.7, 0.0), 1.7);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
    }

    #[test]
    fn intercept_only_is_weighted_mean() {
        let x = DMatrix::<f64>::zeros(1, 0);
        let prob = WeightedLassoProblem::new(&x, &[2.0], &[1.0], 0.0).unwrap();
        let sol = solve_weighted_lasso(&prob, &LinearCoef::zeros(0), &LassoOptions::default()).unwrap();
        assert_relative_eq!(sol.coef.intercept, 1.0, epsilon = 1e-15);
        assert!(sol.converged);

        let x = DMatrix::<f64>::zeros(3, 0);
        let prob = WeightedLassoProblem::new(&x, &[1.0, 2.0, 1.0], &[0.0, 3.0, 6.0], 0.0).unwrap();
        let sol = solve_weighted_lasso(&prob, &LinearCoef::zeros(0), &LassoOptions::default()).unwrap();
        assert_relative_eq!(sol.coef.intercept, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn one_dimensional_closed_form() {
        let x = DMatrix::from_element(1, 1, 1.0);
        let prob = WeightedLassoProblem::new(&x, &[2.0], &[1.0], 1.0).unwrap().without_intercept();
        let sol = solve_weighted_lasso(&prob, &LinearCoef::zeros(1), &LassoOptions::default()).unwrap();
        assert_relative_eq!(sol.coef.slopes[0], 0.5, epsilon = 1e-15);
        assert_eq!(sol.coef.intercept, 0.0);
    }

    #[test]
    fn unpenalized_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, p) = (5, 3);
        let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-2.0..2.0));
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..2.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let prob = WeightedLassoProblem::new(&x, &d, &c, 0.0).unwrap();
        let opts = LassoOptions { tol: 1e-12, max_sweeps: 100_000 };
        let sol = solve_weighted_lasso(&prob, &LinearCoef::zeros(p), &opts).unwrap();

        let xa = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
        let w = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(d.clone()));
        let lhs = xa.transpose() * &w * &xa;
        let rhs = xa.transpose() * &w * nalgebra::DVector::from_vec(c.clone());
        let beta = lhs.lu().solve(&rhs).unwrap();
        let got = sol.coef.to_vec();
        for j in 0..=p {
            assert_relative_eq!(got[j], beta[j], epsilon = 1e-8);
        }
    }

    #[test]
    fn zero_column_is_pinned() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 0.0, -1.0, 0.0]);
        let prob = WeightedLassoProblem::new(&x, &[1.0; 3], &[1.0, 2.0, 0.5], 0.0).unwrap();
        let init = LinearCoef::new(0.0, vec![0.0, 5.0]);
        let sol = solve_weighted_lasso(&prob, &init, &LassoOptions::default()).unwrap();
        assert_eq!(sol.coef.slopes[1], 0.0);
        assert!(sol.converged);
    }

    #[test]
    fn invalid_problems_rejected() {
        let x = DMatrix::from_element(2, 1, 1.0);
        assert!(WeightedLassoProblem::new(&x, &[0.0, 0.0], &[1.0, 1.0], 0.0).is_err());
        assert!(WeightedLassoProblem::new(&x, &[1.0], &[1.0, 1.0], 0.0).is_err());
        assert!(WeightedLassoProblem::new(&x, &[1.0, 1.0], &[1.0, 1.0], -1.0).is_err());
    }

    #[test]
    fn line_search_full_step() {
        let f = |v: &[f64]| -(v[0] - 1.0).powi(2);
        let out = backtracking_line_search(f, &[0.0], -1.0, &[1.0], 2.0, &LineSearchConfig::default());
        assert_eq!(out.step, 1.0);
        assert_eq!(out.point, vec![1.0]);
    }

    #[test]
    fn line_search_noop_direction() {
        let f = |v: &[f64]| -(v[0] - 1.0).powi(2);
        let out = backtracking_line_search(f, &[0.3], f(&[0.3]), &[0.3], 0.0, &LineSearchConfig::default());
        assert_eq!(out.point, vec![0.3]);
        assert_eq!(out.value, f(&[0.3]));
    }

    #[test]
    fn line_search_overshoot_shrinks() {
        // f(x) = −x² from x = 1 toward an overshooting candidate x = −3:
        // t = 1 gives −9, t = 0.5 gives −1 (no strict gain), t = 0.25 gives 0.
        let f = |v: &[f64]| -v[0] * v[0];
        let out = backtracking_line_search(f, &[1.0], -1.0, &[-3.0], 0.0, &LineSearchConfig::default());
        assert_eq!(out.step, 0.25);
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn line_search_nan_counts_as_failure() {
        let f = |v: &[f64]| if v[0] > 0.9 { f64::NAN } else { v[0] };
        let out = backtracking_line_search(f, &[0.0], 0.0, &[1.0], 0.0, &LineSearchConfig::default());
        assert_eq!(out.step, 0.5);
    }

    fn random_problem(seed: u64) -> (DMatrix<f64>, Vec<f64>, Vec<f64>, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(3..30);
        let p = rng.random_range(1..6);
        let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-2.0..2.0));
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let gamma = rng.random_range(0.0..3.0);
        (x, d, c, gamma)
    }

    proptest! {
        #[test]
        fn soft_threshold_is_odd_and_nonexpansive(u in -50.0..50.0f64, v in -50.0..50.0f64, g in 0.0..10.0f64) {
            prop_assert_eq!(soft_threshold(-u, g), -soft_threshold(u, g));
            prop_assert!((soft_threshold(u, g) - soft_threshold(v, g)).abs() <= (u - v).abs() + 1e-12);
        }

        #[test]
        fn lasso_solution_satisfies_kkt(seed in any::<u64>()) {
            let (x, d, c, gamma) = random_problem(seed);
            let prob = WeightedLassoProblem::new(&x, &d, &c, gamma).unwrap();
            let opts = LassoOptions::default();
            let sol = solve_weighted_lasso(&prob, &LinearCoef::zeros(x.ncols()), &opts).unwrap();
            prop_assert!(sol.converged);
            prop_assert!(prob.kkt_violation(&sol.coef) <= 10.0 * opts.tol);
        }

        #[test]
        fn line_search_never_decreases(a in -5.0..5.0f64, b in -5.0..5.0f64, c in -5.0..5.0f64, gain in -1.0..5.0f64) {
            let f = |v: &[f64]| -(v[0] - c).powi(2) + (3.0 * v[0]).sin();
            let fa = f(&[a]);
            let out = backtracking_line_search(f, &[a], fa, &[b], gain, &LineSearchConfig::default());
            prop_assert!(out.value >= fa);
            prop_assert!(out.step >= 0.0 && out.step <= 1.0);
        }
    }
}
