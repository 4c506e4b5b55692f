//! M-step updates for the expert networks, one component at a time.
//!
//! Every update maximizes the component's share of the EM surrogate, with
//! the responsibilities `τ_ik` fixed, minus `λ_k‖β_k‖₁`.

use nalgebra::DMatrix;

use crate::error::{MoeError, Result};
use crate::gating::{fit_softmax_regression, softmax_penalized_objective, softmax_smooth_gradient, GatingOptions};
use crate::model::{LinearCoef, SIGMA_FLOOR};
use crate::prox::{backtracking_line_search, solve_weighted_lasso, LassoOptions, LineSearchConfig, WeightedLassoProblem};

pub use crate::gating::GatingVariant as CurvatureVariant;

/// Total responsibility below which a component is treated as empty.
pub const EMPTY_MASS: f64 = 1e-8;

/// Linear predictors are clamped to `±ETA_CLAMP` when a Poisson surrogate is built.
pub const ETA_CLAMP: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpertOptions {
    /// Curvature model for multinomial experts.
    pub variant: CurvatureVariant,
    pub tol: f64,
    pub max_outer: usize,
    pub lasso: LassoOptions,
    pub line_search: LineSearchConfig,
}

impl Default for ExpertOptions {
    fn default() -> Self {
        Self {
            variant: CurvatureVariant::Bounded,
            tol: 1e-6,
            max_outer: 100,
            lasso: LassoOptions::default(),
            line_search: LineSearchConfig::default(),
        }
    }
}

fn check_mass(k: usize, tau: &[f64]) -> Result<()> {
    let mass: f64 = tau.iter().sum();
    if !(mass >= EMPTY_MASS) {
        return Err(MoeError::EmptyComponent { component: k, mass });
    }
    Ok(())
}

fn check_lengths(x: &DMatrix<f64>, tau: &[f64], y_len: usize, init: &LinearCoef) -> Result<()> {
    if tau.len() != x.nrows() || y_len != x.nrows() {
        return Err(MoeError::Dimension(format!(
            "{} rows, {} responsibilities, {} responses",
            x.nrows(),
            tau.len(),
            y_len
        )));
    }
    if init.p() != x.ncols() {
        return Err(MoeError::Dimension(format!("expert has {} slopes, design has {}", init.p(), x.ncols())));
    }
    Ok(())
}

/// Penalized Gaussian expert objective for fixed `σ`:
/// `Σ τ_i log N(y_i; η_i, σ²) − λ‖β‖₁`.
pub fn gaussian_objective(tau: &[f64], x: &DMatrix<f64>, y: &[f64], beta: &LinearCoef, sigma: f64, lambda: f64) -> f64 {
    let eta = beta.eval_all(x);
    let half_log_two_pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut total = 0.0;
    for i in 0..y.len() {
        if tau[i] != 0.0 {
            let z = (y[i] - eta[i]) / sigma;
            total += tau[i] * (-half_log_two_pi - sigma.ln() - 0.5 * z * z);
        }
    }
    total - lambda * beta.l1_slopes()
}

/// Coefficient update of a Gaussian expert with `σ` held fixed.
///
/// Scaling the expert objective by `σ²` turns it into a weighted lasso with
/// weights `τ`, targets `y` and penalty `λσ²`.
pub fn update_gaussian_expert(
    k: usize,
    tau: &[f64],
    x: &DMatrix<f64>,
    y: &[f64],
    lambda: f64,
    init: &LinearCoef,
    sigma: f64,
    lasso: &LassoOptions,
) -> Result<LinearCoef> {
    check_lengths(x, tau, y.len(), init)?;
    check_mass(k, tau)?;
    let problem = WeightedLassoProblem::new(x, tau, y, lambda * sigma * sigma)?;
    Ok(solve_weighted_lasso(&problem, init, lasso)?.coef)
}

/// Weighted residual mean square `Σ τ r² / Σ τ`, floored at `SIGMA_FLOOR²`.
pub fn update_gaussian_sigma(k: usize, tau: &[f64], x: &DMatrix<f64>, y: &[f64], beta: &LinearCoef) -> Result<f64> {
    check_lengths(x, tau, y.len(), beta)?;
    check_mass(k, tau)?;
    let eta = beta.eval_all(x);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..y.len() {
        let r = y[i] - eta[i];
        num += tau[i] * r * r;
        den += tau[i];
    }
    Ok((num / den).max(SIGMA_FLOOR * SIGMA_FLOOR))
}

/// Pooled variance across components for a tied-`σ` model.
pub fn pooled_gaussian_sigma(tau: &DMatrix<f64>, x: &DMatrix<f64>, y: &[f64], betas: &[LinearCoef]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (k, beta) in betas.iter().enumerate() {
        let eta = beta.eval_all(x);
        for i in 0..y.len() {
            let r = y[i] - eta[i];
            num += tau[(i, k)] * r * r;
            den += tau[(i, k)];
        }
    }
    (num / den).max(SIGMA_FLOOR * SIGMA_FLOOR)
}

/// Smooth Poisson expert objective `Σ τ_i (y_i η_i − exp η_i)`, without the
/// constant `log y_i!` terms.
pub fn poisson_smooth_objective(tau: &[f64], x: &DMatrix<f64>, y: &[u64], beta: &LinearCoef) -> f64 {
    let eta = beta.eval_all(x);
    let mut total = 0.0;
    for i in 0..y.len() {
        if tau[i] != 0.0 {
            total += tau[i] * (y[i] as f64 * eta[i] - eta[i].exp());
        }
    }
    total
}

/// Gradient of [`poisson_smooth_objective`] as `(intercept, slopes...)`.
pub fn poisson_gradient(tau: &[f64], x: &DMatrix<f64>, y: &[u64], beta: &LinearCoef) -> Vec<f64> {
    let eta = beta.eval_all(x);
    let resid: Vec<f64> = (0..y.len()).map(|i| tau[i] * (y[i] as f64 - eta[i].exp())).collect();
    let mut g = vec![resid.iter().sum()];
    for j in 0..x.ncols() {
        g.push(x.column(j).iter().zip(&resid).map(|(a, b)| a * b).sum());
    }
    g
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoissonSurrogate {
    pub weights: Vec<f64>,
    pub targets: Vec<f64>,
    /// Number of linear predictors that hit the clamp.
    pub clamped: usize,
}

/// Quadratic model of the Poisson objective at `beta`: weights
/// `τ exp(η)` and working responses `y exp(−η) − 1 + η`.
pub fn build_poisson_surrogate(tau: &[f64], x: &DMatrix<f64>, y: &[u64], beta: &LinearCoef) -> PoissonSurrogate {
    let eta = beta.eval_all(x);
    let mut clamped = 0;
    let mut weights = Vec::with_capacity(y.len());
    let mut targets = Vec::with_capacity(y.len());
    for i in 0..y.len() {
        let mut e = eta[i];
        if e.abs() > ETA_CLAMP {
            clamped += 1;
            e = e.clamp(-ETA_CLAMP, ETA_CLAMP);
        }
        let rate = e.exp();
        weights.push(tau[i] * rate);
        targets.push(y[i] as f64 / rate - 1.0 + e);
    }
    PoissonSurrogate { weights, targets, clamped }
}

/// Outcome of an iterative expert update.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertUpdate<T> {
    pub coefs: T,
    pub objective: f64,
    pub iterations: usize,
    pub clamped: usize,
}

/// Proximal-Newton update of a Poisson expert.
pub fn update_poisson_expert(
    k: usize,
    tau: &[f64],
    x: &DMatrix<f64>,
    y: &[u64],
    lambda: f64,
    init: &LinearCoef,
    opts: &ExpertOptions,
) -> Result<ExpertUpdate<LinearCoef>> {
    check_lengths(x, tau, y.len(), init)?;
    check_mass(k, tau)?;
    let objective = |b: &LinearCoef| poisson_smooth_objective(tau, x, y, b) - lambda * b.l1_slopes();
    let flat_objective = |v: &[f64]| objective(&LinearCoef::from_slice(v));

    let mut current = init.clone();
    let mut current_value = objective(&current);
    let mut clamped = 0;
    let mut iterations = 0;
    while iterations < opts.max_outer {
        iterations += 1;
        let s = build_poisson_surrogate(tau, x, y, &current);
        clamped += s.clamped;
        let problem = WeightedLassoProblem::new(x, &s.weights, &s.targets, lambda)?;
        let cand = solve_weighted_lasso(&problem, &current, &opts.lasso)?.coef;

        let grad = poisson_gradient(tau, x, y, &current);
        let cur_flat = current.to_vec();
        let cand_flat = cand.to_vec();
        let linear: f64 = grad.iter().zip(cand_flat.iter().zip(&cur_flat)).map(|(g, (a, b))| g * (a - b)).sum();
        let predicted = linear - lambda * (cand.l1_slopes() - current.l1_slopes());
        let out = backtracking_line_search(
            flat_objective,
            &cur_flat,
            current_value,
            &cand_flat,
            predicted,
            &opts.line_search,
        );
        if out.step == 0.0 {
            break;
        }
        let previous = current_value;
        current = LinearCoef::from_slice(&out.point);
        current_value = out.value;
        if (current_value - previous).abs() / (previous.abs() + 1.0) < opts.tol {
            break;
        }
    }
    Ok(ExpertUpdate { coefs: current, objective: current_value, iterations, clamped })
}

fn one_hot(labels: &[usize], levels: usize) -> DMatrix<f64> {
    let mut u = DMatrix::zeros(labels.len(), levels);
    for (i, &l) in labels.iter().enumerate() {
        u[(i, l)] = 1.0;
    }
    u
}

/// Penalized multinomial expert objective
/// `Σ τ_i [Σ_r u_ir η_ir − log Σ_r exp η_ir] − Σ_r λ_r‖β_r‖₁`.
pub fn multinomial_objective(
    tau: &[f64],
    x: &DMatrix<f64>,
    labels: &[usize],
    levels: usize,
    beta: &[LinearCoef],
    lambda: &[f64],
) -> f64 {
    softmax_penalized_objective(beta, &one_hot(labels, levels), Some(tau), x, lambda)
}

/// Gradient of the smooth multinomial objective, level by level.
pub fn multinomial_gradient(tau: &[f64], x: &DMatrix<f64>, labels: &[usize], levels: usize, beta: &[LinearCoef]) -> Vec<f64> {
    softmax_smooth_gradient(beta, &one_hot(labels, levels), Some(tau), x)
}

/// Proximal-Newton update of a multinomial-logistic expert. `lambda` holds
/// one penalty per free level.
pub fn update_multinomial_expert(
    k: usize,
    tau: &[f64],
    x: &DMatrix<f64>,
    labels: &[usize],
    levels: usize,
    lambda: &[f64],
    init: &[LinearCoef],
    opts: &ExpertOptions,
) -> Result<ExpertUpdate<Vec<LinearCoef>>> {
    if init.len() + 1 != levels || lambda.len() != init.len() {
        return Err(MoeError::Dimension(format!(
            "{levels} levels need {} coefficient blocks and penalties, got {} and {}",
            levels - 1,
            init.len(),
            lambda.len()
        )));
    }
    check_lengths(x, tau, labels.len(), &init[0])?;
    check_mass(k, tau)?;
    let gopts = GatingOptions {
        variant: opts.variant,
        tol: opts.tol,
        max_outer: opts.max_outer,
        lasso: opts.lasso,
        line_search: opts.line_search,
    };
    let fit = fit_softmax_regression(init, &one_hot(labels, levels), Some(tau), x, lambda, &gopts)?;
    Ok(ExpertUpdate { coefs: fit.rows, objective: fit.objective, iterations: fit.iterations, clamped: fit.clamped })
}
