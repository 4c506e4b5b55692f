//! Proximal-Newton M-step for the softmax gating network.
//!
//! With the responsibilities `τ` fixed, the gating part of the EM surrogate is
//! `I(w) = Σ_i [Σ_{k<K} τ_ik η_ik − log(1 + Σ_{k<K} exp η_ik)]`. The update
//! cycles over the non-reference classes. For each class it builds a
//! quadratic model of `I` in that class's coefficients and solves the
//! resulting weighted lasso. It then line-searches the joint move.
//!
//! The [`GatingVariant::Bounded`] model uses the constant curvature `1/4`.
//! That gives a global minorizer, so each cycle is an MM step. The
//! [`GatingVariant::Exact`] model uses the true diagonal curvature
//! `π(1 − π)`, clamped away from zero.
//!
//! Multinomial experts maximize the same kind of objective, with one-hot
//! targets and observation weights `τ_ik`. The machinery here is shared
//! with them.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};
use crate::model::{log_sum_exp, GatingParams, LinearCoef};
use crate::prox::{backtracking_line_search, solve_weighted_lasso, LassoOptions, LineSearchConfig, WeightedLassoProblem};

/// Floor applied to `π(1 − π)` in the exact-curvature surrogate.
pub const PROB_CLAMP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatingVariant {
    /// Diagonal curvature `π(1 − π)`.
    Exact,
    /// Constant curvature bound `1/4`.
    #[default]
    Bounded,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GatingOptions {
    pub variant: GatingVariant,
    /// Relative change in the penalized objective that ends the outer loop.
    pub tol: f64,
    pub max_outer: usize,
    pub lasso: LassoOptions,
    pub line_search: LineSearchConfig,
}

impl Default for GatingOptions {
    fn default() -> Self {
        Self {
            variant: GatingVariant::Bounded,
            tol: 1e-6,
            max_outer: 100,
            lasso: LassoOptions::default(),
            line_search: LineSearchConfig::default(),
        }
    }
}

/// Working responses `c_ik` and weights `d_ik` of the quadratic model,
/// one column per non-reference class.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingSurrogate {
    pub targets: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    /// Number of `π(1 − π)` values raised to the clamp.
    pub clamped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatingUpdate {
    pub gating: GatingParams,
    /// Penalized objective `I(w) − Σ γ_k ‖w_k‖₁` at the returned point.
    pub objective: f64,
    pub outer_iterations: usize,
    /// Total clamped curvature values seen (exact variant only).
    pub clamped: usize,
}

fn check_tau(tau: &DMatrix<f64>, x: &DMatrix<f64>, gating: &GatingParams) -> Result<()> {
    if tau.nrows() != x.nrows() || tau.ncols() != gating.k() {
        return Err(MoeError::Dimension(format!(
            "responsibilities are {}x{}, expected {}x{}",
            tau.nrows(),
            tau.ncols(),
            x.nrows(),
            gating.k()
        )));
    }
    if x.ncols() != gating.p() {
        return Err(MoeError::Dimension(format!("design has p = {}, gating has p = {}", x.ncols(), gating.p())));
    }
    Ok(())
}

/// Linear predictors of the non-reference classes, one vector per class.
fn gating_etas(gating: &GatingParams, x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    etas_of(gating.rows(), x)
}

fn etas_of(rows: &[LinearCoef], x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r.eval_all(x)).collect()
}

/// `Σ_i w_i [Σ_m t_im η_im − log(1 + Σ_m exp η_im)]` over the free classes.
fn softmax_objective(etas: &[Vec<f64>], targets: &DMatrix<f64>, obs_weights: Option<&[f64]>) -> f64 {
    let n = targets.nrows();
    let m = etas.len();
    let mut buf = vec![0.0; m + 1];
    let mut total = 0.0;
    for i in 0..n {
        let w = obs_weights.map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        let mut lin = 0.0;
        for k in 0..m {
            buf[k] = etas[k][i];
            lin += targets[(i, k)] * etas[k][i];
        }
        buf[m] = 0.0;
        total += w * (lin - log_sum_exp(&buf));
    }
    total
}

/// Row-wise softmax probabilities of the free classes.
fn probs_from_etas(etas: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
    let m = etas.len();
    let mut out = vec![vec![0.0; n]; m];
    let mut buf = vec![0.0; m + 1];
    for i in 0..n {
        for k in 0..m {
            buf[k] = etas[k][i];
        }
        buf[m] = 0.0;
        let lse = log_sum_exp(&buf);
        for k in 0..m {
            out[k][i] = (buf[k] - lse).exp();
        }
    }
    out
}

/// Gradient of [`softmax_objective`], flattened row by row as `(b_0, b)`.
fn softmax_gradient(
    etas: &[Vec<f64>],
    targets: &DMatrix<f64>,
    obs_weights: Option<&[f64]>,
    x: &DMatrix<f64>,
) -> Vec<f64> {
    let (n, p) = x.shape();
    let probs = probs_from_etas(etas, n);
    let mut grad = Vec::with_capacity(probs.len() * (p + 1));
    for (k, pk) in probs.iter().enumerate() {
        let resid: Vec<f64> =
            (0..n).map(|i| obs_weights.map_or(1.0, |w| w[i]) * (targets[(i, k)] - pk[i])).collect();
        grad.push(resid.iter().sum());
        for j in 0..p {
            grad.push(x.column(j).iter().zip(&resid).map(|(a, b)| a * b).sum());
        }
    }
    grad
}

fn class_surrogate(
    eta: &[f64],
    prob: &[f64],
    targets: &DMatrix<f64>,
    obs_weights: Option<&[f64]>,
    k: usize,
    variant: GatingVariant,
) -> (Vec<f64>, Vec<f64>, usize) {
    let n = eta.len();
    let mut c = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n);
    let mut clamped = 0;
    for i in 0..n {
        let w = obs_weights.map_or(1.0, |w| w[i]);
        let r = targets[(i, k)] - prob[i];
        match variant {
            GatingVariant::Bounded => {
                d.push(0.25 * w);
                c.push(eta[i] + 4.0 * r);
            }
            GatingVariant::Exact => {
                let raw = prob[i] * (1.0 - prob[i]);
                let curv = if raw < PROB_CLAMP {
                    clamped += 1;
                    PROB_CLAMP
                } else {
                    raw
                };
                d.push(curv * w);
                c.push(eta[i] + r / curv);
            }
        }
    }
    (c, d, clamped)
}

fn penalty_of(rows: &[LinearCoef], gamma: &[f64]) -> f64 {
    rows.iter().zip(gamma).map(|(r, g)| if *g == 0.0 { 0.0 } else { g * r.l1_slopes() }).sum()
}

fn flatten(rows: &[LinearCoef]) -> Vec<f64> {
    rows.iter().flat_map(|r| r.to_vec()).collect()
}

fn unflatten(flat: &[f64], p: usize) -> Vec<LinearCoef> {
    flat.chunks(p + 1).map(LinearCoef::from_slice).collect()
}

pub(crate) struct SoftmaxFit {
    pub rows: Vec<LinearCoef>,
    pub objective: f64,
    pub iterations: usize,
    pub clamped: usize,
}

/// Penalized objective of a softmax regression with free rows `rows`.
pub(crate) fn softmax_penalized_objective(
    rows: &[LinearCoef],
    targets: &DMatrix<f64>,
    obs_weights: Option<&[f64]>,
    x: &DMatrix<f64>,
    penalties: &[f64],
) -> f64 {
    softmax_objective(&etas_of(rows, x), targets, obs_weights) - penalty_of(rows, penalties)
}

/// Smooth-part gradient of a softmax regression.
pub(crate) fn softmax_smooth_gradient(
    rows: &[LinearCoef],
    targets: &DMatrix<f64>,
    obs_weights: Option<&[f64]>,
    x: &DMatrix<f64>,
) -> Vec<f64> {
    softmax_gradient(&etas_of(rows, x), targets, obs_weights, x)
}

/// Cyclic proximal-Newton ascent for an ℓ1-penalized softmax regression
/// with the last class as reference. `targets` has at least `rows.len()`
/// columns; the reference column is never read.
pub(crate) fn fit_softmax_regression(
    init: &[LinearCoef],
    targets: &DMatrix<f64>,
    obs_weights: Option<&[f64]>,
    x: &DMatrix<f64>,
    penalties: &[f64],
    opts: &GatingOptions,
) -> Result<SoftmaxFit> {
    let m = init.len();
    let (n, p) = x.shape();
    let objective = |flat: &[f64]| -> f64 {
        let rows = unflatten(flat, p);
        softmax_penalized_objective(&rows, targets, obs_weights, x, penalties)
    };

    let mut current: Vec<LinearCoef> = init.to_vec();
    let mut current_value = softmax_penalized_objective(&current, targets, obs_weights, x, penalties);
    let mut clamped_total = 0;
    let mut outer = 0;

    while outer < opts.max_outer {
        outer += 1;
        let mut etas = etas_of(&current, x);
        let grad = softmax_gradient(&etas, targets, obs_weights, x);
        let mut cand = current.clone();
        for k in 0..m {
            let probs = probs_from_etas(&etas, n);
            let (c, d, cl) = class_surrogate(&etas[k], &probs[k], targets, obs_weights, k, opts.variant);
            clamped_total += cl;
            let problem = WeightedLassoProblem::new(x, &d, &c, penalties[k])?;
            let sol = solve_weighted_lasso(&problem, &cand[k], &opts.lasso)?;
            etas[k] = sol.coef.eval_all(x);
            cand[k] = sol.coef;
        }

        let cur_flat = flatten(&current);
        let cand_flat = flatten(&cand);
        let linear: f64 = grad.iter().zip(cand_flat.iter().zip(&cur_flat)).map(|(g, (a, b))| g * (a - b)).sum();
        let predicted = linear - (penalty_of(&cand, penalties) - penalty_of(&current, penalties));

        let out =
            backtracking_line_search(objective, &cur_flat, current_value, &cand_flat, predicted, &opts.line_search);
        if out.step == 0.0 {
            break;
        }
        let previous = current_value;
        current = unflatten(&out.point, p);
        current_value = out.value;
        if (current_value - previous).abs() / (previous.abs() + 1.0) < opts.tol {
            break;
        }
    }

    Ok(SoftmaxFit { rows: current, objective: current_value, iterations: outer, clamped: clamped_total })
}

/// Smooth gating objective `I(w)` for fixed responsibilities.
pub fn gating_smooth_objective(gating: &GatingParams, tau: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<f64> {
    check_tau(tau, x, gating)?;
    Ok(softmax_objective(&gating_etas(gating, x), tau, None))
}

/// Gradient of `I(w)` flattened in the order of [`GatingParams::flatten`].
pub fn gating_gradient(gating: &GatingParams, tau: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_tau(tau, x, gating)?;
    Ok(softmax_gradient(&gating_etas(gating, x), tau, None, x))
}

/// Quadratic model of `I` at `gating`, for every class at once.
pub fn build_gating_surrogate(
    gating: &GatingParams,
    tau: &DMatrix<f64>,
    x: &DMatrix<f64>,
    variant: GatingVariant,
) -> Result<GatingSurrogate> {
    check_tau(tau, x, gating)?;
    let etas = gating_etas(gating, x);
    let probs = probs_from_etas(&etas, x.nrows());
    let mut out = GatingSurrogate { targets: Vec::new(), weights: Vec::new(), clamped: 0 };
    for k in 0..etas.len() {
        let (c, d, cl) = class_surrogate(&etas[k], &probs[k], tau, None, k, variant);
        out.targets.push(c);
        out.weights.push(d);
        out.clamped += cl;
    }
    Ok(out)
}

/// One M-step update of the gating network.
///
/// The penalized objective never decreases. The loop stops when its relative
/// change falls below `opts.tol`, when a line search finds no ascent, or
/// after `opts.max_outer` cycles.
pub fn update_gating(
    init: &GatingParams,
    tau: &DMatrix<f64>,
    x: &DMatrix<f64>,
    gamma: &[f64],
    opts: &GatingOptions,
) -> Result<GatingUpdate> {
    check_tau(tau, x, init)?;
    let km1 = init.k() - 1;
    if gamma.len() != km1 {
        return Err(MoeError::Dimension(format!("{} gating penalties for K = {}", gamma.len(), init.k())));
    }
    if km1 == 0 {
        return Ok(GatingUpdate { gating: init.clone(), objective: 0.0, outer_iterations: 0, clamped: 0 });
    }
    let fit = fit_softmax_regression(init.rows(), tau, None, x, gamma, opts)?;
    Ok(GatingUpdate {
        gating: GatingParams::new(init.p(), fit.rows)?,
        objective: fit.objective,
        outer_iterations: fit.iterations,
        clamped: fit.clamped,
    })
}
