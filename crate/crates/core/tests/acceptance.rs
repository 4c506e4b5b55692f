//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero when a criterion fails.
//!
//! The housing check reads `SPARSE_MOE_HOUSING`, a data CSV (13 covariate
//! columns and `y` = MEDV) in the format read by `io::read_data_csv`; it is
//! skipped when the variable is unset.

use std::fmt::Write as _;
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, Uniform};
use sparse_moe::em::{e_step, init_params};
use sparse_moe::experts::{
    gaussian_objective, multinomial_gradient, multinomial_objective, poisson_gradient, poisson_smooth_objective,
};
use sparse_moe::gating::{gating_gradient, gating_smooth_objective};
use sparse_moe::io::{read_data_csv_path, standardize, write_bic_table, write_coefficients_csv};
use sparse_moe::metrics::{adjusted_rand_index, correct_classification_rate, hard_assignment, support_metrics};
use sparse_moe::model::expert_mode;
use sparse_moe::parallel::par_map;
use sparse_moe::prox::{solve_weighted_lasso, LassoOptions, WeightedLassoProblem};
use sparse_moe::selection::{build_default_grid, GridSpec};
use sparse_moe::simgen::{gen_covariates, gen_responses, SimDesign};
use sparse_moe::{
    canonicalize_labels, fit_em, preset_design, select_model, Dataset, ExpertParams, Family, FitConfig,
    GatingParams, GatingVariant, InitStrategy, LinearCoef, MoEParameters, Response,
};

// Tolerances and protocol constants.
const MONOTONE_SLACK: f64 = 1e-8;
const MONOTONE_SEEDS_PER_CELL: u64 = 17;
const LASSO_INSTANCES: u64 = 50;
const LASSO_KKT_TOL: f64 = 1e-6;
const LASSO_OBJECTIVE_TOL: f64 = 1e-8;
const GRADIENT_POINTS: u64 = 20;
const GRADIENT_REL_TOL: f64 = 1e-6;
const UNPENALIZED_INSTANCES: usize = 10;
const UNPENALIZED_LL_TOL: f64 = 1e-4;
const UNPENALIZED_MAX_SEEDS: u64 = 30;
/// Instances whose reference fit runs off to larger coefficients have no
/// finite unpenalized maximizer and are excluded.
const REFERENCE_MAX_COEF: f64 = 25.0;
const REPLICATES: u64 = 20;
const SIMULATION_SEED: u64 = 20_240_601;
const SIMULATION_STARTS: usize = 10;
const SUPPORT_TOL: f64 = 0.15;
const BIC_DATASETS: u64 = 20;
const BIC_REQUIRED: usize = 18;
const MAX_LOGISTIC_COEF: f64 = 20.0;

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    status: Status,
    detail: String,
}

impl Outcome {
    fn check(ok: bool, detail: String) -> Self {
        Self { status: if ok { Status::Pass } else { Status::Fail }, detail }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

// ---------------------------------------------------------------- 1

fn monotone_ascent() -> Outcome {
    let mut cells = Vec::new();
    for family in [Family::Gaussian, Family::Poisson, Family::Multinomial] {
        for variant in [GatingVariant::Bounded, GatingVariant::Exact] {
            for s in 0..MONOTONE_SEEDS_PER_CELL {
                cells.push((family, variant, s));
            }
        }
    }
    let penalties = [(0.5, 0.5), (2.0, 1.0), (5.0, 3.0)];
    let results = par_map(&cells, |&(family, variant, s)| {
        let sim = preset_design(family).with_shape(150, 6).with_seed(1000 + s).simulate().expect("simulate");
        let (lambda, gamma) = penalties[s as usize % penalties.len()];
        let mut cfg = FitConfig::new(2).with_penalty(lambda, gamma).with_seed(s).with_variant(variant);
        cfg.max_em_iters = 300;
        cfg.interleaved_sigma = s % 2 == 0;
        if s % 3 == 0 {
            cfg.init = InitStrategy::RandomProjection;
        }
        fit_em(&sim.data, &cfg).map(|f| f.pl_trace.windows(2).map(|w| w[0] - w[1]).fold(f64::NEG_INFINITY, f64::max))
    });
    let fits = results.len();
    let failed = results.iter().filter(|r| r.is_err()).count();
    let worst = results.iter().filter_map(|r| r.as_ref().ok()).copied().fold(f64::NEG_INFINITY, f64::max);
    Outcome::check(
        failed == 0 && fits >= 100 && worst <= MONOTONE_SLACK,
        format!("{fits} fits, {failed} errors, largest decrease {worst:.3e} (slack {MONOTONE_SLACK:e})"),
    )
}

// ---------------------------------------------------------------- 2

/// Accelerated proximal gradient with adaptive restart; returns the
/// coefficient vector `[b0, b1..bp]`.
fn proximal_gradient_oracle(x: &DMatrix<f64>, d: &[f64], t: &[f64], penalty: f64) -> Vec<f64> {
    let (n, p) = x.shape();
    let a = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    let w = DMatrix::from_diagonal(&DVector::from_column_slice(d));
    let h = a.transpose() * &w * &a;
    let lip = h.clone().symmetric_eigen().eigenvalues.max().max(1e-12);
    let at_wt = a.transpose() * (&w * DVector::from_column_slice(t));
    let f = |b: &DVector<f64>| {
        let r = DVector::from_column_slice(t) - &a * b;
        0.5 * r.iter().zip(d).map(|(r, d)| d * r * r).sum::<f64>() + penalty * b.iter().skip(1).map(|v| v.abs()).sum::<f64>()
    };
    let prox = |v: DVector<f64>| {
        DVector::from_fn(p + 1, |j, _| {
            if j == 0 {
                v[0]
            } else {
                v[j].signum() * (v[j].abs() - penalty / lip).max(0.0)
            }
        })
    };
    let mut b = DVector::zeros(p + 1);
    let mut z = b.clone();
    let mut theta = 1.0f64;
    let mut prev = f(&b);
    for it in 0..400_000 {
        let grad = &h * &z - &at_wt;
        let next = prox(&z - grad / lip);
        let val = f(&next);
        if val > prev {
            // Restart momentum.
            z = b.clone();
            theta = 1.0;
            continue;
        }
        let theta_next = (1.0 + (1.0 + 4.0 * theta * theta).sqrt()) / 2.0;
        z = &next + (&next - &b) * ((theta - 1.0) / theta_next);
        theta = theta_next;
        let change = (prev - val).abs();
        b = next;
        prev = val;
        if it > 1000 && change < 1e-17 * (1.0 + val.abs()) {
            break;
        }
    }
    b.iter().copied().collect()
}

fn lasso_oracle() -> Outcome {
    let mut worst_kkt = 0.0f64;
    let mut worst_gap = 0.0f64;
    let mut failures = 0;
    for s in 0..LASSO_INSTANCES {
        let mut r = rng(500 + s);
        let n = r.random_range(5..=50);
        let p = r.random_range(1..=10);
        let x = DMatrix::from_fn(n, p, |_, _| normal(&mut r));
        let d: Vec<f64> = (0..n).map(|_| r.sample(Uniform::new(0.05, 2.0).unwrap())).collect();
        let t: Vec<f64> = (0..n).map(|i| 0.5 + x[(i, 0)] - 0.7 * x[(i, p - 1)] + normal(&mut r)).collect();
        let penalty = r.sample(Uniform::new(0.0, 8.0).unwrap());
        let problem = WeightedLassoProblem::new(&x, &d, &t, penalty).expect("valid problem");
        let Ok(sol) = solve_weighted_lasso(&problem, &LinearCoef::zeros(p), &LassoOptions { tol: 1e-10, max_sweeps: 100_000 })
        else {
            failures += 1;
            continue;
        };
        let oracle = LinearCoef::from_slice(&proximal_gradient_oracle(&x, &d, &t, penalty));
        worst_kkt = worst_kkt.max(problem.kkt_violation(&sol.coef));
        worst_gap = worst_gap.max((problem.objective(&sol.coef) - problem.objective(&oracle)).abs());
    }
    Outcome::check(
        failures == 0 && worst_kkt <= LASSO_KKT_TOL && worst_gap <= LASSO_OBJECTIVE_TOL,
        format!(
            "{LASSO_INSTANCES} instances, max KKT violation {worst_kkt:.2e} (tol {LASSO_KKT_TOL:e}), max objective gap \
             {worst_gap:.2e} (tol {LASSO_OBJECTIVE_TOL:e})"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn central_difference(f: &dyn Fn(&[f64]) -> f64, at: &[f64], j: usize) -> f64 {
    let h = 1e-5 * (1.0 + at[j].abs());
    let mut up = at.to_vec();
    let mut down = at.to_vec();
    up[j] += h;
    down[j] -= h;
    (f(&up) - f(&down)) / (2.0 * h)
}

fn max_relative_error(f: &dyn Fn(&[f64]) -> f64, grad: &[f64], at: &[f64]) -> f64 {
    (0..at.len()).map(|j| (grad[j] - central_difference(f, at, j)).abs() / grad[j].abs().max(1.0)).fold(0.0, f64::max)
}

fn random_tau(r: &mut ChaCha8Rng, n: usize, k: usize) -> DMatrix<f64> {
    let mut tau = DMatrix::from_fn(n, k, |_, _| r.random::<f64>() + 1e-3);
    for mut row in tau.row_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    tau
}

fn gradient_checks() -> Outcome {
    let (n, p) = (40, 3);
    let mut worst = [0.0f64; 3];
    for s in 0..GRADIENT_POINTS {
        let mut r = rng(900 + s);
        let x = DMatrix::from_fn(n, p, |_, _| normal(&mut r));
        let weights: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();

        // Gating objective, K = 3.
        let tau = random_tau(&mut r, n, 3);
        let w: Vec<f64> = (0..2 * (p + 1)).map(|_| normal(&mut r)).collect();
        let gate = |v: &[f64]| gating_smooth_objective(&GatingParams::from_flat(p, v), &tau, &x).unwrap();
        let g = gating_gradient(&GatingParams::from_flat(p, &w), &tau, &x).unwrap();
        let gating_err = max_relative_error(&gate, &g, &w);

        // Gaussian expert: the lasso scores are the gradient of the weighted fit.
        let y: Vec<f64> = (0..n).map(|_| 2.0 * normal(&mut r)).collect();
        let sigma = 0.5 + r.random::<f64>();
        let beta: Vec<f64> = (0..=p).map(|_| normal(&mut r)).collect();
        let d: Vec<f64> = weights.iter().map(|w| w / (sigma * sigma)).collect();
        let problem = WeightedLassoProblem::new(&x, &d, &y, 0.0).unwrap();
        let (g0, gs) = problem.scores(&LinearCoef::from_slice(&beta));
        let grad: Vec<f64> = std::iter::once(g0).chain(gs).collect();
        let gauss = |v: &[f64]| gaussian_objective(&weights, &x, &y, &LinearCoef::from_slice(v), sigma, 0.0);
        worst[0] = worst[0].max(gating_err).max(max_relative_error(&gauss, &grad, &beta));

        // Poisson expert.
        let counts: Vec<u64> = (0..n).map(|_| r.random_range(0..12)).collect();
        let beta: Vec<f64> = (0..=p).map(|_| 0.4 * normal(&mut r)).collect();
        let pois = |v: &[f64]| poisson_smooth_objective(&weights, &x, &counts, &LinearCoef::from_slice(v));
        let grad = poisson_gradient(&weights, &x, &counts, &LinearCoef::from_slice(&beta));
        worst[1] = worst[1].max(gating_err).max(max_relative_error(&pois, &grad, &beta));

        // Multinomial expert, R = 3.
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
        let beta: Vec<f64> = (0..2 * (p + 1)).map(|_| normal(&mut r)).collect();
        let split = |v: &[f64]| v.chunks(p + 1).map(LinearCoef::from_slice).collect::<Vec<_>>();
        let multi = |v: &[f64]| multinomial_objective(&weights, &x, &labels, 3, &split(v), &[0.0, 0.0]);
        let grad = multinomial_gradient(&weights, &x, &labels, 3, &split(&beta));
        worst[2] = worst[2].max(gating_err).max(max_relative_error(&multi, &grad, &beta));
    }
    Outcome::check(
        worst.iter().all(|&e| e < GRADIENT_REL_TOL),
        format!(
            "{GRADIENT_POINTS} points per family; max relative error gaussian {:.1e}, poisson {:.1e}, multinomial {:.1e} \
             (tol {GRADIENT_REL_TOL:e})",
            worst[0], worst[1], worst[2]
        ),
    )
}

// ---------------------------------------------------------------- 4

/// Plain EM for `K = 2` with Newton/least-squares M-steps, used as an
/// independent reference for the unpenalized fit.
struct ReferenceEm {
    a: DMatrix<f64>,
    family: Family,
    y: Vec<f64>,
}

fn log1pexp(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl ReferenceEm {
    fn new(data: &Dataset) -> Self {
        let (n, p) = (data.n(), data.p());
        let a = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { data.x()[(i, j - 1)] });
        let y = match data.y() {
            Response::Real(v) => v.clone(),
            Response::Count(v) => v.iter().map(|&c| c as f64).collect(),
            // Indicator of the first class, whose logit is modelled.
            Response::Categorical { labels, .. } => labels.iter().map(|&l| if l == 0 { 1.0 } else { 0.0 }).collect(),
        };
        Self { a, family: data.family(), y }
    }

    fn log_density(&self, i: usize, beta: &DVector<f64>, sigma: f64) -> f64 {
        let eta = (self.a.row(i) * beta)[0];
        let y = self.y[i];
        match self.family {
            Family::Gaussian => -0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln() - (y - eta).powi(2) / (2.0 * sigma * sigma),
            Family::Poisson => y * eta - eta.exp() - (1..=y as u64).map(|v| (v as f64).ln()).sum::<f64>(),
            Family::Multinomial => y * eta - log1pexp(eta),
        }
    }

    /// Responsibilities of component 1 and the log-likelihood.
    fn e_step(&self, gate: &DVector<f64>, betas: &[DVector<f64>; 2], sigma: &[f64; 2]) -> (Vec<f64>, f64) {
        let mut tau = Vec::with_capacity(self.y.len());
        let mut ll = 0.0;
        for i in 0..self.y.len() {
            let v = (self.a.row(i) * gate)[0];
            let l1 = v - log1pexp(v) + self.log_density(i, &betas[0], sigma[0]);
            let l2 = -log1pexp(v) + self.log_density(i, &betas[1], sigma[1]);
            let m = l1.max(l2);
            let lse = m + ((l1 - m).exp() + (l2 - m).exp()).ln();
            tau.push((l1 - lse).exp());
            ll += lse;
        }
        (tau, ll)
    }

    /// `Aᵀ diag(d) A`.
    fn weighted_gram(&self, d: &DVector<f64>) -> DMatrix<f64> {
        let mut scaled = self.a.clone();
        for (mut row, &di) in scaled.row_iter_mut().zip(d.iter()) {
            row *= di;
        }
        self.a.transpose() * scaled
    }

    /// Newton's method for `Σ w_i [t_i η_i − b(η_i)]` with `b = log(1+e^η)`
    /// (`logistic`) or `b = e^η`.
    fn newton(&self, start: &DVector<f64>, w: &[f64], t: &[f64], logistic: bool) -> DVector<f64> {
        let obj = |b: &DVector<f64>| -> f64 {
            let eta = &self.a * b;
            (0..t.len()).map(|i| w[i] * (t[i] * eta[i] - if logistic { log1pexp(eta[i]) } else { eta[i].exp() })).sum()
        };
        let mut b = start.clone();
        let mut cur = obj(&b);
        for _ in 0..200 {
            let eta = &self.a * &b;
            let mean: Vec<f64> = eta.iter().map(|&e| if logistic { sigmoid(e) } else { e.exp() }).collect();
            let var: Vec<f64> = mean.iter().map(|&m| if logistic { m * (1.0 - m) } else { m }).collect();
            let grad = self.a.transpose() * DVector::from_fn(t.len(), |i, _| w[i] * (t[i] - mean[i]));
            let h = self.weighted_gram(&DVector::from_fn(t.len(), |i, _| w[i] * var[i]));
            let Some(step) = h.clone().cholesky().map(|c| c.solve(&grad)) else { break };
            let mut s = 1.0;
            let mut improved = false;
            while s > 1e-10 {
                let trial = &b + &step * s;
                let v = obj(&trial);
                if v >= cur {
                    improved = v > cur;
                    b = trial;
                    cur = v;
                    break;
                }
                s *= 0.5;
            }
            if !improved || grad.amax() < 1e-11 {
                break;
            }
        }
        b
    }

    /// Final log-likelihood, or `None` when EM does not settle at a finite
    /// maximizer (no convergence, or coefficients beyond `REFERENCE_MAX_COEF`).
    fn fit(&self, init: &MoEParameters) -> Option<f64> {
        let vec = |c: &LinearCoef| DVector::from_vec(c.to_vec());
        let mut gate = vec(&init.gating.rows()[0]);
        let mut betas = [vec(init.experts.blocks(0)[0]), vec(init.experts.blocks(1)[0])];
        let mut sigma = match init.experts.sigma() {
            Some(s) => [s[0], s[1]],
            None => [1.0, 1.0],
        };
        let (mut tau, mut ll) = self.e_step(&gate, &betas, &sigma);
        for _ in 0..20_000 {
            let ones = vec![1.0; tau.len()];
            gate = self.newton(&gate, &ones, &tau, true);
            for c in 0..2 {
                let w: Vec<f64> = tau.iter().map(|&t| if c == 0 { t } else { 1.0 - t }).collect();
                betas[c] = match self.family {
                    Family::Gaussian => {
                        let lhs = self.weighted_gram(&DVector::from_column_slice(&w));
                        let rhs = self.a.transpose() * DVector::from_fn(w.len(), |i, _| w[i] * self.y[i]);
                        let b = lhs.cholesky().expect("full rank").solve(&rhs);
                        let r = DVector::from_column_slice(&self.y) - &self.a * &b;
                        let mass: f64 = w.iter().sum();
                        sigma[c] = (r.iter().zip(&w).map(|(r, w)| w * r * r).sum::<f64>() / mass).sqrt();
                        b
                    }
                    Family::Poisson => self.newton(&betas[c], &w, &self.y, false),
                    Family::Multinomial => self.newton(&betas[c], &w, &self.y, true),
                };
            }
            let (t, new_ll) = self.e_step(&gate, &betas, &sigma);
            tau = t;
            let done = (new_ll - ll).abs() < 1e-13 * (ll.abs() + 1.0);
            ll = new_ll;
            if done {
                let largest = betas.iter().chain([&gate]).map(|b| b.amax()).fold(0.0, f64::max);
                return (largest <= REFERENCE_MAX_COEF).then_some(ll);
            }
        }
        None
    }
}

/// Compares one instance, or returns `None` when the unpenalized problem has
/// no finite maximizer from this start.
fn unpenalized_gap(family: Family, seed: u64) -> Option<Result<f64, String>> {
    let n = if family == Family::Multinomial { 1000 } else { 250 };
    let sim = match preset_design(family).with_shape(n, 2).with_seed(3000 + seed).simulate() {
        Ok(sim) => sim,
        Err(e) => return Some(Err(e.to_string())),
    };
    let mut cfg = FitConfig::new(2).with_seed(seed).with_variant(GatingVariant::Exact);
    cfg.init = InitStrategy::RandomProjection;
    cfg.em_tol = 1e-13;
    cfg.max_em_iters = 20_000;
    cfg.interleaved_sigma = false;
    cfg.gating.tol = 1e-11;
    cfg.expert.tol = 1e-11;
    cfg.gating.lasso.tol = 1e-10;
    cfg.expert.lasso.tol = 1e-10;
    let init = match init_params(&sim.data, &cfg) {
        Ok(init) => init,
        Err(e) => return Some(Err(e.to_string())),
    };
    let reference = ReferenceEm::new(&sim.data).fit(&init)?;
    cfg.init = InitStrategy::Given(init);
    Some(fit_em(&sim.data, &cfg).map(|fit| (fit.loglik - reference).abs()).map_err(|e| e.to_string()))
}

fn unpenalized_consistency() -> Outcome {
    let families = [Family::Gaussian, Family::Poisson, Family::Multinomial];
    let per_family = par_map(&families, |&family| {
        let mut gaps = Vec::new();
        let mut excluded = 0;
        let mut seed = 0;
        while gaps.len() < UNPENALIZED_INSTANCES && seed < UNPENALIZED_MAX_SEEDS {
            match unpenalized_gap(family, seed) {
                Some(gap) => gaps.push(gap),
                None => excluded += 1,
            }
            seed += 1;
        }
        (gaps, excluded)
    });
    let mut ok = true;
    let mut parts = Vec::new();
    for (family, (gaps, excluded)) in families.iter().zip(&per_family) {
        let errors = gaps.iter().filter(|g| g.is_err()).count();
        let worst = gaps.iter().filter_map(|g| g.as_ref().ok()).copied().fold(0.0, f64::max);
        ok &= gaps.len() == UNPENALIZED_INSTANCES && errors == 0 && worst <= UNPENALIZED_LL_TOL;
        parts.push(format!(
            "{family} {} instances, {excluded} excluded, {errors} errors, max |ΔL| {worst:.2e}",
            gaps.len()
        ));
    }
    Outcome::check(ok, format!("{} (tol {UNPENALIZED_LL_TOL:e})", parts.join("; ")))
}

// ---------------------------------------------------------------- 5–7

struct StudyTargets {
    /// (sensitivity, specificity) for expert1, expert2, gate1.
    support: [(f64, f64); 3],
    rate: f64,
    rate_tol: f64,
    ari: f64,
    ari_tol: f64,
}

struct Study {
    support: [(f64, f64); 3],
    rate: f64,
    ari: f64,
    max_abs_coef: f64,
    failures: usize,
}

/// `(lambda, gamma)` per family, chosen on a design seed different from
/// `SIMULATION_SEED`.
fn study_penalty(family: Family) -> (f64, f64) {
    match family {
        Family::Gaussian => (12.0, 5.0),
        Family::Poisson => (20.0, 10.0),
        Family::Multinomial => (2.5, 2.5),
    }
}

fn run_study(family: Family, replicates: u64) -> Study {
    let design: SimDesign = preset_design(family).with_seed(SIMULATION_SEED);
    let (lambda, gamma) = study_penalty(family);
    let indices: Vec<u64> = (0..replicates).collect();
    let per_rep = par_map(&indices, |&r| -> Option<([(f64, f64); 3], f64, f64, f64)> {
        let sim = design.replicate(r).ok()?;
        let mut cfg = FitConfig::new(2).with_penalty(lambda, gamma).with_seed(r + 1);
        cfg.init = InitStrategy::RandomProjection;
        cfg.n_starts = SIMULATION_STARTS;
        let fit = fit_em(&sim.data, &cfg).ok()?;
        let (est, _) = canonicalize_labels(&fit.params, Some(&design.truth));
        let report = support_metrics(&est, &design.truth).ok()?;
        let mut support = [(0.0, 0.0); 3];
        for (slot, name) in support.iter_mut().zip(["expert1", "expert2", "gate1"]) {
            let b = report.get(name)?;
            *slot = (b.sensitivity.unwrap_or(f64::NAN), b.specificity.unwrap_or(f64::NAN));
        }
        let labels = hard_assignment(&e_step(&sim.data, &est).ok()?);
        let rate = correct_classification_rate(&labels, &sim.z).ok()?.value;
        let ari = adjusted_rand_index(&labels, &sim.z).ok()?.value;
        let mut max_abs: f64 = 0.0;
        for c in 0..est.k() {
            for b in est.experts.blocks(c) {
                max_abs = b.to_vec().iter().fold(max_abs, |m, v| m.max(v.abs()));
            }
        }
        for row in est.gating.rows() {
            max_abs = row.to_vec().iter().fold(max_abs, |m, v| m.max(v.abs()));
        }
        Some((support, rate, ari, max_abs))
    });
    let ok: Vec<_> = per_rep.iter().flatten().collect();
    let m = ok.len().max(1) as f64;
    let mut support = [(0.0, 0.0); 3];
    for (s, ..) in &ok {
        for b in 0..3 {
            support[b].0 += s[b].0 / m;
            support[b].1 += s[b].1 / m;
        }
    }
    Study {
        support,
        rate: ok.iter().map(|v| v.1).sum::<f64>() / m,
        ari: ok.iter().map(|v| v.2).sum::<f64>() / m,
        max_abs_coef: ok.iter().map(|v| v.3).fold(0.0, f64::max),
        failures: per_rep.len() - ok.len(),
    }
}

fn study_line(study: &Study) -> String {
    let mut s = String::new();
    for (name, (sens, spec)) in ["expert1", "expert2", "gate1"].iter().zip(study.support) {
        let _ = write!(s, "{name} {sens:.3}/{spec:.3}, ");
    }
    let _ = write!(s, "rate {:.2}%, ARI {:.4}", 100.0 * study.rate, study.ari);
    s
}

fn simulation_reproduction(family: Family, targets: &StudyTargets) -> Outcome {
    let start = Instant::now();
    let study = run_study(family, REPLICATES);
    let mut misses = Vec::new();
    for ((name, got), want) in ["expert1", "expert2", "gate1"].iter().zip(study.support).zip(targets.support) {
        if (got.0 - want.0).abs() > SUPPORT_TOL || got.0.is_nan() {
            misses.push(format!("{name} S1 {:.3} vs {:.3}", got.0, want.0));
        }
        if (got.1 - want.1).abs() > SUPPORT_TOL || got.1.is_nan() {
            misses.push(format!("{name} S2 {:.3} vs {:.3}", got.1, want.1));
        }
    }
    if (study.rate - targets.rate).abs() > targets.rate_tol {
        misses.push(format!("rate {:.2}% vs {:.2}%", 100.0 * study.rate, 100.0 * targets.rate));
    }
    if (study.ari - targets.ari).abs() > targets.ari_tol {
        misses.push(format!("ARI {:.4} vs {:.4}", study.ari, targets.ari));
    }
    if family == Family::Multinomial && study.max_abs_coef > MAX_LOGISTIC_COEF {
        misses.push(format!("max |coef| {:.2} > {MAX_LOGISTIC_COEF}", study.max_abs_coef));
    }
    if study.failures > 0 {
        misses.push(format!("{} replicate fits failed", study.failures));
    }
    let (lambda, gamma) = study_penalty(family);
    let mut detail = format!(
        "{REPLICATES} replicates, lambda {lambda}, gamma {gamma}, {SIMULATION_STARTS} starts: {}; max |coef| {:.2}; {:.0?}",
        study_line(&study),
        study.max_abs_coef,
        start.elapsed()
    );
    if !misses.is_empty() {
        let _ = write!(detail, " | out of tolerance: {}", misses.join("; "));
    }
    Outcome::check(misses.is_empty(), detail)
}

// ---------------------------------------------------------------- 8

fn single_gaussian(seed: u64) -> Dataset {
    let p = 3;
    let x = gen_covariates(200, p, 0.5, seed).expect("covariates");
    let truth = MoEParameters::new(
        GatingParams::zeros(1, p),
        ExpertParams::Gaussian { coefs: vec![LinearCoef::new(1.0, vec![2.0, 0.0, -1.0])], sigma: vec![1.0] },
    )
    .expect("valid truth");
    gen_responses(x, &truth, seed).expect("responses").data
}

fn bic_grid(data: &Dataset) -> GridSpec {
    let mut grid = build_default_grid(data).expect("grid");
    grid.k_candidates = vec![1, 2];
    grid
}

fn bic_template() -> FitConfig {
    let mut cfg = FitConfig::new(1);
    cfg.init = InitStrategy::RandomProjection;
    cfg.max_em_iters = 500;
    cfg
}

fn bic_sanity() -> Outcome {
    let seeds: Vec<u64> = (0..BIC_DATASETS).map(|s| 7000 + s).collect();
    let picks: Vec<Option<usize>> = seeds
        .iter()
        .map(|&s| {
            let data = single_gaussian(s);
            select_model(&data, &bic_grid(&data), &bic_template().with_seed(s)).ok().map(|sel| sel.table[sel.best_row].k)
        })
        .collect();
    let ones = picks.iter().filter(|p| **p == Some(1)).count();
    let errors = picks.iter().filter(|p| p.is_none()).count();
    Outcome::check(
        ones >= BIC_REQUIRED,
        format!("K = 1 selected on {ones}/{BIC_DATASETS} datasets (need {BIC_REQUIRED}), {errors} errors"),
    )
}

// ---------------------------------------------------------------- 9

fn housing_check() -> Outcome {
    let Some(path) = std::env::var_os("SPARSE_MOE_HOUSING") else {
        return Outcome { status: Status::Skip, detail: "SPARSE_MOE_HOUSING not set".into() };
    };
    let run = || -> Result<(f64, f64), String> {
        let file = read_data_csv_path(path.as_ref(), Family::Gaussian).map_err(|e| e.to_string())?;
        let (data, _) = standardize(&file.data).map_err(|e| e.to_string())?;
        let Response::Real(y) = data.y() else { unreachable!() };
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
        let scaled: Vec<f64> = y.iter().map(|v| v / sd).collect();
        let data = Dataset::new(data.x().clone(), Response::Real(scaled.clone())).map_err(|e| e.to_string())?;
        let mut grid = build_default_grid(&data).map_err(|e| e.to_string())?;
        grid.k_candidates = vec![2];
        let mut template = FitConfig::new(2);
        template.init = InitStrategy::RandomProjection;
        template.n_starts = 5;
        template.tied_sigma = true;
        let sel = select_model(&data, &grid, &template).map_err(|e| e.to_string())?;
        let labels = sel.best.hard_labels();
        let pred: Vec<f64> = (0..data.n())
            .map(|i| expert_mode(&data.row(i), &sel.best.params, labels[i]).map(|p| p.as_f64()))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let n = data.n() as f64;
        let mse = scaled.iter().zip(&pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
        let (ma, mb) = (scaled.iter().sum::<f64>() / n, pred.iter().sum::<f64>() / n);
        let cov: f64 = scaled.iter().zip(&pred).map(|(a, b)| (a - ma) * (b - mb)).sum();
        let va: f64 = scaled.iter().map(|a| (a - ma).powi(2)).sum();
        let vb: f64 = pred.iter().map(|b| (b - mb).powi(2)).sum();
        Ok((cov * cov / (va * vb), mse))
    };
    match run() {
        Ok((r2, mse)) => Outcome::check(r2 >= 0.85 && mse <= 0.16, format!("R² {r2:.4} (need ≥ 0.85), MSE {mse:.4} (need ≤ 0.16)")),
        Err(e) => Outcome { status: Status::Fail, detail: e },
    }
}

// ---------------------------------------------------------------- 10

fn determinism_report() -> String {
    let mut out = String::new();
    let study = run_study(Family::Gaussian, 4);
    let _ = writeln!(out, "{:?} {:?} {:?} {:?}", study.support, study.rate, study.ari, study.max_abs_coef);
    let data = single_gaussian(7000);
    let sel = select_model(&data, &bic_grid(&data), &bic_template().with_seed(7000)).expect("selection");
    let mut buf = Vec::new();
    write_bic_table(&mut buf, &sel.table).expect("table");
    write_coefficients_csv(&mut buf, &sel.best.params).expect("coefficients");
    out.push_str(&String::from_utf8(buf).expect("utf-8"));
    let _ = writeln!(out, "{:?}", sel.best.pl_trace);
    out
}

fn determinism() -> Outcome {
    let first = determinism_report();
    let second = determinism_report();
    Outcome::check(first == second, format!("{} report bytes identical across two runs: {}", first.len(), first == second))
}

// ----------------------------------------------------------------

fn gaussian_targets() -> StudyTargets {
    StudyTargets {
        support: [(0.700, 1.000), (0.790, 1.000), (0.748, 0.995)],
        rate: 0.8956,
        rate_tol: 0.03,
        ari: 0.6222,
        ari_tol: 0.08,
    }
}

fn poisson_targets() -> StudyTargets {
    StudyTargets {
        support: [(0.717, 1.000), (0.818, 1.000), (0.835, 1.000)],
        rate: 0.8896,
        rate_tol: 0.03,
        ari: 0.6004,
        ari_tol: 0.08,
    }
}

fn logistic_targets() -> StudyTargets {
    StudyTargets {
        support: [(0.693, 0.960), (0.835, 0.805), (0.780, 0.980)],
        rate: 0.8206,
        rate_tol: 0.04,
        ari: 0.3985,
        ari_tol: 0.10,
    }
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    (1, "monotone penalized log-likelihood", monotone_ascent),
    (2, "weighted lasso vs proximal-gradient oracle", lasso_oracle),
    (3, "surrogate gradients vs central differences", gradient_checks),
    (4, "unpenalized fit vs reference EM", unpenalized_consistency),
    (5, "gaussian simulation study", || simulation_reproduction(Family::Gaussian, &gaussian_targets())),
    (6, "poisson simulation study", || simulation_reproduction(Family::Poisson, &poisson_targets())),
    (7, "logistic simulation study", || simulation_reproduction(Family::Multinomial, &logistic_targets())),
    (8, "modified BIC picks K = 1 on single-Gaussian data", bic_sanity),
    (9, "housing data fit", housing_check),
    (10, "determinism", determinism),
];

fn main() -> ExitCode {
    let started = Instant::now();
    // `ACCEPTANCE_ONLY=4,7` restricts the run to the listed criteria.
    let only: Option<Vec<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (id, name, run) in CRITERIA {
        if only.as_ref().is_some_and(|ids| !ids.contains(&id)) {
            continue;
        }
        let outcome = run();
        let tag = match outcome.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        };
        println!("criterion {id:>2} [{tag}] {name}: {}", outcome.detail);
        if outcome.status == Status::Fail {
            failed.push(id);
        }
    }
    println!("acceptance finished in {:.0?}; failed criteria: {failed:?}", started.elapsed());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
