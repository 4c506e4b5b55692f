//! EM driver for one `(K, λ, γ)` fit.
//!
//! Each iteration runs an E-step and then an M-step. The E-step computes
//! responsibilities in log space. The M-step updates the gating network and
//! then each expert. For Gaussian experts the default schedule follows the
//! coefficient update with a fresh E-step, and only then updates `σ_k`
//! ([`FitConfig::interleaved_sigma`]). Every stage is an ascent step on the
//! EM surrogate, so the penalized log-likelihood never decreases.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MoeError, Result};
use crate::experts::{
    pooled_gaussian_sigma, update_gaussian_expert, update_gaussian_sigma, update_multinomial_expert,
    update_poisson_expert, ExpertOptions, EMPTY_MASS,
};
use crate::gating::{update_gating, GatingOptions, GatingVariant};
use crate::metrics::{best_permutation, hard_assignment};
use crate::model::{
    joint_log_density, log_sum_exp, penalty_value, Dataset, ExpertParams, GatingParams, LinearCoef, MoEParameters,
    PenaltyConfig, Response, SIGMA_FLOOR,
};
use crate::parallel::par_map;
use crate::selection::degrees_of_freedom;
use crate::simgen::derive_seed;

/// How the first EM iterate is chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum InitStrategy {
    /// Zero gating. Each expert is fitted by intercept only to one block of
    /// a seeded, balanced random partition of the rows.
    RandomPartition,
    /// Rows are sorted by their projection on a seeded random direction in
    /// the standardized (covariate, response) space and cut into `K`
    /// contiguous blocks. One M-step with block-indicator responsibilities
    /// then fits the gating network and full experts to those blocks.
    RandomProjection,
    /// Start from the given parameters.
    Given(MoEParameters),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub k: usize,
    pub penalty: PenaltyConfig,
    pub gating: GatingOptions,
    pub expert: ExpertOptions,
    /// Relative change in the penalized log-likelihood that stops EM.
    pub em_tol: f64,
    pub max_em_iters: usize,
    pub seed: u64,
    pub init: InitStrategy,
    /// Independent random starts; the highest penalized log-likelihood wins.
    pub n_starts: usize,
    /// Re-run the E-step between the Gaussian coefficient and `σ` updates.
    pub interleaved_sigma: bool,
    /// Share one `σ` across Gaussian components.
    pub tied_sigma: bool,
}

impl FitConfig {
    /// Unpenalized defaults for `k` components.
    pub fn new(k: usize) -> Self {
        Self {
            k,
            penalty: PenaltyConfig::none(k),
            gating: GatingOptions::default(),
            expert: ExpertOptions::default(),
            em_tol: 1e-6,
            max_em_iters: 1000,
            seed: 0,
            init: InitStrategy::RandomPartition,
            n_starts: 1,
            interleaved_sigma: true,
            tied_sigma: false,
        }
    }

    /// The same `λ` for every expert and `γ` for every gating row.
    pub fn with_penalty(mut self, lambda: f64, gamma: f64) -> Self {
        self.penalty = PenaltyConfig::uniform(self.k, lambda, gamma);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Sets the curvature model of both the gating and multinomial updates.
    pub fn with_variant(mut self, variant: GatingVariant) -> Self {
        self.gating.variant = variant;
        self.expert.variant = variant;
        self
    }

    pub fn validate(&self, data: &Dataset) -> Result<()> {
        if self.k == 0 {
            return Err(MoeError::InvalidConfig("K must be at least 1".into()));
        }
        if self.k > data.n() {
            return Err(MoeError::InvalidConfig(format!("K = {} exceeds n = {}", self.k, data.n())));
        }
        if !(self.em_tol > 0.0) || self.max_em_iters == 0 || self.n_starts == 0 {
            return Err(MoeError::InvalidConfig("em_tol, max_em_iters and n_starts must be positive".into()));
        }
        if self.penalty.k() != self.k || self.penalty.gamma.len() + 1 != self.k {
            return Err(MoeError::InvalidConfig(format!("penalty sized for K = {}, fit has K = {}", self.penalty.k(), self.k)));
        }
        if self.penalty.lambda.iter().chain(&self.penalty.gamma).any(|v| !(*v >= 0.0)) {
            return Err(MoeError::InvalidConfig("penalties must be non-negative".into()));
        }
        self.gating.line_search.validate()?;
        self.expert.line_search.validate()?;
        if let InitStrategy::Given(p) = &self.init {
            p.check_against(data)?;
            if p.k() != self.k {
                return Err(MoeError::InvalidConfig(format!("initial parameters have K = {}", p.k())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    /// Fitted parameters in canonical component order.
    pub params: MoEParameters,
    /// Penalized log-likelihood at the initial point and after every iteration.
    pub pl_trace: Vec<f64>,
    pub loglik: f64,
    pub penalized_loglik: f64,
    /// Free parameters counted by the modified BIC.
    pub df: usize,
    pub n_iters: usize,
    pub converged: bool,
    /// Final responsibilities, columns in canonical order.
    pub responsibilities: DMatrix<f64>,
    /// Components that are empty or have collapsed onto the σ floor.
    pub degenerate_components: Vec<usize>,
    /// Index of the winning random start.
    pub start: usize,
}

impl FitResult {
    pub fn is_degenerate(&self) -> bool {
        !self.degenerate_components.is_empty()
    }

    /// Maximum-responsibility component of every observation.
    pub fn hard_labels(&self) -> Vec<usize> {
        hard_assignment(&self.responsibilities)
    }
}

/// Result of one M-step.
#[derive(Clone, Debug, PartialEq)]
pub struct MStep {
    pub params: MoEParameters,
    /// Components left unchanged because their responsibilities vanished.
    pub stale: Vec<usize>,
}

/// First EM iterate.
pub fn init_params(data: &Dataset, config: &FitConfig) -> Result<MoEParameters> {
    match &config.init {
        InitStrategy::Given(p) => {
            p.check_against(data)?;
            Ok(p.clone())
        }
        InitStrategy::RandomPartition => random_partition_init(data, config.k, config.seed),
        InitStrategy::RandomProjection => random_projection_init(data, config, config.seed),
    }
}

fn start_params(data: &Dataset, config: &FitConfig, seed: u64) -> Result<MoEParameters> {
    match &config.init {
        InitStrategy::Given(p) => Ok(p.clone()),
        InitStrategy::RandomPartition => random_partition_init(data, config.k, seed),
        InitStrategy::RandomProjection => random_projection_init(data, config, seed),
    }
}

/// Response on a scale where a linear projection is meaningful.
fn response_scores(data: &Dataset) -> Vec<f64> {
    match data.y() {
        Response::Real(y) => y.clone(),
        Response::Count(y) => y.iter().map(|&v| (v as f64).ln_1p()).collect(),
        Response::Categorical { labels, .. } => labels.iter().map(|&v| v as f64).collect(),
    }
}

/// Responsibility given to a row's own block by [`InitStrategy::RandomProjection`].
const INIT_BLOCK_WEIGHT: f64 = 0.8;

fn random_projection_init(data: &Dataset, config: &FitConfig, seed: u64) -> Result<MoEParameters> {
    use rand_distr::{Distribution, StandardNormal};
    let (n, p, k) = (data.n(), data.p(), config.k);
    if k == 0 || k > n {
        return Err(MoeError::InvalidConfig(format!("cannot partition {n} rows into {k} components")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns: Vec<Vec<f64>> = (0..p).map(|j| data.x().column(j).iter().copied().collect()).collect();
    columns.push(response_scores(data));
    let direction: Vec<f64> = (0..=p).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut score = vec![0.0; n];
    for (col, d) in columns.iter().zip(&direction) {
        let (m, sd) = mean_sd(col.iter().copied());
        let scale = if sd > 0.0 { d / sd } else { 0.0 };
        for (s, v) in score.iter_mut().zip(col) {
            *s += scale * (v - m);
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score[a].total_cmp(&score[b]).then(a.cmp(&b)));
    // Soft block memberships keep the first gating and expert fits finite
    // even though the blocks are separable by construction.
    let mut tau = DMatrix::from_element(n, k, if k > 1 { (1.0 - INIT_BLOCK_WEIGHT) / (k - 1) as f64 } else { 1.0 });
    for (pos, &i) in order.iter().enumerate() {
        tau[(i, pos * k / n)] = if k > 1 { INIT_BLOCK_WEIGHT } else { 1.0 };
    }
    let base = random_partition_init(data, k, seed)?;
    let mut params = m_step(data, &tau, &base, config)?.params;
    if config.interleaved_sigma {
        params = sigma_step(data, &tau, &params, config)?.params;
    }
    Ok(params)
}

fn random_partition_init(data: &Dataset, k: usize, seed: u64) -> Result<MoEParameters> {
    let n = data.n();
    let p = data.p();
    if k == 0 || k > n {
        return Err(MoeError::InvalidConfig(format!("cannot partition {n} rows into {k} components")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut segments = vec![Vec::new(); k];
    for (pos, &i) in order.iter().enumerate() {
        segments[pos % k].push(i);
    }
    for s in &mut segments {
        s.sort_unstable();
    }

    let experts = match data.y() {
        Response::Real(y) => {
            let overall = mean_sd(y.iter().copied());
            let mut coefs = Vec::with_capacity(k);
            let mut sigma = Vec::with_capacity(k);
            for s in &segments {
                let (m, sd) = mean_sd(s.iter().map(|&i| y[i]));
                coefs.push(LinearCoef::new(m, vec![0.0; p]));
                let floor = (1e-3 * overall.1).max(SIGMA_FLOOR);
                sigma.push(if sd > floor { sd } else { overall.1.max(SIGMA_FLOOR) });
            }
            ExpertParams::Gaussian { coefs, sigma }
        }
        Response::Count(y) => ExpertParams::Poisson {
            coefs: segments
                .iter()
                .map(|s| {
                    let (m, _) = mean_sd(s.iter().map(|&i| y[i] as f64));
                    LinearCoef::new(m.max(0.1).ln(), vec![0.0; p])
                })
                .collect(),
        },
        Response::Categorical { labels, levels } => ExpertParams::Multinomial {
            coefs: segments
                .iter()
                .map(|s| {
                    let mut counts = vec![0.5f64; *levels];
                    for &i in s {
                        counts[labels[i]] += 1.0;
                    }
                    let reference = counts[levels - 1];
                    (0..levels - 1).map(|r| LinearCoef::new((counts[r] / reference).ln(), vec![0.0; p])).collect()
                })
                .collect(),
        },
    };
    MoEParameters::new(GatingParams::zeros(k, p), experts)
}

fn mean_sd(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

/// Responsibilities and observed-data log-likelihood in one pass.
fn e_step_with_loglik(data: &Dataset, params: &MoEParameters) -> Result<(DMatrix<f64>, f64)> {
    let mut joint = joint_log_density(data, params);
    let k = params.k();
    let mut ll = 0.0;
    let mut row = vec![0.0; k];
    for i in 0..data.n() {
        for c in 0..k {
            row[c] = joint[(i, c)];
        }
        let lse = log_sum_exp(&row);
        if lse == f64::NEG_INFINITY {
            return Err(MoeError::ZeroLikelihood { index: i });
        }
        if !lse.is_finite() {
            return Err(MoeError::NonFiniteParams);
        }
        ll += lse;
        for c in 0..k {
            joint[(i, c)] = (row[c] - lse).exp();
        }
    }
    Ok((joint, ll))
}

/// Posterior component probabilities `τ_ik`.
pub fn e_step(data: &Dataset, params: &MoEParameters) -> Result<DMatrix<f64>> {
    params.check_against(data)?;
    Ok(e_step_with_loglik(data, params)?.0)
}

/// Gating update followed by every expert update. When
/// `config.interleaved_sigma` is set, Gaussian `σ` values are left alone;
/// call [`sigma_step`] after a fresh E-step.
pub fn m_step(data: &Dataset, tau: &DMatrix<f64>, params: &MoEParameters, config: &FitConfig) -> Result<MStep> {
    let x = data.x();
    let k = params.k();
    let gating = update_gating(&params.gating, tau, x, &config.penalty.gamma, &config.gating)?.gating;
    let mut stale = Vec::new();
    let col = |c: usize| -> Vec<f64> { tau.column(c).iter().copied().collect() };

    let experts = match (&params.experts, data.y()) {
        (ExpertParams::Gaussian { coefs, sigma }, Response::Real(y)) => {
            let mut new_coefs = coefs.clone();
            for c in 0..k {
                let t = col(c);
                match update_gaussian_expert(c, &t, x, y, config.penalty.lambda[c], &coefs[c], sigma[c], &config.expert.lasso) {
                    Ok(b) => new_coefs[c] = b,
                    Err(MoeError::EmptyComponent { .. }) => stale.push(c),
                    Err(e) => return Err(e),
                }
            }
            let mut out = ExpertParams::Gaussian { coefs: new_coefs, sigma: sigma.clone() };
            if !config.interleaved_sigma {
                out = update_sigma_values(data, tau, out, config.tied_sigma, &mut stale)?;
            }
            out
        }
        (ExpertParams::Poisson { coefs }, Response::Count(y)) => {
            let mut new_coefs = coefs.clone();
            for c in 0..k {
                let t = col(c);
                match update_poisson_expert(c, &t, x, y, config.penalty.lambda[c], &coefs[c], &config.expert) {
                    Ok(u) => new_coefs[c] = u.coefs,
                    Err(MoeError::EmptyComponent { .. }) => stale.push(c),
                    Err(e) => return Err(e),
                }
            }
            ExpertParams::Poisson { coefs: new_coefs }
        }
        (ExpertParams::Multinomial { coefs }, Response::Categorical { labels, levels }) => {
            let mut new_coefs = coefs.clone();
            for c in 0..k {
                let t = col(c);
                let lambda = vec![config.penalty.lambda[c]; levels - 1];
                match update_multinomial_expert(c, &t, x, labels, *levels, &lambda, &coefs[c], &config.expert) {
                    Ok(u) => new_coefs[c] = u.coefs,
                    Err(MoeError::EmptyComponent { .. }) => stale.push(c),
                    Err(e) => return Err(e),
                }
            }
            ExpertParams::Multinomial { coefs: new_coefs }
        }
        (e, _) => {
            return Err(MoeError::Dimension(format!("{} experts cannot model a {} response", e.family(), data.family())))
        }
    };
    stale.sort_unstable();
    stale.dedup();
    Ok(MStep { params: MoEParameters::new(gating, experts)?, stale })
}

fn update_sigma_values(
    data: &Dataset,
    tau: &DMatrix<f64>,
    experts: ExpertParams,
    tied: bool,
    stale: &mut Vec<usize>,
) -> Result<ExpertParams> {
    let (ExpertParams::Gaussian { coefs, mut sigma }, Response::Real(y)) = (experts, data.y()) else {
        return Err(MoeError::Dimension("σ update needs Gaussian experts and a real response".into()));
    };
    let x = data.x();
    if tied {
        let s = pooled_gaussian_sigma(tau, x, y, &coefs).sqrt();
        sigma.iter_mut().for_each(|v| *v = s);
    } else {
        for c in 0..coefs.len() {
            let t: Vec<f64> = tau.column(c).iter().copied().collect();
            match update_gaussian_sigma(c, &t, x, y, &coefs[c]) {
                Ok(s2) => sigma[c] = s2.sqrt(),
                Err(MoeError::EmptyComponent { .. }) => stale.push(c),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(ExpertParams::Gaussian { coefs, sigma })
}

/// `σ` update for Gaussian experts with responsibilities `tau`; other
/// families are returned unchanged.
pub fn sigma_step(data: &Dataset, tau: &DMatrix<f64>, params: &MoEParameters, config: &FitConfig) -> Result<MStep> {
    if !matches!(params.experts, ExpertParams::Gaussian { .. }) {
        return Ok(MStep { params: params.clone(), stale: Vec::new() });
    }
    let mut stale = Vec::new();
    let experts = update_sigma_values(data, tau, params.experts.clone(), config.tied_sigma, &mut stale)?;
    Ok(MStep { params: MoEParameters::new(params.gating.clone(), experts)?, stale })
}

struct RawFit {
    params: MoEParameters,
    trace: Vec<f64>,
    loglik: f64,
    n_iters: usize,
    converged: bool,
}

fn run_single(data: &Dataset, config: &FitConfig, init: MoEParameters) -> Result<RawFit> {
    let penalty = &config.penalty;
    let is_gaussian = matches!(init.experts, ExpertParams::Gaussian { .. });
    let mut params = init;
    let (mut tau, mut ll) = e_step_with_loglik(data, &params)?;
    let mut pl = ll - penalty_value(&params, penalty)?;
    let mut trace = vec![pl];
    if !pl.is_finite() {
        return Err(MoeError::NonFinite { iteration: 0, trace });
    }
    let mut converged = false;
    let mut iters = 0;
    while iters < config.max_em_iters {
        iters += 1;
        let step = m_step(data, &tau, &params, config)?;
        params = step.params;
        let fresh = e_step_with_loglik(data, &params);
        let (mut new_tau, mut new_ll) = match fresh {
            Ok(v) => v,
            Err(MoeError::ZeroLikelihood { .. } | MoeError::NonFiniteParams) => {
                return Err(MoeError::NonFinite { iteration: iters, trace });
            }
            Err(e) => return Err(e),
        };
        if is_gaussian && config.interleaved_sigma {
            params = sigma_step(data, &new_tau, &params, config)?.params;
            (new_tau, new_ll) = match e_step_with_loglik(data, &params) {
                Ok(v) => v,
                Err(_) => return Err(MoeError::NonFinite { iteration: iters, trace }),
            };
        }
        let new_pl = new_ll - penalty_value(&params, penalty)?;
        if !new_pl.is_finite() {
            return Err(MoeError::NonFinite { iteration: iters, trace });
        }
        trace.push(new_pl);
        tau = new_tau;
        ll = new_ll;
        let change = (new_pl - pl).abs() / (pl.abs() + 1.0);
        pl = new_pl;
        if change < config.em_tol {
            converged = true;
            break;
        }
    }
    Ok(RawFit { params, trace, loglik: ll, n_iters: iters, converged })
}

/// Components with vanishing mass, or Gaussian components pinned at the σ floor.
fn degenerate_components(params: &MoEParameters, tau: &DMatrix<f64>) -> Vec<usize> {
    (0..params.k())
        .filter(|&c| {
            let mass: f64 = tau.column(c).sum();
            let collapsed = params.experts.sigma().is_some_and(|s| s[c] <= SIGMA_FLOOR * (1.0 + 1e-9));
            mass < EMPTY_MASS || collapsed
        })
        .collect()
}

/// Runs EM from every start and keeps the fit with the largest final
/// penalized log-likelihood; ties go to the earliest start. Fails only if
/// every start fails, in which case the first start's error is returned.
pub fn fit_em(data: &Dataset, config: &FitConfig) -> Result<FitResult> {
    config.validate(data)?;
    let starts: Vec<usize> = match config.init {
        InitStrategy::Given(_) => vec![0],
        InitStrategy::RandomPartition | InitStrategy::RandomProjection => (0..config.n_starts).collect(),
    };
    let runs = par_map(&starts, |&s| -> Result<RawFit> {
        let seed = if s == 0 { config.seed } else { derive_seed(config.seed, s as u64) };
        let init = start_params(data, config, seed)?;
        run_single(data, config, init)
    });

    let mut best: Option<(usize, RawFit)> = None;
    let mut first_err = None;
    for (s, run) in runs.into_iter().enumerate() {
        match run {
            Ok(r) => {
                let better = best.as_ref().is_none_or(|(_, b)| r.trace.last() > b.trace.last());
                if better {
                    best = Some((s, r));
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let Some((start, raw)) = best else {
        return Err(first_err.expect("at least one start"));
    };

    let (canonical, perm) = canonicalize_labels(&raw.params, None);
    let tau = e_step(data, &canonical)?;
    debug_assert!(perm.len() == config.k);
    let penalized = *raw.trace.last().expect("trace has the initial value");
    Ok(FitResult {
        df: degrees_of_freedom(&canonical, config.tied_sigma),
        degenerate_components: degenerate_components(&canonical, &tau),
        params: canonical,
        pl_trace: raw.trace,
        loglik: raw.loglik,
        penalized_loglik: penalized,
        n_iters: raw.n_iters,
        converged: raw.converged,
        responsibilities: tau,
        start,
    })
}

fn block_vector(params: &MoEParameters, c: usize) -> Vec<f64> {
    let mut v: Vec<f64> = params.experts.blocks(c).iter().flat_map(|b| b.to_vec()).collect();
    if let Some(s) = params.experts.sigma() {
        v.push(s[c]);
    }
    v
}

/// Applies a component permutation: new component `j` is old `perm[j]`.
/// Gating rows are re-expressed relative to the new last component, which
/// leaves every gating probability unchanged.
pub fn permute_components(params: &MoEParameters, perm: &[usize]) -> MoEParameters {
    let full = params.gating.full_rows();
    let last = &full[perm[perm.len() - 1]];
    let rows = perm[..perm.len() - 1]
        .iter()
        .map(|&old| {
            let r = &full[old];
            LinearCoef::new(
                r.intercept - last.intercept,
                r.slopes.iter().zip(&last.slopes).map(|(a, b)| a - b).collect(),
            )
        })
        .collect();
    MoEParameters {
        gating: GatingParams::new(params.p(), rows).expect("same p"),
        experts: params.experts.permuted(perm),
    }
}

/// Puts components in a canonical order and returns the permutation used
/// (new component `j` is old `perm[j]`).
///
/// Without a reference, components are sorted by descending expert
/// intercept, with ties broken by the remaining coefficients in descending
/// lexicographic order. With a reference, the permutation that minimizes
/// the squared distance between expert blocks and the reference's blocks
/// is chosen.
pub fn canonicalize_labels(params: &MoEParameters, reference: Option<&MoEParameters>) -> (MoEParameters, Vec<usize>) {
    let k = params.k();
    let perm: Vec<usize> = match reference {
        Some(r) if r.k() == k && r.family() == params.family() => {
            let cost: Vec<Vec<f64>> = (0..k)
                .map(|new| {
                    let target = block_vector(r, new);
                    (0..k)
                        .map(|old| {
                            let v = block_vector(params, old);
                            v.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum()
                        })
                        .collect()
                })
                .collect();
            best_permutation(&cost).0
        }
        _ => {
            let mut idx: Vec<usize> = (0..k).collect();
            idx.sort_by(|&a, &b| {
                let va = block_vector(params, a);
                let vb = block_vector(params, b);
                for (x, y) in va.iter().zip(&vb) {
                    match y.total_cmp(x) {
                        std::cmp::Ordering::Equal => continue,
                        o => return o,
                    }
                }
                a.cmp(&b)
            });
            idx
        }
    };
    (permute_components(params, &perm), perm)
}
