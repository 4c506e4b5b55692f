//! Domain types and likelihood evaluation for mixtures of generalized linear
//! experts with a softmax gating network.
//!
//! Component `K` of the gating network is the reference class: its
//! coefficients are pinned to zero and never stored. Likewise the last
//! response level of a multinomial expert is the reference level.
//!
//! Every density evaluation is carried out in log space.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};

/// Lower bound applied to every Gaussian expert standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

const HALF_LOG_TWO_PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Poisson,
    /// Multinomial-logistic experts; `R = 2` is ordinary logistic regression.
    Multinomial,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Gaussian => "gaussian",
            Family::Poisson => "poisson",
            Family::Multinomial => "multinomial",
        })
    }
}

impl FromStr for Family {
    type Err = MoeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(Family::Gaussian),
            "poisson" => Ok(Family::Poisson),
            "multinomial" | "logistic" => Ok(Family::Multinomial),
            other => Err(MoeError::InvalidConfig(format!("unknown family `{other}`"))),
        }
    }
}

/// Response vector of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub enum Response {
    Real(Vec<f64>),
    Count(Vec<u64>),
    /// Zero-based class labels; `levels` is the number of classes `R`.
    Categorical { labels: Vec<usize>, levels: usize },
}

/// A single observed response value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ResponseValue {
    Real(f64),
    Count(u64),
    /// Zero-based class index.
    Category(usize),
}

impl Response {
    /// Builds a categorical response from labels numbered `1..=R`.
    pub fn categorical_one_based(labels: &[i64]) -> Result<Self> {
        let max = labels.iter().copied().max().unwrap_or(0);
        if let Some(bad) = labels.iter().find(|&&l| l < 1) {
            return Err(MoeError::InvalidData(format!(
                "categorical labels must be in 1..=R, found {bad}"
            )));
        }
        let levels = max as usize;
        let labels: Vec<usize> = labels.iter().map(|&l| l as usize - 1).collect();
        Self::categorical(labels, levels)
    }

    /// Builds a categorical response from zero-based labels.
    pub fn categorical(labels: Vec<usize>, levels: usize) -> Result<Self> {
        if levels < 2 {
            return Err(MoeError::InvalidData(format!(
                "categorical response needs at least 2 levels, found {levels}"
            )));
        }
        let mut seen = vec![false; levels];
        for &l in &labels {
            if l >= levels {
                return Err(MoeError::InvalidData(format!(
                    "label {} outside 1..={levels}",
                    l + 1
                )));
            }
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(MoeError::InvalidData(format!(
                "categorical labels must span 1..={levels}; level {} never occurs",
                missing + 1
            )));
        }
        Ok(Response::Categorical { labels, levels })
    }

    pub fn len(&self) -> usize {
        match self {
            Response::Real(v) => v.len(),
            Response::Count(v) => v.len(),
            Response::Categorical { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn family(&self) -> Family {
        match self {
            Response::Real(_) => Family::Gaussian,
            Response::Count(_) => Family::Poisson,
            Response::Categorical { .. } => Family::Multinomial,
        }
    }

    pub fn value(&self, i: usize) -> ResponseValue {
        match self {
            Response::Real(v) => ResponseValue::Real(v[i]),
            Response::Count(v) => ResponseValue::Count(v[i]),
            Response::Categorical { labels, .. } => ResponseValue::Category(labels[i]),
        }
    }

    /// Response as reals (class labels are reported one-based).
    pub fn as_f64(&self) -> Vec<f64> {
        match self {
            Response::Real(v) => v.clone(),
            Response::Count(v) => v.iter().map(|&c| c as f64).collect(),
            Response::Categorical { labels, .. } => labels.iter().map(|&l| (l + 1) as f64).collect(),
        }
    }
}

/// An `n × p` design with a response of one of the three supported kinds.
#[derive(Clone, Debug)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: Response,
    feature_names: Option<Vec<String>>,
    log_factorials: Vec<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: Response) -> Result<Self> {
        let (n, p) = x.shape();
        if n == 0 || p == 0 {
            return Err(MoeError::InvalidData(format!(
                "design must have n >= 1 and p >= 1, got {n}x{p}"
            )));
        }
        if y.len() != n {
            return Err(MoeError::Dimension(format!(
                "design has {n} rows but response has {} entries",
                y.len()
            )));
        }
        if let Some(idx) = x.iter().position(|v| !v.is_finite()) {
            return Err(MoeError::InvalidData(format!(
                "non-finite covariate at row {}, column {}",
                idx % n + 1,
                idx / n + 1
            )));
        }
        if let Response::Real(v) = &y {
            if let Some(i) = v.iter().position(|v| !v.is_finite()) {
                return Err(MoeError::InvalidData(format!("non-finite response at row {}", i + 1)));
            }
        }
        let log_factorials = match &y {
            Response::Count(v) => v.iter().map(|&c| libm::lgamma(c as f64 + 1.0)).collect(),
            _ => Vec::new(),
        };
        Ok(Self { x, y, feature_names: None, log_factorials })
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.p() {
            return Err(MoeError::Dimension(format!(
                "{} feature names for {} columns",
                names.len(),
                self.p()
            )));
        }
        self.feature_names = Some(names);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &Response {
        &self.y
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.feature_names.as_deref()
    }

    pub fn family(&self) -> Family {
        self.y.family()
    }

    /// Number of response levels for categorical data.
    pub fn levels(&self) -> Option<usize> {
        match &self.y {
            Response::Categorical { levels, .. } => Some(*levels),
            _ => None,
        }
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    /// `log(y_i!)` for count responses, zero otherwise.
    pub(crate) fn log_factorial(&self, i: usize) -> f64 {
        self.log_factorials.get(i).copied().unwrap_or(0.0)
    }
}

/// Intercept plus slope coefficients of one linear predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearCoef {
    pub intercept: f64,
    pub slopes: Vec<f64>,
}

impl LinearCoef {
    pub fn new(intercept: f64, slopes: Vec<f64>) -> Self {
        Self { intercept, slopes }
    }

    pub fn zeros(p: usize) -> Self {
        Self { intercept: 0.0, slopes: vec![0.0; p] }
    }

    /// Reads `(intercept, slope_1, ..., slope_p)`.
    pub fn from_slice(v: &[f64]) -> Self {
        Self { intercept: v[0], slopes: v[1..].to_vec() }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.slopes.len() + 1);
        v.push(self.intercept);
        v.extend_from_slice(&self.slopes);
        v
    }

    pub fn p(&self) -> usize {
        self.slopes.len()
    }

    pub fn l1_slopes(&self) -> f64 {
        self.slopes.iter().map(|b| b.abs()).sum()
    }

    pub fn nonzero_slopes(&self) -> usize {
        self.slopes.iter().filter(|&&b| b != 0.0).count()
    }

    pub fn is_finite(&self) -> bool {
        self.intercept.is_finite() && self.slopes.iter().all(|b| b.is_finite())
    }

    /// `intercept + x'slopes` for a covariate vector.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.intercept + x.iter().zip(&self.slopes).map(|(a, b)| a * b).sum::<f64>()
    }

    /// `intercept + x_i'slopes` for row `i` of a design.
    pub fn eval_row(&self, x: &DMatrix<f64>, i: usize) -> f64 {
        let mut acc = self.intercept;
        for (j, b) in self.slopes.iter().enumerate() {
            acc += x[(i, j)] * b;
        }
        acc
    }

    /// Linear predictor for every row of a design.
    pub fn eval_all(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let mut out = vec![self.intercept; x.nrows()];
        for (j, &b) in self.slopes.iter().enumerate() {
            if b != 0.0 {
                for (o, xv) in out.iter_mut().zip(x.column(j).iter()) {
                    *o += xv * b;
                }
            }
        }
        out
    }
}

/// Softmax gating network. Row `k` holds `(w_k0, w_k)`; the last
/// component's vector is implicitly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingParams {
    p: usize,
    rows: Vec<LinearCoef>,
}

impl GatingParams {
    pub fn new(p: usize, rows: Vec<LinearCoef>) -> Result<Self> {
        if let Some(r) = rows.iter().find(|r| r.p() != p) {
            return Err(MoeError::Dimension(format!(
                "gating row has {} slopes, expected {p}",
                r.p()
            )));
        }
        Ok(Self { p, rows })
    }

    /// All-zero gating (uniform component probabilities).
    pub fn zeros(k: usize, p: usize) -> Self {
        Self { p, rows: vec![LinearCoef::zeros(p); k.saturating_sub(1)] }
    }

    pub fn k(&self) -> usize {
        self.rows.len() + 1
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn rows(&self) -> &[LinearCoef] {
        &self.rows
    }

    pub fn rows_mut(&mut self) -> &mut [LinearCoef] {
        &mut self.rows
    }

    /// Full set of `K` gating vectors with the reference row appended.
    pub fn full_rows(&self) -> Vec<LinearCoef> {
        let mut v = self.rows.clone();
        v.push(LinearCoef::zeros(self.p));
        v
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.rows.iter().flat_map(|r| r.to_vec()).collect()
    }

    pub fn from_flat(p: usize, flat: &[f64]) -> Self {
        let rows = flat.chunks(p + 1).map(LinearCoef::from_slice).collect();
        Self { p, rows }
    }

    /// Logits `(η_1, ..., η_{K-1}, 0)` for row `i` of a design.
    pub fn logits_row(&self, x: &DMatrix<f64>, i: usize) -> Vec<f64> {
        let mut l: Vec<f64> = self.rows.iter().map(|r| r.eval_row(x, i)).collect();
        l.push(0.0);
        l
    }

    /// Gating log-probabilities for every row, as an `n × K` matrix.
    pub fn log_probs(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = x.nrows();
        let k = self.k();
        let etas: Vec<Vec<f64>> = self.rows.iter().map(|r| r.eval_all(x)).collect();
        let mut out = DMatrix::zeros(n, k);
        let mut buf = vec![0.0; k];
        for i in 0..n {
            for (c, eta) in etas.iter().enumerate() {
                buf[c] = eta[i];
            }
            buf[k - 1] = 0.0;
            let lse = log_sum_exp(&buf);
            for c in 0..k {
                out[(i, c)] = buf[c] - lse;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.rows.iter().all(LinearCoef::is_finite)
    }
}

/// Expert networks, one block per component.
#[derive(Clone, Debug, PartialEq)]
pub enum ExpertParams {
    Gaussian { coefs: Vec<LinearCoef>, sigma: Vec<f64> },
    Poisson { coefs: Vec<LinearCoef> },
    /// `coefs[k][r]` for levels `r = 0..R-1`; the last level is implicitly zero.
    Multinomial { coefs: Vec<Vec<LinearCoef>> },
}

impl ExpertParams {
    pub fn k(&self) -> usize {
        match self {
            ExpertParams::Gaussian { coefs, .. } | ExpertParams::Poisson { coefs } => coefs.len(),
            ExpertParams::Multinomial { coefs } => coefs.len(),
        }
    }

    pub fn family(&self) -> Family {
        match self {
            ExpertParams::Gaussian { .. } => Family::Gaussian,
            ExpertParams::Poisson { .. } => Family::Poisson,
            ExpertParams::Multinomial { .. } => Family::Multinomial,
        }
    }

    /// Coefficient rows of component `k` (one row, or `R - 1` rows for
    /// multinomial experts).
    pub fn blocks(&self, k: usize) -> Vec<&LinearCoef> {
        match self {
            ExpertParams::Gaussian { coefs, .. } | ExpertParams::Poisson { coefs } => vec![&coefs[k]],
            ExpertParams::Multinomial { coefs } => coefs[k].iter().collect(),
        }
    }

    pub fn sigma(&self) -> Option<&[f64]> {
        match self {
            ExpertParams::Gaussian { sigma, .. } => Some(sigma),
            _ => None,
        }
    }

    /// Reorders components so that new component `j` is old `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        match self {
            ExpertParams::Gaussian { coefs, sigma } => ExpertParams::Gaussian {
                coefs: perm.iter().map(|&k| coefs[k].clone()).collect(),
                sigma: perm.iter().map(|&k| sigma[k]).collect(),
            },
            ExpertParams::Poisson { coefs } => ExpertParams::Poisson {
                coefs: perm.iter().map(|&k| coefs[k].clone()).collect(),
            },
            ExpertParams::Multinomial { coefs } => ExpertParams::Multinomial {
                coefs: perm.iter().map(|&k| coefs[k].clone()).collect(),
            },
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            ExpertParams::Gaussian { coefs, sigma } => {
                coefs.iter().all(LinearCoef::is_finite) && sigma.iter().all(|s| s.is_finite() && *s > 0.0)
            }
            ExpertParams::Poisson { coefs } => coefs.iter().all(LinearCoef::is_finite),
            ExpertParams::Multinomial { coefs } => coefs.iter().flatten().all(LinearCoef::is_finite),
        }
    }
}

/// Full parameter vector of a mixture of experts.
#[derive(Clone, Debug, PartialEq)]
pub struct MoEParameters {
    pub gating: GatingParams,
    pub experts: ExpertParams,
}

impl MoEParameters {
    pub fn new(gating: GatingParams, experts: ExpertParams) -> Result<Self> {
        let params = Self { gating, experts };
        params.check_shape()?;
        Ok(params)
    }

    fn check_shape(&self) -> Result<()> {
        let k = self.gating.k();
        if self.experts.k() != k {
            return Err(MoeError::Dimension(format!(
                "gating implies K = {k} but there are {} expert blocks",
                self.experts.k()
            )));
        }
        let p = self.gating.p();
        for c in 0..k {
            if self.experts.blocks(c).iter().any(|b| b.p() != p) {
                return Err(MoeError::Dimension(format!("expert {} does not have {p} slopes", c + 1)));
            }
        }
        if let ExpertParams::Gaussian { sigma, .. } = &self.experts {
            if sigma.len() != k {
                return Err(MoeError::Dimension("one sigma per component required".into()));
            }
        }
        if let ExpertParams::Multinomial { coefs } = &self.experts {
            let r = coefs.first().map_or(0, Vec::len);
            if r == 0 || coefs.iter().any(|c| c.len() != r) {
                return Err(MoeError::Dimension("multinomial experts need R - 1 >= 1 equal blocks".into()));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.gating.k()
    }

    pub fn p(&self) -> usize {
        self.gating.p()
    }

    pub fn family(&self) -> Family {
        self.experts.family()
    }

    /// Number of response levels `R` for multinomial experts.
    pub fn levels(&self) -> Option<usize> {
        match &self.experts {
            ExpertParams::Multinomial { coefs } => Some(coefs[0].len() + 1),
            _ => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.gating.is_finite() && self.experts.is_finite()
    }

    /// Checks that the parameters can be evaluated on `data`.
    pub fn check_against(&self, data: &Dataset) -> Result<()> {
        self.check_shape()?;
        if self.p() != data.p() {
            return Err(MoeError::Dimension(format!(
                "parameters have p = {} but data has p = {}",
                self.p(),
                data.p()
            )));
        }
        if self.family() != data.family() {
            return Err(MoeError::Dimension(format!(
                "{} experts cannot model a {} response",
                self.family(),
                data.family()
            )));
        }
        if let (Some(a), Some(b)) = (self.levels(), data.levels()) {
            if a != b {
                return Err(MoeError::Dimension(format!("parameters have R = {a}, data has R = {b}")));
            }
        }
        Ok(())
    }
}

/// Lasso strengths: `lambda[k]` on the slopes of expert `k`, `gamma[k]` on
/// the slopes of gating row `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl PenaltyConfig {
    pub fn new(lambda: Vec<f64>, gamma: Vec<f64>) -> Result<Self> {
        if lambda.iter().chain(&gamma).any(|v| !(*v >= 0.0)) {
            return Err(MoeError::InvalidConfig("penalties must be non-negative".into()));
        }
        if gamma.len() + 1 != lambda.len() {
            return Err(MoeError::Dimension(format!(
                "{} expert penalties need {} gating penalties, got {}",
                lambda.len(),
                lambda.len().saturating_sub(1),
                gamma.len()
            )));
        }
        Ok(Self { lambda, gamma })
    }

    /// The same `lambda` for every expert and `gamma` for every gate.
    pub fn uniform(k: usize, lambda: f64, gamma: f64) -> Self {
        Self { lambda: vec![lambda; k], gamma: vec![gamma; k.saturating_sub(1)] }
    }

    pub fn none(k: usize) -> Self {
        Self::uniform(k, 0.0, 0.0)
    }

    pub fn k(&self) -> usize {
        self.lambda.len()
    }
}

/// Numerically stable `log Σ exp(v)`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m == f64::INFINITY {
        return m;
    }
    m + v.iter().map(|a| (a - m).exp()).sum::<f64>().ln()
}

/// Gating probabilities `π_1(x), ..., π_K(x)`.
pub fn softmax_gating(x: &[f64], gating: &GatingParams) -> Result<Vec<f64>> {
    if x.len() != gating.p() {
        return Err(MoeError::Dimension(format!(
            "covariate vector has length {}, gating expects {}",
            x.len(),
            gating.p()
        )));
    }
    let mut logits: Vec<f64> = gating.rows().iter().map(|r| r.eval(x)).collect();
    logits.push(0.0);
    Ok(softmax(&logits))
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn gaussian_log_pdf(y: f64, mean: f64, sigma: f64) -> f64 {
    let z = (y - mean) / sigma;
    -HALF_LOG_TWO_PI - sigma.ln() - 0.5 * z * z
}

fn poisson_log_pmf(y: u64, eta: f64, log_fact: f64) -> f64 {
    y as f64 * eta - eta.exp() - log_fact
}

/// `log α_y` with linear predictors for levels `0..R-1` (last level zero).
fn multinomial_log_prob(class: usize, etas: &[f64]) -> f64 {
    let mut all = etas.to_vec();
    all.push(0.0);
    all[class] - log_sum_exp(&all)
}

/// `log p_k(y | x; θ_k)` for one observation.
pub fn expert_log_density(y: ResponseValue, x: &[f64], experts: &ExpertParams, k: usize) -> Result<f64> {
    if k >= experts.k() {
        return Err(MoeError::Dimension(format!("component {k} out of range 0..{}", experts.k())));
    }
    if experts.blocks(k)[0].p() != x.len() {
        return Err(MoeError::Dimension(format!(
            "covariate vector has length {}, expert expects {}",
            x.len(),
            experts.blocks(k)[0].p()
        )));
    }
    match (experts, y) {
        (ExpertParams::Gaussian { coefs, sigma }, ResponseValue::Real(v)) => {
            Ok(gaussian_log_pdf(v, coefs[k].eval(x), sigma[k]))
        }
        (ExpertParams::Poisson { coefs }, ResponseValue::Count(c)) => {
            Ok(poisson_log_pmf(c, coefs[k].eval(x), libm::lgamma(c as f64 + 1.0)))
        }
        (ExpertParams::Multinomial { coefs }, ResponseValue::Category(r)) => {
            let levels = coefs[k].len() + 1;
            if r >= levels {
                return Err(MoeError::InvalidData(format!("class {} outside 1..={levels}", r + 1)));
            }
            let etas: Vec<f64> = coefs[k].iter().map(|c| c.eval(x)).collect();
            Ok(multinomial_log_prob(r, &etas))
        }
        (e, y) => Err(MoeError::Dimension(format!(
            "response {y:?} does not match {} experts",
            e.family()
        ))),
    }
}

/// `log p_k(y_i | x_i)` for every observation and component (`n × K`).
pub(crate) fn expert_log_density_matrix(data: &Dataset, experts: &ExpertParams) -> DMatrix<f64> {
    let n = data.n();
    let x = data.x();
    let k = experts.k();
    let mut out = DMatrix::zeros(n, k);
    match (experts, data.y()) {
        (ExpertParams::Gaussian { coefs, sigma }, Response::Real(y)) => {
            for c in 0..k {
                let mu = coefs[c].eval_all(x);
                for i in 0..n {
                    out[(i, c)] = gaussian_log_pdf(y[i], mu[i], sigma[c]);
                }
            }
        }
        (ExpertParams::Poisson { coefs }, Response::Count(y)) => {
            for c in 0..k {
                let eta = coefs[c].eval_all(x);
                for i in 0..n {
                    out[(i, c)] = poisson_log_pmf(y[i], eta[i], data.log_factorial(i));
                }
            }
        }
        (ExpertParams::Multinomial { coefs }, Response::Categorical { labels, .. }) => {
            for c in 0..k {
                let etas: Vec<Vec<f64>> = coefs[c].iter().map(|b| b.eval_all(x)).collect();
                let mut buf = vec![0.0; etas.len() + 1];
                for i in 0..n {
                    for (r, e) in etas.iter().enumerate() {
                        buf[r] = e[i];
                    }
                    *buf.last_mut().unwrap() = 0.0;
                    out[(i, c)] = buf[labels[i]] - log_sum_exp(&buf);
                }
            }
        }
        _ => unreachable!("family checked by caller"),
    }
    out
}

/// `log π_k(x_i) + log p_k(y_i | x_i)` for every observation and component.
pub(crate) fn joint_log_density(data: &Dataset, params: &MoEParameters) -> DMatrix<f64> {
    params.gating.log_probs(data.x()) + expert_log_density_matrix(data, &params.experts)
}

/// Per-observation mixture log-likelihood `log Σ_k π_k p_k`.
pub fn pointwise_log_likelihood(data: &Dataset, params: &MoEParameters) -> Result<Vec<f64>> {
    params.check_against(data)?;
    let joint = joint_log_density(data, params);
    Ok(joint
        .row_iter()
        .map(|row| log_sum_exp(&row.iter().copied().collect::<Vec<_>>()))
        .collect())
}

/// Observed-data log-likelihood `L(θ)`.
pub fn log_likelihood(data: &Dataset, params: &MoEParameters) -> Result<f64> {
    Ok(pointwise_log_likelihood(data, params)?.iter().sum())
}

/// `Σ_k λ_k ||β_k||_1 + Σ_k γ_k ||w_k||_1` over slopes only.
pub fn penalty_value(params: &MoEParameters, penalty: &PenaltyConfig) -> Result<f64> {
    let k = params.k();
    if penalty.lambda.len() != k || penalty.gamma.len() + 1 != k {
        return Err(MoeError::Dimension(format!(
            "penalty has {} / {} entries for K = {k}",
            penalty.lambda.len(),
            penalty.gamma.len()
        )));
    }
    let mut total = 0.0;
    for c in 0..k {
        let l1: f64 = params.experts.blocks(c).iter().map(|b| b.l1_slopes()).sum();
        if penalty.lambda[c] != 0.0 {
            total += penalty.lambda[c] * l1;
        }
    }
    for (row, g) in params.gating.rows().iter().zip(&penalty.gamma) {
        if *g != 0.0 {
            total += g * row.l1_slopes();
        }
    }
    Ok(total)
}

/// Penalized log-likelihood `PL(θ) = L(θ) - penalties`.
pub fn penalized_log_likelihood(data: &Dataset, params: &MoEParameters, penalty: &PenaltyConfig) -> Result<f64> {
    let pen = penalty_value(params, penalty)?;
    Ok(log_likelihood(data, params)? - pen)
}

/// Predicted response at a covariate vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Prediction {
    Real(f64),
    Count(u64),
    /// Zero-based class index.
    Category(usize),
}

impl Prediction {
    pub fn as_f64(&self) -> f64 {
        match *self {
            Prediction::Real(v) => v,
            Prediction::Count(c) => c as f64,
            Prediction::Category(r) => (r + 1) as f64,
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mode of the expert picked by the gating network at `x`.
///
/// The component is the one with the largest gating probability, since the
/// posterior needs `y`. The response is then the expert's mode: the mean for
/// Gaussian experts, `floor(exp(η))` for Poisson experts, and the most
/// probable class for multinomial experts.
pub fn predict_response(x: &[f64], params: &MoEParameters) -> Result<Prediction> {
    if !params.is_finite() {
        return Err(MoeError::NonFiniteParams);
    }
    let pi = softmax_gating(x, &params.gating)?;
    expert_mode(x, params, argmax(&pi))
}

/// Mode of expert `k` at `x`: the mean for Gaussian experts, `⌊rate⌋` for
/// Poisson experts and the most probable class for multinomial experts.
pub fn expert_mode(x: &[f64], params: &MoEParameters, k: usize) -> Result<Prediction> {
    if k >= params.k() {
        return Err(MoeError::Dimension(format!("component {} of {}", k + 1, params.k())));
    }
    if x.len() != params.p() {
        return Err(MoeError::Dimension(format!("x has {} entries, model has p = {}", x.len(), params.p())));
    }
    Ok(match &params.experts {
        ExpertParams::Gaussian { coefs, .. } => Prediction::Real(coefs[k].eval(x)),
        ExpertParams::Poisson { coefs } => {
            let rate = coefs[k].eval(x).exp();
            Prediction::Count(if rate.is_finite() { rate.floor() as u64 } else { u64::MAX })
        }
        ExpertParams::Multinomial { coefs } => {
            let mut etas: Vec<f64> = coefs[k].iter().map(|c| c.eval(x)).collect();
            etas.push(0.0);
            Prediction::Category(argmax(&etas))
        }
    })
}
