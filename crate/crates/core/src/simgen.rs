//! Synthetic data from known mixtures of experts.
//!
//! Covariates are Gaussian with AR(1) correlation `ρ^{|j − j'|}`. Each
//! response first draws its component from the gating network and then
//! draws from that component's expert.
//!
//! Randomness comes from ChaCha8. A design seed drives two streams: stream
//! 0 for covariates and stream 1 for components and responses. Replicate
//! `r` of a study with base seed `s` uses the seed `derive_seed(s, r)`, so
//! any replicate can be regenerated on its own.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};

use crate::error::{MoeError, Result};
use crate::model::{
    softmax_gating, Dataset, ExpertParams, Family, GatingParams, LinearCoef, MoEParameters, Response,
};

/// SplitMix64 finalizer applied to `base + index·φ`; maps a base seed and a
/// replicate index to well-separated seeds.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A full simulation design.
#[derive(Clone, Debug, PartialEq)]
pub struct SimDesign {
    pub n: usize,
    pub p: usize,
    pub rho: f64,
    pub truth: MoEParameters,
    pub seed: u64,
}

/// A simulated dataset with its true component labels (zero-based).
#[derive(Clone, Debug)]
pub struct SimulatedData {
    pub data: Dataset,
    pub z: Vec<usize>,
}

fn coef(v: &[f64]) -> LinearCoef {
    LinearCoef::from_slice(v)
}

/// Two-component benchmark designs with `n = 300`, `p = 6` and `ρ = 0.5`.
/// For `Family::Multinomial` the experts are binary logistic (`R = 2`).
pub fn preset_design(family: Family) -> SimDesign {
    let (gate, experts) = match family {
        Family::Gaussian => (
            [1.0, 2.0, 0.0, 0.0, -1.0, 0.0, 0.0],
            ExpertParams::Gaussian {
                coefs: vec![coef(&[0.0, 0.0, 1.5, 0.0, 0.0, 0.0, 1.0]), coef(&[0.0, 1.0, -1.5, 0.0, 0.0, 2.0, 0.0])],
                sigma: vec![1.0, 1.0],
            },
        ),
        Family::Poisson => (
            [1.0, 0.0, 0.0, 1.0, 0.0, -1.5, 0.0],
            ExpertParams::Poisson {
                coefs: vec![coef(&[0.0, 1.0, 0.0, -2.0, 0.0, 1.5, 0.0]), coef(&[0.0, 0.0, 2.0, 0.0, -1.0, 0.0, 0.0])],
            },
        ),
        Family::Multinomial => (
            [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, -1.5],
            ExpertParams::Multinomial {
                coefs: vec![
                    vec![coef(&[0.0, -1.0, 2.0, 0.0, 0.0, 1.5, 0.0])],
                    vec![coef(&[0.0, 1.0, 0.0, 0.0, -2.0, 0.0, 0.0])],
                ],
            },
        ),
    };
    let truth = MoEParameters::new(GatingParams::new(6, vec![coef(&gate)]).expect("p = 6"), experts)
        .expect("preset shapes are consistent");
    SimDesign { n: 300, p: 6, rho: 0.5, truth, seed: 0 }
}

fn resize(c: &LinearCoef, p: usize) -> LinearCoef {
    let mut slopes = c.slopes.clone();
    slopes.resize(p, 0.0);
    LinearCoef::new(c.intercept, slopes)
}

impl SimDesign {
    /// Changes `n` and `p`. Slopes are truncated to the first `p`, or padded
    /// with zeros.
    pub fn with_shape(mut self, n: usize, p: usize) -> Self {
        let gating =
            GatingParams::new(p, self.truth.gating.rows().iter().map(|r| resize(r, p)).collect()).expect("resized");
        let experts = match &self.truth.experts {
            ExpertParams::Gaussian { coefs, sigma } => {
                ExpertParams::Gaussian { coefs: coefs.iter().map(|c| resize(c, p)).collect(), sigma: sigma.clone() }
            }
            ExpertParams::Poisson { coefs } => ExpertParams::Poisson { coefs: coefs.iter().map(|c| resize(c, p)).collect() },
            ExpertParams::Multinomial { coefs } => ExpertParams::Multinomial {
                coefs: coefs.iter().map(|b| b.iter().map(|c| resize(c, p)).collect()).collect(),
            },
        };
        self.truth = MoEParameters { gating, experts };
        self.n = n;
        self.p = p;
        self
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn family(&self) -> Family {
        self.truth.family()
    }

    /// Draws covariates and responses from the design's seed.
    pub fn simulate(&self) -> Result<SimulatedData> {
        if self.truth.p() != self.p {
            return Err(MoeError::Dimension(format!("design p = {} but truth has p = {}", self.p, self.truth.p())));
        }
        let x = gen_covariates(self.n, self.p, self.rho, self.seed)?;
        gen_responses(x, &self.truth, self.seed)
    }

    /// Replicate `index` of a study whose base seed is `self.seed`.
    pub fn replicate(&self, index: u64) -> Result<SimulatedData> {
        self.clone().with_seed(derive_seed(self.seed, index)).simulate()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// `n × p` matrix with i.i.d. `N(0, Σ)` rows, `Σ_{jj'} = ρ^{|j − j'|}`,
/// obtained as `L z` with `L` the Cholesky factor of `Σ`.
pub fn gen_covariates(n: usize, p: usize, rho: f64, seed: u64) -> Result<DMatrix<f64>> {
    if !(rho > -1.0 && rho < 1.0) {
        return Err(MoeError::InvalidConfig(format!("rho = {rho} must lie in (-1, 1)")));
    }
    if n == 0 || p == 0 {
        return Err(MoeError::InvalidConfig("n and p must be positive".into()));
    }
    let sigma = DMatrix::from_fn(p, p, |i, j| rho.powi((i as i32 - j as i32).abs()));
    let chol = sigma
        .cholesky()
        .ok_or_else(|| MoeError::InvalidConfig("correlation matrix is not positive definite".into()))?;
    let l = chol.l();
    let mut rng = stream(seed, 0);
    let z = DMatrix::from_fn(p, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok((l * z).transpose())
}

/// Draws components from the gating network, then responses from the experts.
pub fn gen_responses(x: DMatrix<f64>, truth: &MoEParameters, seed: u64) -> Result<SimulatedData> {
    let (n, p) = x.shape();
    if truth.p() != p {
        return Err(MoeError::Dimension(format!("design has p = {p}, truth has p = {}", truth.p())));
    }
    let mut rng = stream(seed, 1);
    let mut z = Vec::with_capacity(n);
    let mut row = vec![0.0; p];
    let mut real = Vec::new();
    let mut counts = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        for j in 0..p {
            row[j] = x[(i, j)];
        }
        let pi = softmax_gating(&row, &truth.gating)?;
        let k = draw_categorical(&pi, rng.random::<f64>());
        z.push(k);
        match &truth.experts {
            ExpertParams::Gaussian { coefs, sigma } => {
                let mean = coefs[k].eval(&row);
                let normal = Normal::new(mean, sigma[k]).map_err(|e| MoeError::InvalidConfig(e.to_string()))?;
                real.push(normal.sample(&mut rng));
            }
            ExpertParams::Poisson { coefs } => {
                let rate = coefs[k].eval(&row).exp();
                let draw = Poisson::new(rate).map_err(|e| MoeError::InvalidConfig(format!("rate {rate}: {e}")))?;
                counts.push(draw.sample(&mut rng) as u64);
            }
            ExpertParams::Multinomial { coefs } => {
                let mut logits: Vec<f64> = coefs[k].iter().map(|c| c.eval(&row)).collect();
                logits.push(0.0);
                let probs = crate::model::softmax(&logits);
                labels.push(draw_categorical(&probs, rng.random::<f64>()));
            }
        }
    }
    let y = match &truth.experts {
        ExpertParams::Gaussian { .. } => Response::Real(real),
        ExpertParams::Poisson { .. } => Response::Count(counts),
        ExpertParams::Multinomial { .. } => {
            let levels = truth.levels().expect("multinomial truth");
            // A small sample may miss a level; keep the declared level count.
            Response::Categorical { labels, levels }
        }
    };
    Ok(SimulatedData { data: Dataset::new(x, y)?, z })
}

fn draw_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}
