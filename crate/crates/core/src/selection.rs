//! Modified-BIC selection over a grid of `(K, λ, γ)`.
//!
//! `BIC = L(θ̂) − DF · log(n) / 2`. `DF` counts every free parameter that
//! is not zero: nonzero gating and expert slopes, all intercepts, and the
//! Gaussian `σ` values.

use serde::Serialize;

use crate::em::{fit_em, FitConfig, FitResult, InitStrategy};
use crate::error::{MoeError, Result};
use crate::model::{Dataset, MoEParameters, PenaltyConfig};
use crate::parallel::par_map;

/// Candidate values for a grid search. Every list is non-empty and sorted
/// ascending.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridSpec {
    pub k_candidates: Vec<usize>,
    pub lambda_grid: Vec<f64>,
    pub gamma_grid: Vec<f64>,
}

fn check_sorted(name: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(MoeError::InvalidConfig(format!("{name} grid is empty")));
    }
    if v.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
        return Err(MoeError::InvalidConfig(format!("{name} grid must be finite and non-negative")));
    }
    if v.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MoeError::InvalidConfig(format!("{name} grid must be strictly ascending")));
    }
    Ok(())
}

impl GridSpec {
    pub fn new(k_candidates: Vec<usize>, lambda_grid: Vec<f64>, gamma_grid: Vec<f64>) -> Result<Self> {
        let grid = Self { k_candidates, lambda_grid, gamma_grid };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_candidates.is_empty() || self.k_candidates.contains(&0) {
            return Err(MoeError::InvalidConfig("K candidates must be non-empty and positive".into()));
        }
        if self.k_candidates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MoeError::InvalidConfig("K candidates must be strictly ascending".into()));
        }
        check_sorted("lambda", &self.lambda_grid)?;
        check_sorted("gamma", &self.gamma_grid)
    }

    /// Number of grid cells.
    pub fn len(&self) -> usize {
        self.k_candidates.len() * self.lambda_grid.len() * self.gamma_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `m` logarithmically spaced values from `lo` to `hi` inclusive.
pub fn log_spaced(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    match m {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..m)
                .map(|i| match i {
                    0 => lo,
                    _ if i == m - 1 => hi,
                    _ => (a + (b - a) * i as f64 / (m - 1) as f64).exp(),
                })
                .collect()
        }
    }
}

/// Seven log-spaced values from `0.01·√n` to `2·√n` for both `λ` and `γ`,
/// and `K ∈ {1, …, 5}` (capped at `n`).
pub fn build_default_grid(data: &Dataset) -> Result<GridSpec> {
    let n = data.n();
    if n < 4 {
        return Err(MoeError::InvalidData(format!("default grid needs n >= 4, got {n}")));
    }
    let root = (n as f64).sqrt();
    let values = log_spaced(0.01 * root, 2.0 * root, 7);
    GridSpec::new((1..=5.min(n)).collect(), values.clone(), values)
}

/// Free parameters counted by the modified BIC.
pub fn degrees_of_freedom(params: &MoEParameters, tied_sigma: bool) -> usize {
    let k = params.k();
    let gating = params.gating.rows().iter().map(|r| 1 + r.nonzero_slopes()).sum::<usize>();
    let experts: usize = (0..k).flat_map(|c| params.experts.blocks(c)).map(|b| 1 + b.nonzero_slopes()).sum();
    let sigma = match params.experts.sigma() {
        Some(_) if tied_sigma => 1,
        Some(s) => s.len(),
        None => 0,
    };
    gating + experts + sigma
}

/// `loglik − df · log(n) / 2`.
pub fn modified_bic(loglik: f64, df: usize, n: usize) -> f64 {
    loglik - df as f64 * (n as f64).ln() / 2.0
}

/// One row of the BIC table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BicRow {
    pub k: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub loglik: f64,
    pub df: usize,
    pub bic: f64,
    pub converged: bool,
    /// Fit had an empty or collapsed component and was not eligible.
    pub degenerate: bool,
    /// Error message when the fit failed outright.
    pub error: Option<String>,
}

impl BicRow {
    pub fn eligible(&self) -> bool {
        self.error.is_none() && !self.degenerate && self.bic.is_finite()
    }
}

#[derive(Clone, Debug)]
pub struct Selection {
    pub best: FitResult,
    /// Index of the winning row in `table`.
    pub best_row: usize,
    /// Rows ordered by `K`, then `λ`, then `γ`.
    pub table: Vec<BicRow>,
}

fn row_for(k: usize, lambda: f64, gamma: f64, n: usize, fit: &Result<FitResult>) -> BicRow {
    match fit {
        Ok(f) => BicRow {
            k,
            lambda,
            gamma,
            loglik: f.loglik,
            df: f.df,
            bic: modified_bic(f.loglik, f.df, n),
            converged: f.converged,
            degenerate: f.is_degenerate(),
            error: None,
        },
        Err(e) => BicRow {
            k,
            lambda,
            gamma,
            loglik: f64::NAN,
            df: 0,
            bic: f64::NAN,
            converged: false,
            degenerate: false,
            error: Some(e.to_string()),
        },
    }
}

/// Fits the λ path at fixed `(K, γ)` in ascending `λ`, warm-starting each
/// fit from the previous solution.
fn fit_path(data: &Dataset, template: &FitConfig, k: usize, gamma: f64, lambdas: &[f64]) -> Vec<Result<FitResult>> {
    let mut out: Vec<Result<FitResult>> = Vec::with_capacity(lambdas.len());
    let mut warm: Option<MoEParameters> = None;
    for &lambda in lambdas {
        let mut cfg = FitConfig { k, penalty: PenaltyConfig::uniform(k, lambda, gamma), ..template.clone() };
        if let Some(p) = &warm {
            cfg.init = InitStrategy::Given(p.clone());
        } else if matches!(template.init, InitStrategy::Given(_)) {
            cfg.init = InitStrategy::RandomPartition;
        }
        let fit = fit_em(data, &cfg);
        if let Ok(f) = &fit {
            warm = (!f.is_degenerate()).then(|| f.params.clone());
        }
        out.push(fit);
    }
    out
}

/// Fits every grid cell and returns the one with the largest modified BIC.
///
/// Ties go to the smaller `DF`, then the smaller `K`, then the earlier row.
/// Failed and degenerate fits stay in the table but cannot be selected. If
/// no cell is eligible, the call fails.
pub fn select_model(data: &Dataset, grid: &GridSpec, template: &FitConfig) -> Result<Selection> {
    grid.validate()?;
    let n = data.n();
    // For K = 1 the gating penalty is irrelevant, so one path serves every γ.
    let paths: Vec<(usize, usize)> = grid
        .k_candidates
        .iter()
        .flat_map(|&k| {
            let gammas = if k == 1 { 1 } else { grid.gamma_grid.len() };
            (0..gammas).map(move |g| (k, g))
        })
        .collect();
    let fits = par_map(&paths, |&(k, g)| fit_path(data, template, k, grid.gamma_grid[g], &grid.lambda_grid));

    let mut table = Vec::with_capacity(grid.len());
    let mut results: Vec<Option<FitResult>> = Vec::with_capacity(grid.len());
    for &k in &grid.k_candidates {
        for (li, &lambda) in grid.lambda_grid.iter().enumerate() {
            for (gi, &gamma) in grid.gamma_grid.iter().enumerate() {
                let path_idx = paths
                    .iter()
                    .position(|&(pk, pg)| pk == k && (k == 1 || pg == gi))
                    .expect("path exists");
                let fit = &fits[path_idx][li];
                table.push(row_for(k, lambda, gamma, n, fit));
                results.push(fit.as_ref().ok().cloned());
            }
        }
    }

    let mut best: Option<usize> = None;
    for (i, row) in table.iter().enumerate() {
        if !row.eligible() {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => {
                let cur = &table[b];
                row.bic > cur.bic || (row.bic == cur.bic && (row.df, row.k) < (cur.df, cur.k))
            }
        };
        if better {
            best = Some(i);
        }
    }
    let Some(best_row) = best else {
        let reasons: Vec<String> = table
            .iter()
            .map(|r| {
                let why = r.error.clone().unwrap_or_else(|| "degenerate component".into());
                format!("(K={}, lambda={}, gamma={}): {why}", r.k, r.lambda, r.gamma)
            })
            .collect();
        return Err(MoeError::AllFitsFailed(reasons.join("; ")));
    };
    let best = results[best_row].take().expect("eligible rows have fits");
    Ok(Selection { best, best_row, table })
}
