//! Support recovery, parameter error and clustering agreement.
//!
//! Compare an estimate with the truth only after putting its components in
//! the truth's order, for example with
//! [`canonicalize_labels`](crate::em::canonicalize_labels) and the truth as
//! reference. For `K > 2` the alignment is only as good as that matching.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{MoeError, Result};
use crate::model::{argmax, MoEParameters};

/// Largest `K` for which permutations are enumerated exhaustively.
pub const MAX_EXHAUSTIVE_K: usize = 6;

/// A metric value, with a flag when it was produced by a fallback rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metric {
    pub value: f64,
    /// True when greedy matching replaced the exhaustive search, or a
    /// convention (such as `n = 1` for the ARI) was applied.
    pub flagged: bool,
}

/// Maximum-responsibility component per row; ties go to the lowest index.
pub fn hard_assignment(tau: &DMatrix<f64>) -> Vec<usize> {
    let mut row = vec![0.0; tau.ncols()];
    (0..tau.nrows())
        .map(|i| {
            for c in 0..tau.ncols() {
                row[c] = tau[(i, c)];
            }
            argmax(&row)
        })
        .collect()
}

/// All permutations of `0..k` in lexicographic order.
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    loop {
        out.push(cur.clone());
        // Next lexicographic permutation.
        let Some(i) = (1..k).rev().find(|&i| cur[i - 1] < cur[i]) else { break };
        let j = (i..k).rev().find(|&j| cur[j] > cur[i - 1]).expect("pivot exists");
        cur.swap(i - 1, j);
        cur[i..].reverse();
    }
    out
}

/// Assignment minimizing `Σ_j cost[j][perm[j]]` for a square cost matrix.
/// Exhaustive for `k ≤ 6`, where the first minimum in lexicographic order
/// wins; greedy beyond that, and then the flag is set.
pub fn best_permutation(cost: &[Vec<f64>]) -> (Vec<usize>, bool) {
    let k = cost.len();
    if k <= MAX_EXHAUSTIVE_K {
        let mut best = (0..k).collect::<Vec<_>>();
        let mut best_cost = f64::INFINITY;
        for perm in permutations(k) {
            let c: f64 = perm.iter().enumerate().map(|(j, &o)| cost[j][o]).sum();
            if c < best_cost {
                best_cost = c;
                best = perm;
            }
        }
        (best, false)
    } else {
        let mut pairs: Vec<(f64, usize, usize)> =
            (0..k).flat_map(|j| (0..k).map(move |o| (j, o))).map(|(j, o)| (cost[j][o], j, o)).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut perm = vec![usize::MAX; k];
        let mut used = vec![false; k];
        for (_, j, o) in pairs {
            if perm[j] == usize::MAX && !used[o] {
                perm[j] = o;
                used[o] = true;
            }
        }
        (perm, true)
    }
}

fn check_labels(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(MoeError::Dimension(format!("label vectors of length {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(MoeError::InvalidData("label vectors are empty".into()));
    }
    Ok(())
}

/// Share of observations whose estimated label matches the true label,
/// maximized over relabelings of the estimate.
pub fn correct_classification_rate(estimated: &[usize], truth: &[usize]) -> Result<Metric> {
    check_labels(estimated, truth)?;
    let k = estimated.iter().chain(truth).max().copied().unwrap_or(0) + 1;
    let mut counts = vec![vec![0.0; k]; k];
    for (&e, &t) in estimated.iter().zip(truth) {
        counts[t][e] += 1.0;
    }
    let cost: Vec<Vec<f64>> = counts.iter().map(|r| r.iter().map(|c| -c).collect()).collect();
    let (perm, flagged) = best_permutation(&cost);
    let agree: f64 = perm.iter().enumerate().map(|(t, &e)| counts[t][e]).sum();
    Ok(Metric { value: agree / truth.len() as f64, flagged })
}

fn choose2(v: f64) -> f64 {
    v * (v - 1.0) / 2.0
}

/// Hubert–Arabie adjusted Rand index. With a single observation the index
/// is 1 by convention, and the result is flagged.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<Metric> {
    check_labels(a, b)?;
    let n = a.len();
    if n == 1 {
        return Ok(Metric { value: 1.0, flagged: true });
    }
    let ka = a.iter().max().copied().unwrap_or(0) + 1;
    let kb = b.iter().max().copied().unwrap_or(0) + 1;
    let mut table = vec![vec![0.0; kb]; ka];
    for (&u, &v) in a.iter().zip(b) {
        table[u][v] += 1.0;
    }
    let index: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let sum_a: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let sum_b: f64 = (0..kb).map(|j| choose2(table.iter().map(|r| r[j]).sum())).sum();
    let total = choose2(n as f64);
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        // Both partitions are all-singletons or a single cluster.
        return Ok(Metric { value: 1.0, flagged: false });
    }
    Ok(Metric { value: (index - expected) / (max - expected), flagged: false })
}

/// Sensitivity and specificity of one coefficient block. A ratio is absent
/// when its denominator is zero.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockSupport {
    pub block: String,
    /// Share of true zeros estimated as exactly zero.
    pub sensitivity: Option<f64>,
    /// Share of true nonzeros estimated as nonzero.
    pub specificity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SupportReport {
    pub blocks: Vec<BlockSupport>,
}

impl SupportReport {
    pub fn get(&self, block: &str) -> Option<&BlockSupport> {
        self.blocks.iter().find(|b| b.block == block)
    }
}

fn check_shapes(est: &MoEParameters, truth: &MoEParameters) -> Result<()> {
    if est.k() != truth.k() || est.p() != truth.p() || est.family() != truth.family() || est.levels() != truth.levels()
    {
        return Err(MoeError::Dimension(format!(
            "estimate (K = {}, p = {}, {}) and truth (K = {}, p = {}, {}) differ in shape",
            est.k(),
            est.p(),
            est.family(),
            truth.k(),
            truth.p(),
            truth.family()
        )));
    }
    Ok(())
}

/// Named slope blocks: every expert (all levels pooled), then every gating row.
fn slope_blocks(params: &MoEParameters) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    for c in 0..params.k() {
        let slopes = params.experts.blocks(c).iter().flat_map(|b| b.slopes.iter().copied()).collect();
        out.push((format!("expert{}", c + 1), slopes));
    }
    for (c, r) in params.gating.rows().iter().enumerate() {
        out.push((format!("gate{}", c + 1), r.slopes.clone()));
    }
    out
}

/// Support recovery with exact zeros.
pub fn support_metrics(estimated: &MoEParameters, truth: &MoEParameters) -> Result<SupportReport> {
    support_metrics_with_tolerance(estimated, truth, 0.0)
}

/// Support recovery that treats `|β| ≤ zero_tol` as zero in the estimate.
pub fn support_metrics_with_tolerance(
    estimated: &MoEParameters,
    truth: &MoEParameters,
    zero_tol: f64,
) -> Result<SupportReport> {
    check_shapes(estimated, truth)?;
    let blocks = slope_blocks(estimated)
        .into_iter()
        .zip(slope_blocks(truth))
        .map(|((name, est), (_, tru))| {
            let (mut zeros, mut zeros_hit, mut nonzeros, mut nonzeros_hit) = (0, 0, 0, 0);
            for (e, t) in est.iter().zip(&tru) {
                let est_zero = e.abs() <= zero_tol;
                if *t == 0.0 {
                    zeros += 1;
                    zeros_hit += est_zero as usize;
                } else {
                    nonzeros += 1;
                    nonzeros_hit += (!est_zero) as usize;
                }
            }
            BlockSupport {
                block: name,
                sensitivity: (zeros > 0).then(|| zeros_hit as f64 / zeros as f64),
                specificity: (nonzeros > 0).then(|| nonzeros_hit as f64 / nonzeros as f64),
            }
        })
        .collect();
    Ok(SupportReport { blocks })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MseEntry {
    pub block: String,
    /// 0 for the intercept (or σ), `j` for slope `j`.
    pub index: usize,
    pub truth: f64,
    pub estimate: f64,
    pub squared_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MseReport {
    pub entries: Vec<MseEntry>,
    /// Mean squared error per block, in block order.
    pub block_means: Vec<(String, f64)>,
}

/// Named full coefficient blocks (intercept first), plus σ blocks.
pub fn coefficient_blocks(params: &MoEParameters) -> Vec<(String, Vec<f64>)> {
    let multi = params.levels().is_some_and(|r| r > 2);
    let mut out = Vec::new();
    for c in 0..params.k() {
        for (r, b) in params.experts.blocks(c).iter().enumerate() {
            let name = if multi { format!("expert{}.level{}", c + 1, r + 1) } else { format!("expert{}", c + 1) };
            out.push((name, b.to_vec()));
        }
    }
    for (c, r) in params.gating.rows().iter().enumerate() {
        out.push((format!("gate{}", c + 1), r.to_vec()));
    }
    if let Some(s) = params.experts.sigma() {
        for (c, v) in s.iter().enumerate() {
            out.push((format!("sigma{}", c + 1), vec![*v]));
        }
    }
    out
}

/// Squared error of every coefficient, intercepts and `σ` included.
pub fn parameter_mse(estimated: &MoEParameters, truth: &MoEParameters) -> Result<MseReport> {
    check_shapes(estimated, truth)?;
    let mut entries = Vec::new();
    let mut block_means = Vec::new();
    for ((name, est), (_, tru)) in coefficient_blocks(estimated).into_iter().zip(coefficient_blocks(truth)) {
        let mut total = 0.0;
        for (j, (e, t)) in est.iter().zip(&tru).enumerate() {
            let se = (e - t) * (e - t);
            total += se;
            entries.push(MseEntry { block: name.clone(), index: j, truth: *t, estimate: *e, squared_error: se });
        }
        block_means.push((name, total / est.len() as f64));
    }
    Ok(MseReport { entries, block_means })
}
