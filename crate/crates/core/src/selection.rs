//! Greedy D-optimal selection of vector sensors.
//!
//! Each candidate site contributes an `s x r` block `W_j` of the stacked
//! sensitivity matrix. For a selection `S` the objective is
//! `det(sum_{j in S} W_j^T W_j + eps I)`, the regularized determinant of the
//! Fisher information. The greedy method appends, one site per step, the
//! candidate that maximizes it.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::sensitivity::SensitivityMatrix;

pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;
pub const BASELINE_STREAM_TAG: &str = "baseline";

/// Scale-aware default regularization: `1e-8 * trace(D^T D) / r`.
pub fn default_epsilon(d: &DMatrix<f64>) -> f64 {
    1e-8 * d.norm_squared() / d.ncols() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Greedy,
    BruteForce,
    Random,
    Explicit,
}

/// Ordered selection with the objective after each pick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// 0-based candidate indices in selection order.
    pub selected: Vec<usize>,
    pub objective_trace: Vec<f64>,
    pub epsilon: f64,
    pub n: usize,
    pub p: usize,
    pub r: usize,
    pub s: usize,
    pub method: SelectionMethod,
    /// Number of objective evaluations performed.
    pub evaluations: u64,
}

/// Per-site Gram matrices `W_j^T W_j` of a stacked candidate matrix.
#[derive(Debug, Clone)]
pub struct Candidates {
    grams: Vec<DMatrix<f64>>,
    r: usize,
    s: usize,
}

impl Candidates {
    /// Split `d` into consecutive blocks of `block_rows` rows.
    pub fn new(d: &DMatrix<f64>, block_rows: usize) -> Result<Self> {
        if block_rows == 0 || !d.nrows().is_multiple_of(block_rows) || d.nrows() == 0 {
            return Err(Error::Shape(format!(
                "{} rows cannot be split into blocks of {block_rows}",
                d.nrows()
            )));
        }
        if d.iter().any(|x| !x.is_finite()) {
            return Err(Error::Matrix("candidate matrix has non-finite entries".into()));
        }
        let n = d.nrows() / block_rows;
        let grams = (0..n)
            .into_par_iter()
            .map(|j| {
                let w = d.rows(j * block_rows, block_rows);
                w.transpose() * w
            })
            .collect();
        Ok(Candidates { grams, r: d.ncols(), s: block_rows })
    }

    pub fn from_sensitivity(m: &SensitivityMatrix) -> Result<Self> {
        Candidates::new(&m.normalized, m.block_rows())
    }

    pub fn len(&self) -> usize {
        self.grams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grams.is_empty()
    }

    pub fn fisher(&self, selected: &[usize], epsilon: f64) -> DMatrix<f64> {
        let mut f = DMatrix::identity(self.r, self.r) * epsilon;
        for &j in selected {
            f += &self.grams[j];
        }
        f
    }

    /// Regularized determinant of the given selection.
    pub fn objective(&self, selected: &[usize], epsilon: f64) -> Result<f64> {
        check_epsilon(epsilon)?;
        Ok(self.fisher(selected, epsilon).determinant())
    }

    /// `default_epsilon` of the full candidate matrix, from the Gram traces.
    pub fn default_epsilon(&self) -> f64 {
        let trace: f64 = self.grams.iter().map(|g| g.trace()).sum();
        1e-8 * trace / self.r as f64
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(Error::Argument(format!("epsilon must be a small positive number, got {epsilon}")))
    }
}

/// `ln det` of a symmetric positive definite matrix via Cholesky.
fn log_det_spd(m: DMatrix<f64>) -> Result<f64> {
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::Matrix("regularized Fisher matrix is not positive definite".into()))?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>())
}

/// `det(W^T W + eps I)` for a stacked block matrix `w` (`r` = column count).
pub fn objective(w: &DMatrix<f64>, epsilon: f64) -> Result<f64> {
    check_epsilon(epsilon)?;
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::Matrix("objective input has non-finite entries".into()));
    }
    let r = w.ncols();
    Ok((w.transpose() * w + DMatrix::identity(r, r) * epsilon).determinant())
}

/// Greedy maximization of the regularized determinant.
///
/// Ties go to the lowest candidate index.
pub fn greedy_select(c: &Candidates, p: usize, epsilon: f64) -> Result<SelectionResult> {
    check_epsilon(epsilon)?;
    let n = c.len();
    if p == 0 || p > n {
        return Err(Error::Argument(format!("cannot select {p} of {n} sites")));
    }
    let mut selected = Vec::with_capacity(p);
    let mut chosen = vec![false; n];
    let mut trace = Vec::with_capacity(p);
    let mut fisher = DMatrix::identity(c.r, c.r) * epsilon;
    let mut evaluations = 0u64;
    for _ in 0..p {
        let scores = (0..n)
            .into_par_iter()
            .filter(|&j| !chosen[j])
            .map(|j| log_det_spd(&fisher + &c.grams[j]).map(|v| (j, v)))
            .collect::<Result<Vec<_>>>()?;
        evaluations += scores.len() as u64;
        let (best, _) = scores
            .iter()
            .copied()
            .fold(None::<(usize, f64)>, |acc, (j, v)| match acc {
                Some((_, bv)) if v <= bv => acc,
                _ => Some((j, v)),
            })
            .expect("at least one candidate remains");
        chosen[best] = true;
        selected.push(best);
        fisher += &c.grams[best];
        trace.push(fisher.determinant());
    }
    Ok(SelectionResult {
        selected,
        objective_trace: trace,
        epsilon,
        n,
        p,
        r: c.r,
        s: c.s,
        method: SelectionMethod::Greedy,
        evaluations,
    })
}

pub fn binomial(n: usize, p: usize) -> u128 {
    if p > n {
        return 0;
    }
    let p = p.min(n - p);
    (0..p).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Exhaustive search over all `C(n, p)` subsets. Ties go to the
/// lexicographically first subset.
pub fn brute_force_select(c: &Candidates, p: usize, epsilon: f64) -> Result<SelectionResult> {
    check_epsilon(epsilon)?;
    let n = c.len();
    if p == 0 || p > n {
        return Err(Error::Argument(format!("cannot select {p} of {n} sites")));
    }
    let count = binomial(n, p);
    if count > BRUTE_FORCE_LIMIT {
        return Err(Error::TooManySubsets { n, p, count, limit: BRUTE_FORCE_LIMIT });
    }
    let mut idx: Vec<usize> = (0..p).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut evaluations = 0u64;
    loop {
        let v = log_det_spd(c.fisher(&idx, epsilon))?;
        evaluations += 1;
        if best.as_ref().is_none_or(|(_, bv)| v > *bv) {
            best = Some((idx.clone(), v));
        }
        // Next combination in lexicographic order.
        let Some(i) = (0..p).rev().find(|&i| idx[i] < n - p + i) else {
            break;
        };
        idx[i] += 1;
        for t in i + 1..p {
            idx[t] = idx[t - 1] + 1;
        }
    }
    let (selected, _) = best.expect("at least one subset");
    let trace = (1..=p)
        .map(|m| c.fisher(&selected[..m], epsilon).determinant())
        .collect();
    Ok(SelectionResult {
        selected,
        objective_trace: trace,
        epsilon,
        n,
        p,
        r: c.r,
        s: c.s,
        method: SelectionMethod::BruteForce,
        evaluations,
    })
}

/// `count` subsets of `p` distinct indices from `0..n`.
///
/// Subset `c` is a partial Fisher-Yates shuffle driven by stream
/// `(seed, "baseline", c)`: position `i` swaps with `i + below(i, n - i)`.
pub fn random_select(n: usize, p: usize, seed: u64, count: usize) -> Result<Vec<Vec<usize>>> {
    if p == 0 || p > n {
        return Err(Error::Argument(format!("cannot select {p} of {n} sites")));
    }
    if count == 0 {
        return Err(Error::Argument("random baseline count must be at least 1".into()));
    }
    Ok((0..count)
        .map(|c| {
            let stream = Stream::new(seed, BASELINE_STREAM_TAG, c as u64);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in 0..p {
                let j = i + stream.below(i as u64, (n - i) as u64) as usize;
                perm.swap(i, j);
            }
            perm.truncate(p);
            perm
        })
        .collect())
}

/// Wrap an externally chosen subset with its objective trace.
pub fn explicit_select(c: &Candidates, sites: &[usize], epsilon: f64) -> Result<SelectionResult> {
    check_epsilon(epsilon)?;
    let n = c.len();
    let mut seen = vec![false; n];
    for &j in sites {
        if j >= n || std::mem::replace(&mut seen[j], true) {
            return Err(Error::Argument(format!("site list has a repeated or out-of-range index {j}")));
        }
    }
    if sites.is_empty() {
        return Err(Error::Argument("site list is empty".into()));
    }
    let trace = (1..=sites.len())
        .map(|m| c.fisher(&sites[..m], epsilon).determinant())
        .collect();
    Ok(SelectionResult {
        selected: sites.to_vec(),
        objective_trace: trace,
        epsilon,
        n,
        p: sites.len(),
        r: c.r,
        s: c.s,
        method: SelectionMethod::Explicit,
        evaluations: sites.len() as u64,
    })
}
