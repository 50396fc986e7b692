//! Similarity scoring and top-K cohort statistics — the computational
//! substrate every normalization method sits on.
//!
//! Batch workloads compute score matrices as
//! `(row-normalized embeddings) x (row-normalized centers)^T`, one
//! normalization pass per side. Summation order within a row is fixed so
//! results do not depend on how callers partition rows across workers.

use crate::error::{Error, Result};
use crate::types::{Embedding, ImpostorBank};

/// Floor applied to every standard deviation that lands in a denominator.
/// Degenerate cohorts (duplicated embeddings) must not produce infinities.
pub const STD_FLOOR: f64 = 1e-12;

/// `max(sigma, STD_FLOOR)` — use whenever sigma divides something.
pub fn floored(sigma: f64) -> f64 {
    sigma.max(STD_FLOOR)
}

/// Scores of one embedding against every bank speaker (length `C`).
#[derive(Debug, Clone)]
pub struct ScoreVector {
    pub values: Vec<f64>,
    /// Identifier of the embedding these scores belong to.
    pub source: String,
}

/// Mean and population standard deviation of a top-K cohort, plus the bank
/// rows that were selected (descending score, ties broken by lowest index).
#[derive(Debug, Clone, PartialEq)]
pub struct CohortStats {
    pub mean: f64,
    pub std: f64,
    pub selected_indices: Vec<usize>,
}

/// Cosine similarity. Errors on zero-norm inputs rather than silently
/// returning 0.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.values().iter().zip(b.values()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Cosine of `x` against every center of a single-sub-center bank.
pub fn score_against_bank(x: &Embedding, bank: &ImpostorBank) -> Result<ScoreVector> {
    if bank.n_sub() != 1 {
        return Err(Error::SubCentersUnsupported { n_sub: bank.n_sub() });
    }
    let values = score_rows(x, bank)?;
    Ok(ScoreVector {
        values,
        source: String::new(),
    })
}

/// Cosine of `x` against every row of the bank's center tensor
/// (`C * n_sub` values), in row order.
pub fn score_rows(x: &Embedding, bank: &ImpostorBank) -> Result<Vec<f64>> {
    if x.dim() != bank.dim() {
        return Err(Error::DimMismatch {
            expected: bank.dim(),
            got: x.dim(),
        });
    }
    let xn = x.normalized()?;
    let dim = bank.dim();
    let rows = bank.len() * bank.n_sub();
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &bank.centers()[r * dim..(r + 1) * dim];
        let mut norm2 = 0.0;
        let mut dot = 0.0;
        for (c, v) in row.iter().zip(xn.values()) {
            norm2 += c * c;
            dot += c * v;
        }
        if norm2 == 0.0 {
            return Err(Error::ZeroNorm);
        }
        out.push(dot / norm2.sqrt());
    }
    Ok(out)
}

/// How to pool the per-sub-center scores of one speaker into a single
/// cohort score. `Min` is the conservative choice (an embedding must be
/// close to *every* facet of a speaker to score high against them).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Select {
    Min,
    Max,
}

impl Select {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "min" => Ok(Select::Min),
            "max" => Ok(Select::Max),
            other => Err(Error::InvalidConfig(format!(
                "unknown sub-center pooling '{other}' (expected min or max)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Select::Min => "min",
            Select::Max => "max",
        }
    }
}

/// Pool a flat `C * n_sub` per-row score slice down to `C` per-speaker
/// scores. With a single sub-center this is the identity.
pub fn pool_rows(row_scores: &[f64], n_sub: usize, select: Select) -> Vec<f64> {
    row_scores
        .chunks(n_sub)
        .map(|group| {
            let mut best = group[0];
            for &v in &group[1..] {
                match select {
                    Select::Min if v < best => best = v,
                    Select::Max if v > best => best = v,
                    _ => {}
                }
            }
            best
        })
        .collect()
}

/// Cosine of `x` against every bank speaker, pooling sub-center scores with
/// `select`. This is the inference-time cohort scoring path for every
/// normalization method — classical banks simply have one sub-center, for
/// which pooling is the identity.
pub fn pooled_scores(x: &Embedding, bank: &ImpostorBank, select: Select) -> Result<Vec<f64>> {
    let rows = score_rows(x, bank)?;
    Ok(pool_rows(&rows, bank.n_sub(), select))
}

/// Indices of the `k` largest scores, sorted by descending score with
/// lowest-index tie-break.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::InvalidCohortSize {
            k,
            c: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(order)
}

/// Mean and population standard deviation (divide by n, not n-1) over the
/// given values. Summation order follows the slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Statistics of the `k` highest scores. Ties break toward the lowest bank
/// index; the selection is recorded for gradient routing and diagnostics.
pub fn top_k_stats(scores: &ScoreVector, k: usize) -> Result<CohortStats> {
    stats_of_top_k(&scores.values, k)
}

pub fn stats_of_top_k(scores: &[f64], k: usize) -> Result<CohortStats> {
    let selected_indices = top_k_indices(scores, k)?;
    let picked: Vec<f64> = selected_indices.iter().map(|&i| scores[i]).collect();
    let (mean, std) = mean_std(&picked);
    Ok(CohortStats {
        mean,
        std,
        selected_indices,
    })
}

/// Statistics of `scores` restricted to externally chosen indices (used by
/// the crossed AS-norm variant and adaptive T-norm).
pub fn stats_at_indices(scores: &[f64], indices: &[usize]) -> CohortStats {
    let picked: Vec<f64> = indices.iter().map(|&i| scores[i]).collect();
    let (mean, std) = mean_std(&picked);
    CohortStats {
        mean,
        std,
        selected_indices: indices.to_vec(),
    }
}

/// Row-normalize a flat `rows x dim` matrix in place. Errors on zero rows.
pub fn normalize_rows(data: &mut [f64], dim: usize) -> Result<()> {
    for row in data.chunks_mut(dim) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::ZeroNorm);
        }
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    Ok(())
}

/// `A x B^T` for row-major `a` (m x d) and `b` (n x d); output m x n.
/// Rows are independent, so callers may partition them across workers
/// without changing any bit of the result.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, d: usize) -> Vec<f64> {
    use rayon::prelude::*;
    let mut out = vec![0.0; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| {
        let arow = &a[i * d..(i + 1) * d];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * d..(j + 1) * d];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *o = acc;
        }
    });
    out
}
