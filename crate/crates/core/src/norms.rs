//! Classical cohort normalizations: Z-norm, T-norm, S-norm, AT-norm, and
//! both adaptive S-norm variants, plus a raw passthrough.
//!
//! Each method maps a raw trial score to a normalized one using statistics
//! of the trial embeddings against an impostor cohort. The scalar formulas
//! live here; [`CohortCache`] precomputes per-embedding cohort data once so
//! a trial list costs one bank scan per unique embedding, not per trial.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scoring::{
    self, cosine, floored, pooled_scores, stats_at_indices, stats_of_top_k, CohortStats, Select,
};
use crate::types::{average_enrollment, Embedding, ImpostorBank, Trial, TrialList};

/// Which normalization to apply to raw trial scores.
///
/// The adaptive methods (`Atnorm` onward) require a cohort size `k`; the
/// trainable methods additionally carry learned parameters supplied by the
/// training layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormMethod {
    None,
    Znorm,
    Tnorm,
    Snorm,
    Atnorm,
    Asnorm1,
    Asnorm2,
    LwbTas,
    LieTas,
}

impl NormMethod {
    pub const ALL: [NormMethod; 9] = [
        NormMethod::None,
        NormMethod::Znorm,
        NormMethod::Tnorm,
        NormMethod::Snorm,
        NormMethod::Atnorm,
        NormMethod::Asnorm1,
        NormMethod::Asnorm2,
        NormMethod::LwbTas,
        NormMethod::LieTas,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "raw" => Ok(NormMethod::None),
            "znorm" | "z-norm" => Ok(NormMethod::Znorm),
            "tnorm" | "t-norm" => Ok(NormMethod::Tnorm),
            "snorm" | "s-norm" => Ok(NormMethod::Snorm),
            "atnorm" | "at-norm" => Ok(NormMethod::Atnorm),
            "asnorm1" | "as-norm1" => Ok(NormMethod::Asnorm1),
            "asnorm2" | "as-norm2" => Ok(NormMethod::Asnorm2),
            "lwb_tas" | "lwb-tas" => Ok(NormMethod::LwbTas),
            "lie_tas" | "lie-tas" => Ok(NormMethod::LieTas),
            other => Err(Error::InvalidConfig(format!(
                "unknown normalization method '{other}'"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NormMethod::None => "none",
            NormMethod::Znorm => "znorm",
            NormMethod::Tnorm => "tnorm",
            NormMethod::Snorm => "snorm",
            NormMethod::Atnorm => "atnorm",
            NormMethod::Asnorm1 => "asnorm1",
            NormMethod::Asnorm2 => "asnorm2",
            NormMethod::LwbTas => "lwb_tas",
            NormMethod::LieTas => "lie_tas",
        }
    }

    /// Does the method select a top-`k` cohort (so `k` is required)?
    pub fn needs_k(self) -> bool {
        matches!(
            self,
            NormMethod::Atnorm
                | NormMethod::Asnorm1
                | NormMethod::Asnorm2
                | NormMethod::LwbTas
                | NormMethod::LieTas
        )
    }

    /// Is the method's cohort produced by the training layer?
    pub fn is_trainable(self) -> bool {
        matches!(self, NormMethod::LwbTas | NormMethod::LieTas)
    }
}

impl std::fmt::Display for NormMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Z-norm: center and scale by full-bank statistics of the enrollment side.
pub fn z_norm(raw: f64, e_stats: &CohortStats) -> f64 {
    (raw - e_stats.mean) / floored(e_stats.std)
}

/// T-norm: center and scale by full-bank statistics of the test side.
pub fn t_norm(raw: f64, t_stats: &CohortStats) -> f64 {
    (raw - t_stats.mean) / floored(t_stats.std)
}

/// S-norm: the symmetric average of Z-norm and T-norm.
pub fn s_norm(raw: f64, e_stats: &CohortStats, t_stats: &CohortStats) -> f64 {
    0.5 * ((raw - e_stats.mean) / floored(e_stats.std)
        + (raw - t_stats.mean) / floored(t_stats.std))
}

/// Adaptive S-norm, own-cohort variant: each side is normalized by the
/// statistics of its own top-K cohort scores.
///
/// This exact function is also the inference arithmetic of the trainable
/// variants, so a score file produced by an untrained single-sub-center
/// trainable cohort is bit-identical to this method's.
pub fn as_norm1(raw: f64, e_stats: &CohortStats, t_stats: &CohortStats) -> f64 {
    (raw - e_stats.mean) / (2.0 * floored(e_stats.std))
        + (raw - t_stats.mean) / (2.0 * floored(t_stats.std))
}

/// Adaptive S-norm, crossed-cohort variant: the enrollment side is
/// normalized over the cohort *selected by the test side* and vice versa.
/// Same arithmetic as [`as_norm1`]; the stats provenance differs.
pub fn as_norm2(raw: f64, e_stats_cross: &CohortStats, t_stats_cross: &CohortStats) -> f64 {
    as_norm1(raw, e_stats_cross, t_stats_cross)
}

/// Adaptive T-norm: cohort membership from the top-k *enrollment* scores,
/// statistics taken from the *test* scores over that membership.
pub fn at_norm(raw: f64, e_scores: &[f64], t_scores: &[f64], k: usize) -> Result<f64> {
    let indices = scoring::top_k_indices(e_scores, k)?;
    let stats = stats_at_indices(t_scores, &indices);
    Ok(t_norm(raw, &stats))
}

/// Everything a normalization method can need about one embedding, computed
/// in a single bank scan.
#[derive(Debug, Clone)]
pub struct EmbeddingCohort {
    /// The (possibly enrollment-averaged) embedding itself.
    pub embedding: Embedding,
    /// Pooled cohort scores, one per bank speaker.
    pub scores: Vec<f64>,
    /// Mean/std over the full bank.
    pub full: CohortStats,
    /// Mean/std over the top-k scores, when a k was requested.
    pub top: Option<CohortStats>,
}

/// Per-embedding cohort data for a trial list, keyed by utterance id (test
/// side) or by the comma-joined enrollment key (enrollment side).
///
/// Built once, read concurrently: the fill is a synchronized parallel pass
/// over unique embeddings, after which scoring trials only reads.
pub struct CohortCache {
    entries: HashMap<String, EmbeddingCohort>,
    k: Option<usize>,
}

impl CohortCache {
    /// Scan the bank once per unique embedding referenced by `trials`.
    ///
    /// `lookup` resolves an utterance id to its embedding; multi-utterance
    /// enrollments are averaged component-wise before scoring. `select`
    /// pools sub-center scores (irrelevant for single-sub-center banks).
    pub fn build<'e, F>(
        bank: &ImpostorBank,
        select: Select,
        k: Option<usize>,
        trials: &TrialList,
        lookup: F,
    ) -> Result<Self>
    where
        F: Fn(&str) -> Option<&'e Embedding> + Sync,
    {
        if let Some(k) = k {
            if k == 0 || k > bank.len() {
                return Err(Error::InvalidCohortSize { k, c: bank.len() });
            }
        }
        // Deterministic key order: first appearance in the trial list.
        let mut keys: Vec<(String, Vec<String>)> = Vec::new();
        let mut seen: HashMap<String, ()> = HashMap::new();
        let mut push = |key: String, ids: Vec<String>, keys: &mut Vec<(String, Vec<String>)>| {
            if seen.insert(key.clone(), ()).is_none() {
                keys.push((key, ids));
            }
        };
        for t in trials {
            push(t.enroll_key(), t.enroll_ids.clone(), &mut keys);
            push(t.test_id.clone(), vec![t.test_id.clone()], &mut keys);
        }

        let entries: Result<Vec<(String, EmbeddingCohort)>> = keys
            .into_par_iter()
            .map(|(key, ids)| {
                let embs: Result<Vec<Embedding>> = ids
                    .iter()
                    .map(|id| {
                        lookup(id)
                            .cloned()
                            .ok_or_else(|| Error::UnknownUtterance(id.clone()))
                    })
                    .collect();
                let embs = embs?;
                let embedding = if embs.len() == 1 {
                    embs.into_iter().next().unwrap()
                } else {
                    average_enrollment(&embs)?
                };
                let scores = pooled_scores(&embedding, bank, select)?;
                let (mean, std) = scoring::mean_std(&scores);
                let full = CohortStats {
                    mean,
                    std,
                    selected_indices: Vec::new(),
                };
                let top = match k {
                    Some(k) => Some(stats_of_top_k(&scores, k)?),
                    None => None,
                };
                Ok((
                    key,
                    EmbeddingCohort {
                        embedding,
                        scores,
                        full,
                        top,
                    },
                ))
            })
            .collect();
        Ok(CohortCache {
            entries: entries?.into_iter().collect(),
            k,
        })
    }

    pub fn get(&self, key: &str) -> Result<&EmbeddingCohort> {
        self.entries
            .get(key)
            .ok_or_else(|| Error::UnknownUtterance(key.to_string()))
    }

    pub fn k(&self) -> Option<usize> {
        self.k
    }

    /// Raw cosine between a trial's (averaged) enrollment and test
    /// embeddings, via the cached embeddings.
    pub fn raw_score(&self, trial: &Trial) -> Result<f64> {
        let e = self.get(&trial.enroll_key())?;
        let t = self.get(&trial.test_id)?;
        cosine(&e.embedding, &t.embedding)
    }
}

/// Score one trial with a classical (non-trainable) method using cached
/// cohort data. The trainable methods are dispatched by the training layer.
pub fn score_trial_classic(method: NormMethod, cache: &CohortCache, trial: &Trial) -> Result<f64> {
    let e = cache.get(&trial.enroll_key())?;
    let t = cache.get(&trial.test_id)?;
    let raw = cosine(&e.embedding, &t.embedding)?;
    fn need_top(c: &EmbeddingCohort, method: NormMethod) -> Result<&CohortStats> {
        c.top.as_ref().ok_or_else(|| {
            Error::InvalidConfig(format!("method {} requires a cohort size k", method))
        })
    }
    match method {
        NormMethod::None => Ok(raw),
        NormMethod::Znorm => Ok(z_norm(raw, &e.full)),
        NormMethod::Tnorm => Ok(t_norm(raw, &t.full)),
        NormMethod::Snorm => Ok(s_norm(raw, &e.full, &t.full)),
        NormMethod::Atnorm => {
            let k = cache
                .k
                .ok_or_else(|| Error::InvalidConfig("atnorm requires k".into()))?;
            at_norm(raw, &e.scores, &t.scores, k)
        }
        NormMethod::Asnorm1 => Ok(as_norm1(raw, need_top(e, method)?, need_top(t, method)?)),
        NormMethod::Asnorm2 => {
            let e_cross = stats_at_indices(&e.scores, &need_top(t, method)?.selected_indices);
            let t_cross = stats_at_indices(&t.scores, &need_top(e, method)?.selected_indices);
            Ok(as_norm2(raw, &e_cross, &t_cross))
        }
        NormMethod::LwbTas | NormMethod::LieTas => Err(Error::InvalidConfig(format!(
            "method {} is handled by the training layer",
            method
        ))),
    }
}

/// Score a full trial list with a classical method. Builds the per-embedding
/// cache, then scores trials in parallel.
pub fn score_trials_classic<'e, F>(
    method: NormMethod,
    k: Option<usize>,
    bank: &ImpostorBank,
    trials: &TrialList,
    lookup: F,
) -> Result<Vec<f64>>
where
    F: Fn(&str) -> Option<&'e Embedding> + Sync,
{
    if method.is_trainable() {
        return Err(Error::InvalidConfig(format!(
            "method {} is handled by the training layer",
            method
        )));
    }
    if method.needs_k() && k.is_none() {
        return Err(Error::InvalidConfig(format!(
            "method {} requires a cohort size k",
            method
        )));
    }
    let cache = CohortCache::build(bank, Select::Min, k, trials, lookup)?;
    trials
        .par_iter()
        .map(|t| score_trial_classic(method, &cache, t))
        .collect()
}
