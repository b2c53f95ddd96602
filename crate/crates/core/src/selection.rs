//! Preference-pair mining.
//!
//! The preferred response is the MAS argmax. The dispreferred response
//! maximizes
//!
//! ```text
//! S(j) = (mas_w − mas_j) − alpha · max(0, logp_w − logp_j − delta)
//! ```
//!
//! over the remaining candidates, which favours low-MAS responses the base
//! model still generates confidently. Both argmaxes break ties to the lowest
//! index, and candidates token-identical to the preferred one are skipped.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::M3PConfig;
use crate::error::{Error, Result};
use crate::types::{CandidatePool, PreferencePair, ScoreBreakdown, TokenId};

/// The two terms of the mining score and their difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct M3pScore {
    pub mas_gap: f64,
    pub conf_penalty: f64,
    pub score: f64,
}

impl M3pScore {
    pub fn at(self, candidate_index: usize) -> ScoreBreakdown {
        ScoreBreakdown {
            candidate_index,
            mas_gap: self.mas_gap,
            conf_penalty: self.conf_penalty,
            m3p_score: self.score,
        }
    }
}

pub fn m3p_score(mas_w: f64, mas_j: f64, logp_w: f64, logp_j: f64, alpha: f64, delta: f64) -> Result<M3pScore> {
    if [mas_w, mas_j, logp_w, logp_j, alpha, delta].iter().any(|v| v.is_nan()) {
        return Err(Error::NaN("m3p_score"));
    }
    if alpha < 0.0 || delta < 0.0 {
        return Err(Error::invalid("m3p_score", format!("alpha and delta must be ≥ 0, got {alpha}, {delta}")));
    }
    let mas_gap = mas_w - mas_j;
    let conf_penalty = alpha * f64::max(0.0, logp_w - logp_j - delta);
    Ok(M3pScore {
        mas_gap,
        conf_penalty,
        score: mas_gap - conf_penalty,
    })
}

/// Index of the highest-MAS candidate, lowest index on ties.
pub fn select_preferred(pool: &CandidatePool) -> Result<usize> {
    if pool.len() < 2 {
        return Err(Error::PoolTooSmall(pool.len()));
    }
    let mas = pool.mas_values()?;
    let mut best = 0;
    for (i, &m) in mas.iter().enumerate().skip(1) {
        if m > mas[best] {
            best = i;
        }
    }
    Ok(best)
}

/// The hardest informative negative relative to candidate `w_index`.
pub fn select_dispreferred(pool: &CandidatePool, w_index: usize, cfg: &M3PConfig) -> Result<(usize, ScoreBreakdown)> {
    let mas = pool.mas_values()?;
    let cands = pool.candidates();
    let w = cands.get(w_index).ok_or(Error::IndexOutOfRange {
        index: w_index,
        len: cands.len(),
    })?;
    let mut best: Option<ScoreBreakdown> = None;
    for (j, c) in cands.iter().enumerate() {
        if j == w_index || c.tokens() == w.tokens() {
            continue;
        }
        let s = m3p_score(mas[w_index], mas[j], w.log_prob(), c.log_prob(), cfg.alpha, cfg.delta)?.at(j);
        if best.is_none_or(|b| s.m3p_score > b.m3p_score) {
            best = Some(s);
        }
    }
    best.map(|b| (b.candidate_index, b)).ok_or_else(|| Error::DegeneratePool {
        prompt_id: pool.prompt().id().to_string(),
        reason: "every other candidate is token-identical to the preferred response".into(),
    })
}

/// Mines one pair from a pool.
pub fn select_pair(pool: &CandidatePool, cfg: &M3PConfig) -> Result<PreferencePair> {
    let w = select_preferred(pool)?;
    let (l, breakdown) = select_dispreferred(pool, w, cfg)?;
    let cands = pool.candidates();
    PreferencePair::new(pool.prompt().clone(), w, cands[w].clone(), cands[l].clone(), breakdown)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPool {
    pub prompt_id: String,
    pub reason: String,
}

/// Mined pairs in input order, plus the pools that yielded none.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDataset {
    pub fingerprint: String,
    pub pairs: Vec<PreferencePair>,
    pub skipped: Vec<SkippedPool>,
}

fn skip_reason(pool: &CandidatePool) -> Option<String> {
    if pool.len() < 2 {
        return Some(format!("pool has {} candidate(s); at least 2 required", pool.len()));
    }
    if !pool.is_scored() {
        return Some("pool has unscored candidates".into());
    }
    let distinct: HashSet<&[TokenId]> = pool.candidates().iter().map(|c| c.tokens()).collect();
    if distinct.len() < 2 {
        return Some("fewer than 2 distinct candidates after deduplication".into());
    }
    None
}

/// One pair per usable pool. Degenerate pools are reported, not raised.
pub fn build_preference_dataset(pools: &[CandidatePool], cfg: &M3PConfig) -> PreferenceDataset {
    let outcomes: Vec<std::result::Result<PreferencePair, SkippedPool>> = pools
        .par_iter()
        .map(|pool| {
            let skip = |reason: String| SkippedPool {
                prompt_id: pool.prompt().id().to_string(),
                reason,
            };
            if let Some(reason) = skip_reason(pool) {
                return Err(skip(reason));
            }
            select_pair(pool, cfg).map_err(|e| skip(e.to_string()))
        })
        .collect();
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        match o {
            Ok(p) => pairs.push(p),
            Err(s) => skipped.push(s),
        }
    }
    PreferenceDataset {
        fingerprint: cfg.fingerprint(),
        pairs,
        skipped,
    }
}
