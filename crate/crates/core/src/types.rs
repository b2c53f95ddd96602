//! Domain types shared across the pipeline. Constructors enforce every
//! invariant; deserialization goes through the same constructors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// A conditioning context: image surrogate plus instruction, pre-tokenized.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "PromptRecord")]
pub struct Prompt {
    id: String,
    context_tokens: Vec<TokenId>,
    instruction_text: String,
}

#[derive(Deserialize)]
struct PromptRecord {
    id: String,
    context_tokens: Vec<TokenId>,
    #[serde(default)]
    instruction_text: String,
}

impl TryFrom<PromptRecord> for Prompt {
    type Error = Error;

    fn try_from(r: PromptRecord) -> Result<Self> {
        Prompt::new(r.id, r.context_tokens, r.instruction_text)
    }
}

impl Prompt {
    pub fn new(id: impl Into<String>, context_tokens: Vec<TokenId>, instruction_text: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if context_tokens.is_empty() {
            return Err(Error::invalid("prompt", format!("`{id}` has empty context_tokens")));
        }
        Ok(Self {
            id,
            context_tokens,
            instruction_text: instruction_text.into(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn context_tokens(&self) -> &[TokenId] {
        &self.context_tokens
    }

    pub fn instruction_text(&self) -> &str {
        &self.instruction_text
    }
}

/// One sampled response. `mas` is `None` until the candidate is scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CandidateRecord")]
pub struct Candidate {
    tokens: Vec<TokenId>,
    log_prob: f64,
    mas: Option<f64>,
}

#[derive(Deserialize)]
struct CandidateRecord {
    tokens: Vec<TokenId>,
    log_prob: f64,
    mas: Option<f64>,
}

impl TryFrom<CandidateRecord> for Candidate {
    type Error = Error;

    fn try_from(r: CandidateRecord) -> Result<Self> {
        let c = Candidate::new(r.tokens, r.log_prob)?;
        match r.mas {
            Some(m) => c.with_mas(m),
            None => Ok(c),
        }
    }
}

impl Candidate {
    /// `log_prob` is the natural-log sequence probability; it must be ≤ 0.
    pub fn new(tokens: Vec<TokenId>, log_prob: f64) -> Result<Self> {
        if log_prob.is_nan() || log_prob > 0.0 {
            return Err(Error::invalid("candidate", format!("log_prob must be ≤ 0, got {log_prob}")));
        }
        Ok(Self {
            tokens,
            log_prob,
            mas: None,
        })
    }

    pub fn with_mas(mut self, mas: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mas) {
            return Err(Error::invalid("candidate", format!("mas must be in [0,1], got {mas}")));
        }
        self.mas = Some(mas);
        Ok(self)
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn log_prob(&self) -> f64 {
        self.log_prob
    }

    pub fn mas(&self) -> Option<f64> {
        self.mas
    }
}

/// The sampled responses for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoolRecord")]
pub struct CandidatePool {
    prompt: Prompt,
    candidates: Vec<Candidate>,
    /// Set when duplicates survived the resampling cap.
    degenerate: bool,
}

#[derive(Deserialize)]
struct PoolRecord {
    prompt: Prompt,
    candidates: Vec<Candidate>,
    #[serde(default)]
    degenerate: bool,
}

impl TryFrom<PoolRecord> for CandidatePool {
    type Error = Error;

    fn try_from(r: PoolRecord) -> Result<Self> {
        CandidatePool::new(r.prompt, r.candidates, r.degenerate)
    }
}

impl CandidatePool {
    pub fn new(prompt: Prompt, candidates: Vec<Candidate>, degenerate: bool) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::invalid("pool", format!("`{}` has no candidates", prompt.id())));
        }
        Ok(Self {
            prompt,
            candidates,
            degenerate,
        })
    }

    pub fn prompt(&self) -> &Prompt {
        &self.prompt
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn is_scored(&self) -> bool {
        self.candidates.iter().all(|c| c.mas.is_some())
    }

    /// MAS values in candidate order, or an error if any candidate is unscored.
    pub fn mas_values(&self) -> Result<Vec<f64>> {
        self.candidates
            .iter()
            .map(|c| c.mas.ok_or_else(|| Error::UnscoredPool(self.prompt.id.clone())))
            .collect()
    }

    /// Returns a copy with every candidate's MAS replaced, in order.
    pub fn with_scores(&self, mas: &[f64]) -> Result<Self> {
        if mas.len() != self.candidates.len() {
            return Err(Error::invalid(
                "pool",
                format!("{} scores for {} candidates", mas.len(), self.candidates.len()),
            ));
        }
        let candidates = self
            .candidates
            .iter()
            .zip(mas)
            .map(|(c, &m)| c.clone().with_mas(m))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            candidates,
            ..self.clone()
        })
    }
}

/// Exact decomposition of the mining score for one candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub candidate_index: usize,
    pub mas_gap: f64,
    pub conf_penalty: f64,
    pub m3p_score: f64,
}

/// A mined preference pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PairRecord")]
pub struct PreferencePair {
    prompt: Prompt,
    preferred_index: usize,
    preferred: Candidate,
    dispreferred: Candidate,
    breakdown: ScoreBreakdown,
}

#[derive(Deserialize)]
struct PairRecord {
    prompt: Prompt,
    preferred_index: usize,
    preferred: Candidate,
    dispreferred: Candidate,
    breakdown: ScoreBreakdown,
}

impl TryFrom<PairRecord> for PreferencePair {
    type Error = Error;

    fn try_from(r: PairRecord) -> Result<Self> {
        PreferencePair::new(r.prompt, r.preferred_index, r.preferred, r.dispreferred, r.breakdown)
    }
}

impl PreferencePair {
    pub(crate) fn new(
        prompt: Prompt,
        preferred_index: usize,
        preferred: Candidate,
        dispreferred: Candidate,
        breakdown: ScoreBreakdown,
    ) -> Result<Self> {
        let (Some(mw), Some(ml)) = (preferred.mas, dispreferred.mas) else {
            return Err(Error::invalid("preference pair", "both responses must be scored"));
        };
        if mw < ml {
            return Err(Error::invalid("preference pair", format!("preferred mas {mw} < dispreferred mas {ml}")));
        }
        if preferred.tokens == dispreferred.tokens {
            return Err(Error::invalid("preference pair", "preferred and dispreferred tokens are identical"));
        }
        let ScoreBreakdown {
            mas_gap,
            conf_penalty,
            m3p_score,
            ..
        } = breakdown;
        if m3p_score != mas_gap - conf_penalty || conf_penalty.is_nan() || conf_penalty < 0.0 {
            return Err(Error::invalid("preference pair", "score breakdown is inconsistent"));
        }
        Ok(Self {
            prompt,
            preferred_index,
            preferred,
            dispreferred,
            breakdown,
        })
    }

    /// Replaces the dispreferred side without re-checking invariants.
    #[cfg(test)]
    pub(crate) fn force_dispreferred(mut self, c: Candidate) -> Self {
        self.dispreferred = c;
        self
    }

    pub fn prompt(&self) -> &Prompt {
        &self.prompt
    }

    pub fn preferred(&self) -> &Candidate {
        &self.preferred
    }

    pub fn dispreferred(&self) -> &Candidate {
        &self.dispreferred
    }

    pub fn preferred_index(&self) -> usize {
        self.preferred_index
    }

    pub fn dispreferred_index(&self) -> usize {
        self.breakdown.candidate_index
    }

    pub fn breakdown(&self) -> &ScoreBreakdown {
        &self.breakdown
    }

    pub fn m3p_score(&self) -> f64 {
        self.breakdown.m3p_score
    }

    pub fn mas_gap(&self) -> f64 {
        self.breakdown.mas_gap
    }

    pub fn conf_penalty(&self) -> f64 {
        self.breakdown.conf_penalty
    }
}
