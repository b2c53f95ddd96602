//! MAS (multimodal alignment score) providers: a synthetic token-F1 oracle,
//! and ingestion of externally computed scores.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{CandidatePool, Prompt, TokenId};

/// Weight on the best distractor F1 subtracted by the oracle.
pub const DISTRACTOR_PENALTY: f64 = 0.3;

/// Ground truth for scoring one prompt's candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TaskRecord")]
pub struct ScoringTask {
    prompt: Prompt,
    reference_answer: Vec<TokenId>,
    distractor_answers: Vec<Vec<TokenId>>,
}

#[derive(Deserialize)]
struct TaskRecord {
    prompt: Prompt,
    reference_answer: Vec<TokenId>,
    #[serde(default)]
    distractor_answers: Vec<Vec<TokenId>>,
}

impl TryFrom<TaskRecord> for ScoringTask {
    type Error = Error;

    fn try_from(r: TaskRecord) -> Result<Self> {
        ScoringTask::new(r.prompt, r.reference_answer, r.distractor_answers)
    }
}

impl ScoringTask {
    pub fn new(prompt: Prompt, reference_answer: Vec<TokenId>, distractor_answers: Vec<Vec<TokenId>>) -> Result<Self> {
        if reference_answer.is_empty() {
            return Err(Error::invalid("scoring task", format!("`{}` has an empty reference answer", prompt.id())));
        }
        Ok(Self {
            prompt,
            reference_answer,
            distractor_answers,
        })
    }

    pub fn prompt(&self) -> &Prompt {
        &self.prompt
    }

    pub fn reference_answer(&self) -> &[TokenId] {
        &self.reference_answer
    }

    pub fn distractor_answers(&self) -> &[Vec<TokenId>] {
        &self.distractor_answers
    }
}

/// Multiset token F1: `2·overlap / (|candidate| + |reference|)`.
pub fn token_f1(candidate: &[TokenId], reference: &[TokenId]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<TokenId, usize> = HashMap::new();
    for &t in reference {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in candidate {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    2.0 * overlap as f64 / (candidate.len() + reference.len()) as f64
}

/// F1 against the reference minus `0.3 ×` the best F1 against any
/// distractor, clamped to `[0, 1]`. An empty candidate scores 0.
pub fn mas_oracle(candidate_tokens: &[TokenId], task: &ScoringTask) -> f64 {
    if candidate_tokens.is_empty() {
        return 0.0;
    }
    let f1 = token_f1(candidate_tokens, &task.reference_answer);
    let worst = task
        .distractor_answers
        .iter()
        .map(|d| token_f1(candidate_tokens, d))
        .fold(0.0, f64::max);
    (f1 - DISTRACTOR_PENALTY * worst).clamp(0.0, 1.0)
}

/// Fills every candidate's MAS from the oracle. Tokens, order and log-probs
/// are preserved.
pub fn score_pool(pool: &CandidatePool, task: &ScoringTask) -> CandidatePool {
    let mas: Vec<f64> = pool.candidates().iter().map(|c| mas_oracle(c.tokens(), task)).collect();
    pool.with_scores(&mas).expect("oracle scores are in [0,1] and match the pool length")
}

/// One line of an external score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalScoreRecord {
    pub prompt_id: String,
    pub candidate_index: usize,
    pub mas: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScoreFileError {
    #[error("score file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("score file line {line}: duplicate record for prompt `{prompt_id}` candidate {candidate_index}")]
    Duplicate {
        line: usize,
        prompt_id: String,
        candidate_index: usize,
    },
    #[error("score file line {line}: mas {mas} for prompt `{prompt_id}` candidate {candidate_index} is outside [0,1]")]
    MasOutOfRange {
        line: usize,
        prompt_id: String,
        candidate_index: usize,
        mas: f64,
    },
    #[error("score for unknown prompt `{0}`")]
    UnknownPrompt(String),
    #[error("candidate index {candidate_index} out of range for prompt `{prompt_id}` (pool size {len})")]
    IndexOutOfRange {
        prompt_id: String,
        candidate_index: usize,
        len: usize,
    },
    #[error("missing score for prompt `{prompt_id}` candidate {candidate_index}")]
    Missing { prompt_id: String, candidate_index: usize },
}

/// Parses line-delimited score records. `#` lines and blank lines are skipped.
pub fn parse_score_records(text: &str) -> std::result::Result<Vec<ExternalScoreRecord>, ScoreFileError> {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let rec: ExternalScoreRecord = serde_json::from_str(trimmed).map_err(|e| ScoreFileError::Parse {
            line,
            message: e.to_string(),
        })?;
        if !(0.0..=1.0).contains(&rec.mas) {
            return Err(ScoreFileError::MasOutOfRange {
                line,
                prompt_id: rec.prompt_id,
                candidate_index: rec.candidate_index,
                mas: rec.mas,
            });
        }
        if !seen.insert((rec.prompt_id.clone(), rec.candidate_index)) {
            return Err(ScoreFileError::Duplicate {
                line,
                prompt_id: rec.prompt_id,
                candidate_index: rec.candidate_index,
            });
        }
        records.push(rec);
    }
    Ok(records)
}

/// Overwrites MAS values from `records`. Every candidate of every pool must
/// be covered; nothing is applied unless the mapping is complete.
pub fn apply_external_scores(
    pools: &[CandidatePool],
    records: &[ExternalScoreRecord],
) -> std::result::Result<Vec<CandidatePool>, ScoreFileError> {
    let index: HashMap<&str, usize> = pools.iter().enumerate().map(|(i, p)| (p.prompt().id(), i)).collect();
    let mut table: Vec<Vec<Option<f64>>> = pools.iter().map(|p| vec![None; p.len()]).collect();
    for rec in records {
        let &pi = index
            .get(rec.prompt_id.as_str())
            .ok_or_else(|| ScoreFileError::UnknownPrompt(rec.prompt_id.clone()))?;
        let slot = table[pi].get_mut(rec.candidate_index).ok_or_else(|| ScoreFileError::IndexOutOfRange {
            prompt_id: rec.prompt_id.clone(),
            candidate_index: rec.candidate_index,
            len: pools[pi].len(),
        })?;
        *slot = Some(rec.mas);
    }
    pools
        .iter()
        .zip(table)
        .map(|(pool, scores)| {
            let mas = scores
                .into_iter()
                .enumerate()
                .map(|(j, s)| {
                    s.ok_or_else(|| ScoreFileError::Missing {
                        prompt_id: pool.prompt().id().to_string(),
                        candidate_index: j,
                    })
                })
                .collect::<std::result::Result<Vec<f64>, _>>()?;
            Ok(pool.with_scores(&mas).expect("validated scores"))
        })
        .collect()
}

/// Reads a score file and applies it to `pools`.
pub fn ingest_external_scores(pools: &[CandidatePool], score_file: &Path) -> Result<Vec<CandidatePool>> {
    let text = std::fs::read_to_string(score_file).map_err(|e| Error::io(score_file, e))?;
    let records = parse_score_records(&text)?;
    Ok(apply_external_scores(pools, &records)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Candidate;
    use proptest::prelude::*;

    fn task(reference: &[TokenId], distractors: &[&[TokenId]]) -> ScoringTask {
        ScoringTask::new(
            Prompt::new("p", vec![1], "").unwrap(),
            reference.to_vec(),
            distractors.iter().map(|d| d.to_vec()).collect(),
        )
        .unwrap()
    }

    fn pool(id: &str, seqs: &[&[TokenId]]) -> CandidatePool {
        let cands = seqs.iter().map(|s| Candidate::new(s.to_vec(), -1.0).unwrap()).collect();
        CandidatePool::new(Prompt::new(id, vec![1], "").unwrap(), cands, false).unwrap()
    }

    #[test]
    fn oracle_examples() {
        let t = task(&[5, 6, 7], &[&[20, 21]]);
        assert_eq!(mas_oracle(&[5, 6, 7], &t), 1.0);
        assert_eq!(mas_oracle(&[30, 31], &t), 0.0);
        assert_eq!(mas_oracle(&[], &t), 0.0);
        // a=1, b=2, c=3: candidate {a,b}, reference {b,c}
        assert_eq!(mas_oracle(&[1, 2], &task(&[2, 3], &[])), 0.5);
    }

    #[test]
    fn f1_counts_multiplicity() {
        assert_eq!(token_f1(&[1, 1, 2], &[1, 2, 2]), 2.0 * 2.0 / 6.0);
        assert_eq!(token_f1(&[1, 1], &[1]), 2.0 / 3.0);
    }

    #[test]
    fn distractor_penalty_applies() {
        let t = task(&[1, 2, 3, 4], &[&[1, 2, 9, 9]]);
        // F1 vs reference = 0.5; vs distractor = 1.0 → 0.5 - 0.3
        let got = mas_oracle(&[1, 2, 9, 9], &t);
        assert!((got - 0.2).abs() < 1e-15);
    }

    #[test]
    fn empty_reference_rejected() {
        assert!(ScoringTask::new(Prompt::new("p", vec![1], "").unwrap(), vec![], vec![]).is_err());
    }

    #[test]
    fn score_pool_examples() {
        let t = task(&[1, 2, 3], &[]);
        let p = pool("p", &[&[1, 9], &[1, 2, 3], &[7]]);
        let scored = score_pool(&p, &t);
        let mas = scored.mas_values().unwrap();
        assert_eq!(mas.len(), 3);
        assert!(mas.iter().all(|m| (0.0..=1.0).contains(m)));
        let best = mas.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(mas[1], best);
        assert_eq!(score_pool(&scored, &t), scored);
        for (a, b) in p.candidates().iter().zip(scored.candidates()) {
            assert_eq!(a.tokens(), b.tokens());
            assert_eq!(a.log_prob().to_bits(), b.log_prob().to_bits());
        }
    }

    fn full_file(pools: &[CandidatePool]) -> String {
        let mut s = String::from("# external evaluator output\n");
        for p in pools {
            for j in 0..p.len() {
                s.push_str(&format!(
                    "{{\"prompt_id\":\"{}\",\"candidate_index\":{},\"mas\":{}}}\n",
                    p.prompt().id(),
                    j,
                    j as f64 / 10.0
                ));
            }
        }
        s
    }

    #[test]
    fn complete_external_file_applies_all() {
        let pools = vec![pool("a", &[&[1], &[2], &[3], &[4]]), pool("b", &[&[1], &[2], &[3], &[4]])];
        let recs = parse_score_records(&full_file(&pools)).unwrap();
        assert_eq!(recs.len(), 8);
        let scored = apply_external_scores(&pools, &recs).unwrap();
        for p in &scored {
            assert_eq!(p.mas_values().unwrap(), vec![0.0, 0.1, 0.2, 0.3]);
        }
    }

    #[test]
    fn missing_record_names_the_gap() {
        let pools = vec![pool("a", &[&[1], &[2]]), pool("b", &[&[1], &[2]])];
        let text: String = full_file(&pools)
            .lines()
            .filter(|l| !l.contains("\"b\",\"candidate_index\":1"))
            .map(|l| format!("{l}\n"))
            .collect();
        let recs = parse_score_records(&text).unwrap();
        let err = apply_external_scores(&pools, &recs).unwrap_err();
        assert_eq!(
            err,
            ScoreFileError::Missing {
                prompt_id: "b".into(),
                candidate_index: 1
            }
        );
        assert!(err.to_string().contains("`b` candidate 1"));
    }

    #[test]
    fn bad_records_rejected() {
        let pools = vec![pool("a", &[&[1], &[2]])];
        let out_of_range = r#"{"prompt_id":"a","candidate_index":0,"mas":1.2}"#;
        assert!(matches!(parse_score_records(out_of_range), Err(ScoreFileError::MasOutOfRange { .. })));
        let dup = "{\"prompt_id\":\"a\",\"candidate_index\":0,\"mas\":0.2}\n{\"prompt_id\":\"a\",\"candidate_index\":0,\"mas\":0.3}";
        assert!(matches!(parse_score_records(dup), Err(ScoreFileError::Duplicate { line: 2, .. })));
        let unknown = parse_score_records(r#"{"prompt_id":"zz","candidate_index":0,"mas":0.2}"#).unwrap();
        assert!(matches!(apply_external_scores(&pools, &unknown), Err(ScoreFileError::UnknownPrompt(_))));
        let idx = parse_score_records(r#"{"prompt_id":"a","candidate_index":5,"mas":0.2}"#).unwrap();
        assert!(matches!(apply_external_scores(&pools, &idx), Err(ScoreFileError::IndexOutOfRange { .. })));
        assert!(matches!(parse_score_records("{not json"), Err(ScoreFileError::Parse { line: 1, .. })));
    }

    proptest! {
        #[test]
        fn oracle_output_in_unit_interval(
            cand in proptest::collection::vec(0u32..12, 0..10),
            reference in proptest::collection::vec(0u32..12, 1..10),
            distractors in proptest::collection::vec(proptest::collection::vec(0u32..12, 0..10), 0..4),
        ) {
            let t = ScoringTask::new(Prompt::new("p", vec![1], "").unwrap(), reference, distractors).unwrap();
            let m = mas_oracle(&cand, &t);
            prop_assert!((0.0..=1.0).contains(&m));
            prop_assert_eq!(m.to_bits(), mas_oracle(&cand, &t).to_bits());
        }
    }
}
