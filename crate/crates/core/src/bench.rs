//! Seeded synthetic experiments: confidence-term ablation and α/δ sweeps.
//!
//! A [`SyntheticWorld`] is a set of scoring tasks plus a base policy
//! pretrained on them. Every task has a reference answer of "correct"
//! tokens and distractor answers that keep part of the reference and swap
//! the rest for "plausible" tokens. The base policy also learns to emit a
//! fixed share of noise answers. The `bias` knob sets how much distractor
//! mass the base policy absorbs during pretraining, so with `bias > 0` the
//! base model is confidently wrong on a share of its samples.
//!
//! Within one seed, every configuration sees the same candidate pools and
//! the same scores; only pair selection differs.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{parse_kv, parse_value, DpoConfig, M3PConfig, M3PParams, RunParams, SamplingConfig};
use crate::dpo::{evaluate_preference_accuracy, train, FingerprintCheck};
use crate::error::{Error, Result};
use crate::policy::{generate_candidates, AdapterPair, BaseWeights, ModelShape, ReferencePolicy, ToyPolicy};
use crate::rng::SeededRng;
use crate::scoring::{mas_oracle, score_pool, ScoringTask};
use crate::selection::{build_preference_dataset, m3p_score, PreferenceDataset};
use crate::types::{Candidate, CandidatePool, PreferencePair, Prompt, TokenId};

pub const MIN_SEEDS: usize = 5;
/// Half of these are held out, leaving 200 tasks for pair mining.
pub const DEFAULT_TASKS: usize = 400;
/// Each of the two distractors gets twice the reference's pretraining
/// mass, so distractors dominate the base policy's samples.
pub const DEFAULT_BIAS: f64 = 4.0;

/// Construction parameters for synthetic worlds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldRecipe {
    pub prompt_symbols: usize,
    pub prompt_len: usize,
    pub answer_len: usize,
    pub correct_tokens: usize,
    /// Plausible-but-wrong tokens, shared by the distractors of all tasks.
    pub plausible_tokens: usize,
    pub noise_tokens: usize,
    pub n_distractors: usize,
    /// Reference tokens each distractor keeps; the rest are plausible
    /// but wrong.
    pub distractor_shared: usize,
    /// When set, the last prompt symbol is a topic and all tasks of a
    /// topic share their reference and distractors.
    pub shared_topics: bool,
    /// Pretraining weight of noise answers, per task, spread over
    /// `noise_answers` random sequences so no single one is likely.
    pub noise_weight: f64,
    pub noise_answers: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub adapter_rank: usize,
    pub adapter_scale: f64,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    /// Share of tasks held out from pair mining for evaluation.
    pub heldout_fraction: f64,
}

impl Default for WorldRecipe {
    fn default() -> Self {
        Self {
            prompt_symbols: 16,
            prompt_len: 3,
            answer_len: 4,
            correct_tokens: 16,
            plausible_tokens: 4,
            noise_tokens: 16,
            n_distractors: 2,
            distractor_shared: 2,
            shared_topics: true,
            noise_weight: 0.5,
            noise_answers: 4,
            embed_dim: 8,
            hidden_dim: 32,
            adapter_rank: 4,
            adapter_scale: 1.0,
            pretrain_epochs: 300,
            pretrain_lr: 0.05,
            heldout_fraction: 0.5,
        }
    }
}

/// Token classes of a world's vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenClass {
    End,
    Prompt,
    Correct,
    Plausible,
    Noise,
}

impl WorldRecipe {
    fn class_range(&self, class: TokenClass) -> std::ops::Range<usize> {
        let c = 1 + self.prompt_symbols;
        let p = c + self.correct_tokens;
        let n = p + self.plausible_tokens;
        match class {
            TokenClass::End => 0..1,
            TokenClass::Prompt => 1..c,
            TokenClass::Correct => c..p,
            TokenClass::Plausible => p..n,
            TokenClass::Noise => n..n + self.noise_tokens,
        }
    }

    pub fn vocab_size(&self) -> usize {
        1 + self.prompt_symbols + self.correct_tokens + self.plausible_tokens + self.noise_tokens
    }

    /// Class of `token`; tokens past the vocabulary count as noise.
    pub fn token_class(&self, token: TokenId) -> TokenClass {
        let t = token as usize;
        [TokenClass::End, TokenClass::Prompt, TokenClass::Correct, TokenClass::Plausible]
            .into_iter()
            .find(|&c| self.class_range(c).contains(&t))
            .unwrap_or(TokenClass::Noise)
    }

    pub fn class_tokens(&self, class: TokenClass) -> Vec<TokenId> {
        self.class_range(class).map(|t| t as TokenId).collect()
    }

    fn shape(&self) -> ModelShape {
        ModelShape {
            vocab_size: self.vocab_size(),
            context_window: self.prompt_len + self.answer_len,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |r: &str| Err(Error::invalid("world recipe", r.to_string()));
        let smallest = self.correct_tokens.min(self.noise_tokens);
        if self.answer_len < 2 || smallest < self.answer_len {
            return bad("answer_len must be ≥ 2 and fit in the correct and noise classes");
        }
        if self.distractor_shared >= self.answer_len {
            return bad("distractor_shared must be < answer_len");
        }
        if self.plausible_tokens < self.answer_len - self.distractor_shared {
            return bad("too few plausible tokens for the distractor length");
        }
        if !(self.noise_weight >= 0.0 && self.noise_weight.is_finite()) {
            return bad("noise_weight must be finite and ≥ 0");
        }
        if self.prompt_len == 0 || self.prompt_symbols < 2 || self.n_distractors == 0 {
            return bad("need prompt_len ≥ 1, prompt_symbols ≥ 2, n_distractors ≥ 1");
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return bad("heldout_fraction must be in [0,1)");
        }
        self.shape().validate()
    }

    fn max_tasks(&self) -> usize {
        self.prompt_symbols.saturating_pow(self.prompt_len as u32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub bias: f64,
    pub recipe: WorldRecipe,
    tasks: Vec<ScoringTask>,
    n_train: usize,
    base: ToyPolicy,
}

impl SyntheticWorld {
    pub fn tasks(&self) -> &[ScoringTask] {
        &self.tasks
    }

    /// Tasks used for pair mining and training.
    pub fn train_tasks(&self) -> &[ScoringTask] {
        &self.tasks[..self.n_train]
    }

    /// Tasks reserved for evaluation.
    pub fn heldout_tasks(&self) -> &[ScoringTask] {
        &self.tasks[self.n_train..]
    }

    pub fn base_policy(&self) -> &ToyPolicy {
        &self.base
    }

    /// Sampling settings matching the world's fixed answer length.
    pub fn sampling(&self, template: &SamplingConfig) -> SamplingConfig {
        let mut p = template.params();
        p.max_tokens = self.recipe.answer_len as i64;
        p.validate().expect("answer_len is positive")
    }

    /// (reference, distractor) pairs on held-out tasks, with log-probs
    /// under the base policy and oracle MAS values.
    pub fn gold_heldout_pairs(&self) -> Result<Vec<PreferencePair>> {
        let mut pairs = Vec::new();
        for task in self.heldout_tasks() {
            let ctx = task.prompt().context_tokens();
            let candidate = |tokens: &[TokenId]| -> Result<Candidate> {
                let lp = self.base.sequence_log_prob(ctx, tokens)?;
                Candidate::new(tokens.to_vec(), lp)?.with_mas(mas_oracle(tokens, task))
            };
            let w = candidate(task.reference_answer())?;
            for d in task.distractor_answers() {
                let l = candidate(d)?;
                let defaults = M3PParams::default();
                let b = m3p_score(
                    w.mas().unwrap_or(0.0),
                    l.mas().unwrap_or(0.0),
                    w.log_prob(),
                    l.log_prob(),
                    defaults.alpha,
                    defaults.delta,
                )?
                .at(1);
                pairs.push(PreferencePair::new(task.prompt().clone(), 0, w.clone(), l, b)?);
            }
        }
        Ok(pairs)
    }
}

fn pick_distinct(pool: &[TokenId], k: usize, rng: &mut SeededRng) -> Vec<TokenId> {
    let mut p = pool.to_vec();
    rng.shuffle(&mut p);
    p.truncate(k);
    p
}


fn make_distractor(reference: &[TokenId], plausible: &[TokenId], shared: usize, rng: &mut SeededRng) -> Vec<TokenId> {
    let mut a = pick_distinct(reference, shared, rng);
    a.extend(pick_distinct(plausible, reference.len() - shared, rng));
    rng.shuffle(&mut a);
    a
}

/// Builds a deterministic world with the default recipe.
pub fn make_world(seed: u64, n_tasks: usize, bias: f64) -> Result<SyntheticWorld> {
    make_world_with(WorldRecipe::default(), seed, n_tasks, bias)
}

pub fn make_world_with(recipe: WorldRecipe, seed: u64, n_tasks: usize, bias: f64) -> Result<SyntheticWorld> {
    recipe.validate()?;
    if n_tasks == 0 {
        return Err(Error::invalid("world", "n_tasks must be ≥ 1"));
    }
    if n_tasks > recipe.max_tasks() {
        return Err(Error::invalid("world", format!("at most {} distinct prompts", recipe.max_tasks())));
    }
    if !(bias >= 0.0 && bias.is_finite()) {
        return Err(Error::invalid("world", format!("bias must be ≥ 0, got {bias}")));
    }
    let mut rng = SeededRng::child(seed, 0);
    let correct = recipe.class_tokens(TokenClass::Correct);
    let plausible = recipe.class_tokens(TokenClass::Plausible);
    let noise = recipe.class_tokens(TokenClass::Noise);

    let topics: Vec<(Vec<TokenId>, Vec<Vec<TokenId>>)> = (0..recipe.prompt_symbols)
        .map(|_| {
            let reference = pick_distinct(&correct, recipe.answer_len, &mut rng);
            let distractors = (0..recipe.n_distractors)
                .map(|_| make_distractor(&reference, &plausible, recipe.distractor_shared, &mut rng))
                .collect();
            (reference, distractors)
        })
        .collect();
    let mut seen = std::collections::HashSet::new();
    let mut tasks = Vec::with_capacity(n_tasks);
    while tasks.len() < n_tasks {
        let ctx: Vec<TokenId> = (0..recipe.prompt_len)
            .map(|_| 1 + rng.below(recipe.prompt_symbols) as TokenId)
            .collect();
        if !seen.insert(ctx.clone()) {
            continue;
        }
        let ctx_last = ctx[ctx.len() - 1];
        let id = format!("task-{:04}", tasks.len());
        let prompt = Prompt::new(id.clone(), ctx, format!("synthetic instruction {id}"))?;
        let (reference, distractors) = if recipe.shared_topics {
            topics[ctx_last as usize - 1].clone()
        } else {
            let reference = pick_distinct(&correct, recipe.answer_len, &mut rng);
            let distractors = (0..recipe.n_distractors)
                .map(|_| make_distractor(&reference, &plausible, recipe.distractor_shared, &mut rng))
                .collect();
            (reference, distractors)
        };
        tasks.push(ScoringTask::new(prompt, reference, distractors)?);
    }
    let mut noise_rng = SeededRng::child(seed, 2);
    let noise_answers: Vec<Vec<Vec<TokenId>>> = (0..n_tasks)
        .map(|_| {
            (0..recipe.noise_answers)
                .map(|_| pick_distinct(&noise, recipe.answer_len, &mut noise_rng))
                .collect()
        })
        .collect();

    let shape = recipe.shape();
    let mut init_rng = SeededRng::child(seed, 1);
    let base = BaseWeights::random(&shape, &mut init_rng);
    let adapter = AdapterPair::new(&shape, recipe.adapter_rank, recipe.adapter_scale, &mut init_rng)?;
    let mut policy = ToyPolicy::new(shape, base, adapter, None)?;
    pretrain(&mut policy, &tasks, &noise_answers, bias, &recipe)?;

    let n_heldout = ((n_tasks as f64) * recipe.heldout_fraction).round() as usize;
    Ok(SyntheticWorld {
        seed,
        bias,
        recipe,
        n_train: n_tasks - n_heldout.min(n_tasks - 1),
        tasks,
        base: policy,
    })
}

/// Weighted maximum likelihood on references (weight 1), distractors
/// (total weight `bias` per task) and noise, full-batch Adam on the base
/// weights.
fn pretrain(
    policy: &mut ToyPolicy,
    tasks: &[ScoringTask],
    noise: &[Vec<Vec<TokenId>>],
    bias: f64,
    recipe: &WorldRecipe,
) -> Result<()> {
    let mut data: Vec<(&[TokenId], &[TokenId], f64)> = Vec::new();
    for (t, junk) in tasks.iter().zip(noise) {
        data.push((t.prompt().context_tokens(), t.reference_answer(), 1.0));
        if recipe.noise_weight > 0.0 {
            let w = recipe.noise_weight / junk.len() as f64;
            for j in junk {
                data.push((t.prompt().context_tokens(), j, w));
            }
        }
        if bias > 0.0 {
            let w = bias / t.distractor_answers().len() as f64;
            for d in t.distractor_answers() {
                data.push((t.prompt().context_tokens(), d, w));
            }
        }
    }
    let total_weight: f64 = data.iter().map(|d| d.2).sum();
    let n = policy.base().len();
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    for epoch in 1..=recipe.pretrain_epochs {
        let grads = data
            .par_iter()
            .map(|(ctx, seq, w)| policy.log_prob_base_grad(ctx, seq).map(|(_, g)| (g.flatten(), *w)))
            .collect::<Result<Vec<_>>>()?;
        let mut grad = vec![0.0; n];
        for (g, w) in &grads {
            // Minimizing −Σ w·logp.
            grad.iter_mut().zip(g).for_each(|(a, b)| *a -= w * b / total_weight);
        }
        let mut theta = policy.base().flatten();
        let c1 = 1.0 - f64::powi(b1, epoch as i32);
        let c2 = 1.0 - f64::powi(b2, epoch as i32);
        for i in 0..n {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            theta[i] -= recipe.pretrain_lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
        policy.base_mut().assign(&theta);
    }
    Ok(())
}

/// Per-seed outcome of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub alpha: f64,
    pub delta: f64,
    /// Held-out preference accuracy after training.
    pub accuracy: f64,
    /// Mean base log-prob of the selected dispreferred responses.
    pub rl_mean_log_prob: f64,
    pub n_pairs: usize,
    pub n_skipped: usize,
    pub train_final_margin: f64,
    pub pool_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub alpha: f64,
    pub delta: f64,
    pub beta: f64,
    pub n_candidates: usize,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedOutcome>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_rl_log_prob: f64,
    pub std_rl_log_prob: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl ExperimentResult {
    fn from_outcomes(cfg: &M3PConfig, dpo: &DpoConfig, per_seed: Vec<SeedOutcome>) -> Self {
        let acc: Vec<f64> = per_seed.iter().map(|o| o.accuracy).collect();
        let rl: Vec<f64> = per_seed.iter().map(|o| o.rl_mean_log_prob).collect();
        let (mean_accuracy, std_accuracy) = mean_std(&acc);
        let (mean_rl_log_prob, std_rl_log_prob) = mean_std(&rl);
        Self {
            alpha: cfg.alpha,
            delta: cfg.delta,
            beta: dpo.beta,
            n_candidates: cfg.n(),
            seeds: per_seed.iter().map(|o| o.seed).collect(),
            per_seed,
            mean_accuracy,
            std_accuracy,
            mean_rl_log_prob,
            std_rl_log_prob,
        }
    }
}

/// Generates and scores the pools for every training task of `world`.
pub fn world_pools(world: &SyntheticWorld, n: usize, sampling: &SamplingConfig, seed: u64) -> Result<Vec<CandidatePool>> {
    let sampling = world.sampling(sampling);
    world
        .train_tasks()
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let mut rng = SeededRng::child(seed, i as u64);
            let pool = generate_candidates(&world.base, task.prompt(), n, &sampling, &mut rng)?;
            Ok(score_pool(&pool, task))
        })
        .collect()
}

/// Content hash of a set of pools (tokens, log-probs and MAS bits).
pub fn pool_hash(pools: &[CandidatePool]) -> String {
    let mut h = Sha256::new();
    for p in pools {
        h.update(p.prompt().id().as_bytes());
        for c in p.candidates() {
            for t in c.tokens() {
                h.update(t.to_le_bytes());
            }
            h.update(c.log_prob().to_bits().to_le_bytes());
            h.update(c.mas().map_or(u64::MAX, f64::to_bits).to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..16])
}

/// Runs the whole pipeline for one seed under each configuration, on
/// shared pools.
fn run_seed(
    world: &SyntheticWorld,
    seed: u64,
    cfgs: &[M3PConfig],
    dpo: &DpoConfig,
    sampling: &SamplingConfig,
    eval_pairs: &[PreferencePair],
) -> Result<Vec<SeedOutcome>> {
    let n = cfgs[0].n();
    let pools = world_pools(world, n, sampling, seed)?;
    let hash = pool_hash(&pools);
    let mut dpo_params = dpo.params();
    dpo_params.seed = seed;
    let dpo = dpo_params.validate()?;
    let reference = ReferencePolicy::snapshot(&world.base);
    cfgs.par_iter()
        .map(|cfg| {
            let ds: PreferenceDataset = build_preference_dataset(&pools, cfg);
            if ds.pairs.is_empty() {
                return Err(Error::DegenerateWorld(format!(
                    "seed {seed}: no valid pools ({} skipped, first reason: {})",
                    ds.skipped.len(),
                    ds.skipped.first().map_or("none", |s| s.reason.as_str())
                )));
            }
            let rl: Vec<f64> = ds.pairs.iter().map(|p| p.dispreferred().log_prob()).collect();
            let (trained, report) = train(&ds, &world.base, &dpo, FingerprintCheck::Override)?;
            Ok(SeedOutcome {
                seed,
                alpha: cfg.alpha,
                delta: cfg.delta,
                accuracy: evaluate_preference_accuracy(eval_pairs, &trained, &reference)?,
                rl_mean_log_prob: mean_std(&rl).0,
                n_pairs: ds.pairs.len(),
                n_skipped: ds.skipped.len(),
                train_final_margin: report.final_mean_margin,
                pool_hash: hash.clone(),
            })
        })
        .collect()
}

/// Runs every configuration over every seed; results are indexed
/// `[config][seed]`.
pub fn run_configs(
    world: &SyntheticWorld,
    cfgs: &[M3PConfig],
    dpo: &DpoConfig,
    sampling: &SamplingConfig,
    seeds: &[u64],
) -> Result<Vec<ExperimentResult>> {
    if cfgs.is_empty() {
        return Err(Error::Experiment("no configurations to run".into()));
    }
    if cfgs.iter().any(|c| c.n() != cfgs[0].n()) {
        return Err(Error::Experiment("configurations must share n_candidates to share pools".into()));
    }
    if seeds.len() < MIN_SEEDS {
        return Err(Error::Experiment(format!("need at least {MIN_SEEDS} seeds, got {}", seeds.len())));
    }
    let eval_pairs = world.gold_heldout_pairs()?;
    if eval_pairs.is_empty() {
        return Err(Error::Experiment("world has no held-out tasks to evaluate on".into()));
    }
    let by_seed = seeds
        .par_iter()
        .map(|&s| run_seed(world, s, cfgs, dpo, sampling, &eval_pairs))
        .collect::<Result<Vec<_>>>()?;
    Ok(cfgs
        .iter()
        .enumerate()
        .map(|(ci, cfg)| {
            let outcomes = by_seed.iter().map(|row| row[ci].clone()).collect();
            ExperimentResult::from_outcomes(cfg, dpo, outcomes)
        })
        .collect())
}

/// Full pipeline under the full and the α = 0 configuration on identical
/// pools, per seed.
pub fn run_ablation(
    world: &SyntheticWorld,
    cfg_full: &M3PConfig,
    cfg_ablated: &M3PConfig,
    dpo: &DpoConfig,
    sampling: &SamplingConfig,
    seeds: &[u64],
) -> Result<(ExperimentResult, ExperimentResult)> {
    if cfg_ablated.alpha != 0.0 {
        return Err(Error::Experiment(format!("ablated arm needs alpha = 0, got {}", cfg_ablated.alpha)));
    }
    let mut results = run_configs(world, &[*cfg_full, *cfg_ablated], dpo, sampling, seeds)?;
    let ablated = results.pop().expect("two results");
    let full = results.pop().expect("two results");
    Ok((full, ablated))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// α varied, δ at the default.
    pub alpha_rows: Vec<ExperimentResult>,
    /// δ varied, α at the default.
    pub delta_rows: Vec<ExperimentResult>,
    /// Full factorial, α-major.
    pub grid: Vec<ExperimentResult>,
}

/// Full-factorial α × δ sweep plus the one-axis tables. `defaults`
/// supplies the fixed value of the other axis and `n_candidates`.
pub fn run_sweep(
    world: &SyntheticWorld,
    alphas: &[f64],
    deltas: &[f64],
    defaults: &M3PConfig,
    dpo: &DpoConfig,
    sampling: &SamplingConfig,
    seeds: &[u64],
) -> Result<SweepResult> {
    if alphas.is_empty() || deltas.is_empty() {
        return Err(Error::Experiment("sweep grids must be non-empty".into()));
    }
    let cfg = |a: f64, d: f64| -> Result<M3PConfig> {
        Ok(M3PParams {
            alpha: a,
            delta: d,
            ..defaults.params()
        }
        .validate()?)
    };
    let mut unique: Vec<M3PConfig> = Vec::new();
    let key_of = |c: M3PConfig, unique: &mut Vec<M3PConfig>| -> usize {
        match unique.iter().position(|u| u.alpha.to_bits() == c.alpha.to_bits() && u.delta.to_bits() == c.delta.to_bits()) {
            Some(i) => i,
            None => {
                unique.push(c);
                unique.len() - 1
            }
        }
    };
    let mut grid_idx = Vec::new();
    for &a in alphas {
        for &d in deltas {
            grid_idx.push(key_of(cfg(a, d)?, &mut unique));
        }
    }
    let alpha_idx = alphas
        .iter()
        .map(|&a| Ok(key_of(cfg(a, defaults.delta)?, &mut unique)))
        .collect::<Result<Vec<_>>>()?;
    let delta_idx = deltas
        .iter()
        .map(|&d| Ok(key_of(cfg(defaults.alpha, d)?, &mut unique)))
        .collect::<Result<Vec<_>>>()?;
    let results = run_configs(world, &unique, dpo, sampling, seeds)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| results[i].clone()).collect();
    Ok(SweepResult {
        alpha_rows: pick(&alpha_idx),
        delta_rows: pick(&delta_idx),
        grid: pick(&grid_idx),
    })
}

/// Paired per-seed comparison of the full arm against the α = 0 arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectionCheck {
    pub seeds: usize,
    /// Seeds where the full arm's R_l mean log-prob is strictly higher.
    pub rl_wins: usize,
    /// Seeds where the full arm's accuracy is strictly higher.
    pub accuracy_wins: usize,
}

impl DirectionCheck {
    pub fn new(full: &ExperimentResult, ablated: &ExperimentResult) -> Self {
        let paired = || full.per_seed.iter().zip(&ablated.per_seed);
        Self {
            seeds: full.per_seed.len().min(ablated.per_seed.len()),
            rl_wins: paired().filter(|(f, a)| f.rl_mean_log_prob > a.rl_mean_log_prob).count(),
            accuracy_wins: paired().filter(|(f, a)| f.accuracy > a.accuracy).count(),
        }
    }

    /// Wins needed: four fifths of the seeds, rounded up.
    pub fn required(&self) -> usize {
        (4 * self.seeds).div_ceil(5)
    }

    pub fn rl_holds(&self) -> bool {
        self.rl_wins >= self.required()
    }

    pub fn accuracy_holds(&self) -> bool {
        self.accuracy_wins >= self.required()
    }
}

const TABLE_HEADER: &str = "alpha,delta,beta,n_candidates,seeds,mean_accuracy,std_accuracy,mean_rl_log_prob,std_rl_log_prob";

fn table_row(label: &str, r: &ExperimentResult) -> String {
    format!(
        "{label},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
        r.alpha,
        r.delta,
        r.beta,
        r.n_candidates,
        r.seeds.len(),
        r.mean_accuracy,
        r.std_accuracy,
        r.mean_rl_log_prob,
        r.std_rl_log_prob
    )
}

/// Two-row summary: full configuration, then the α = 0 arm.
pub fn ablation_table(full: &ExperimentResult, ablated: &ExperimentResult) -> String {
    format!(
        "variant,{TABLE_HEADER}\n{}\n{}\n",
        table_row("full", full),
        table_row("no_confidence_term", ablated)
    )
}

/// One row per result, labelled by `axis`.
pub fn sweep_table(axis: &str, rows: &[ExperimentResult]) -> String {
    let mut out = format!("axis,{TABLE_HEADER}\n");
    for r in rows {
        out.push_str(&table_row(axis, r));
        out.push('\n');
    }
    out
}

/// One JSON line per (configuration, seed).
pub fn per_seed_log(results: &[ExperimentResult]) -> String {
    let mut out = String::new();
    for r in results {
        for o in &r.per_seed {
            out.push_str(&serde_json::to_string(o).expect("plain data serializes"));
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Ablation,
    Sweep,
}

/// Experiment description in the same key-value format as run configs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub world_seed: u64,
    pub n_tasks: usize,
    pub bias: f64,
    pub seeds: Vec<u64>,
    pub alphas: Vec<f64>,
    pub deltas: Vec<f64>,
    pub run: RunParams,
}

fn parse_list<T: std::str::FromStr>(entry: &crate::config::KvEntry, source: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    entry
        .value
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|e| Error::parse(source, entry.line, format!("bad list item `{}` for `{}`: {e}", s.trim(), entry.key)))
        })
        .collect()
}

impl ExperimentSpec {
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut spec = ExperimentSpec {
            kind: ExperimentKind::Ablation,
            world_seed: 0,
            n_tasks: DEFAULT_TASKS,
            bias: DEFAULT_BIAS,
            seeds: (0..MIN_SEEDS as u64).collect(),
            alphas: vec![0.0, 0.1, 0.25, 0.5, 0.75, 1.0],
            deltas: vec![0.0, 0.1, 0.2, 0.3],
            run: RunParams::default(),
        };
        let mut seen: HashMap<String, usize> = HashMap::new();
        for entry in parse_kv(text, source_name)? {
            seen.insert(entry.key.clone(), entry.line);
            match entry.key.as_str() {
                "experiment" => {
                    spec.kind = match entry.value.as_str() {
                        "ablation" => ExperimentKind::Ablation,
                        "sweep" => ExperimentKind::Sweep,
                        other => {
                            return Err(Error::parse(
                                source_name,
                                entry.line,
                                format!("unknown experiment `{other}` (expected ablation or sweep)"),
                            ))
                        }
                    }
                }
                "world.seed" => spec.world_seed = parse_value(&entry, source_name)?,
                "world.n_tasks" => spec.n_tasks = parse_value(&entry, source_name)?,
                "world.bias" => spec.bias = parse_value(&entry, source_name)?,
                "seeds" => spec.seeds = parse_list(&entry, source_name)?,
                "sweep.alphas" => spec.alphas = parse_list(&entry, source_name)?,
                "sweep.deltas" => spec.deltas = parse_list(&entry, source_name)?,
                _ => {
                    if !spec.run.apply(&entry, source_name)? {
                        return Err(Error::parse(source_name, entry.line, format!("unknown key `{}`", entry.key)));
                    }
                }
            }
        }
        if spec.seeds.len() < MIN_SEEDS {
            return Err(Error::Experiment(format!("need at least {MIN_SEEDS} seeds, got {}", spec.seeds.len())));
        }
        crate::config::validate_config(spec.run)?;
        Ok(spec)
    }
}
