//! A small autoregressive token policy with exact log-probabilities.
//!
//! Architecture, for a context `c_1..c_n`:
//!
//! ```text
//! x      = [E[c_n]; E[c_{n-1}]; mean_i E[c_i]]      (missing tokens embed as 0)
//! h      = tanh(W_h x + b_h)
//! logits = W_o h + b_o + scale * U (D h)
//! ```
//!
//! `E`, `W_h`, `b_h`, `W_o`, `b_o` form the frozen base. The low-rank adapter
//! (`D` = down, `U` = up) sits on the output projection and is the only part
//! DPO training touches. `U` starts at zero, so a fresh adapter is neutral.

use serde::{Deserialize, Serialize};

use crate::config::SamplingConfig;
use crate::error::{Error, Result};
use crate::rng::{argmax, SeededRng};
use crate::types::{Candidate, CandidatePool, Prompt, TokenId};

pub const MAX_VOCAB: usize = 256;
pub const MAX_CONTEXT_WINDOW: usize = 64;

/// Resampling budget for duplicate candidates, as a multiple of pool size.
pub const DUPLICATE_RETRY_FACTOR: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub vocab_size: usize,
    pub context_window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("model shape", reason));
        if self.vocab_size == 0 || self.vocab_size > MAX_VOCAB {
            return bad(format!("vocab_size must be in 1..={MAX_VOCAB}, got {}", self.vocab_size));
        }
        if self.context_window == 0 || self.context_window > MAX_CONTEXT_WINDOW {
            return bad(format!(
                "context_window must be in 1..={MAX_CONTEXT_WINDOW}, got {}",
                self.context_window
            ));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return bad("embed_dim and hidden_dim must be positive".into());
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        3 * self.embed_dim
    }
}

/// Frozen base parameters, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights {
    /// vocab × embed
    pub embedding: Vec<f64>,
    /// hidden × (3·embed)
    pub hidden_w: Vec<f64>,
    pub hidden_b: Vec<f64>,
    /// vocab × hidden
    pub output_w: Vec<f64>,
    pub output_b: Vec<f64>,
}

impl BaseWeights {
    pub fn zeros(shape: &ModelShape) -> Self {
        Self {
            embedding: vec![0.0; shape.vocab_size * shape.embed_dim],
            hidden_w: vec![0.0; shape.hidden_dim * shape.feature_dim()],
            hidden_b: vec![0.0; shape.hidden_dim],
            output_w: vec![0.0; shape.vocab_size * shape.hidden_dim],
            output_b: vec![0.0; shape.vocab_size],
        }
    }

    pub fn random(shape: &ModelShape, rng: &mut SeededRng) -> Self {
        let mut w = Self::zeros(shape);
        let hidden_std = 1.0 / (shape.feature_dim() as f64).sqrt();
        let out_std = 1.0 / (shape.hidden_dim as f64).sqrt();
        w.embedding.iter_mut().for_each(|v| *v = rng.normal());
        w.hidden_w.iter_mut().for_each(|v| *v = hidden_std * rng.normal());
        w.output_w.iter_mut().for_each(|v| *v = out_std * rng.normal());
        w
    }

    fn parts(&self) -> [&Vec<f64>; 5] {
        [&self.embedding, &self.hidden_w, &self.hidden_b, &self.output_w, &self.output_b]
    }

    fn parts_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [
            &mut self.embedding,
            &mut self.hidden_w,
            &mut self.hidden_b,
            &mut self.output_w,
            &mut self.output_b,
        ]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.parts().iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn len(&self) -> usize {
        self.parts().iter().map(|p| p.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn assign(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.len(), "base parameter length mismatch");
        let mut offset = 0;
        for part in self.parts_mut() {
            let n = part.len();
            part.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }
}

/// Trainable low-rank correction `scale · up · down` on the output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    pub rank: usize,
    pub scale: f64,
    /// rank × hidden
    pub down: Vec<f64>,
    /// vocab × rank, zero at construction
    pub up: Vec<f64>,
}

impl AdapterPair {
    pub fn new(shape: &ModelShape, rank: usize, scale: f64, rng: &mut SeededRng) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("adapter", "rank must be positive"));
        }
        if !scale.is_finite() {
            return Err(Error::invalid("adapter", "scale must be finite"));
        }
        let std = 1.0 / (shape.hidden_dim as f64).sqrt();
        Ok(Self {
            rank,
            scale,
            down: (0..rank * shape.hidden_dim).map(|_| std * rng.normal()).collect(),
            up: vec![0.0; shape.vocab_size * rank],
        })
    }

    pub fn is_neutral(&self) -> bool {
        self.up.iter().all(|&v| v == 0.0)
    }

    pub fn len(&self) -> usize {
        self.down.len() + self.up.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gradient with respect to the adapter, same layout as [`AdapterPair`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad {
    pub down: Vec<f64>,
    pub up: Vec<f64>,
}

impl AdapterGrad {
    pub fn zeros_like(adapter: &AdapterPair) -> Self {
        Self {
            down: vec![0.0; adapter.down.len()],
            up: vec![0.0; adapter.up.len()],
        }
    }

    /// `down` entries followed by `up` entries.
    pub fn flatten(&self) -> Vec<f64> {
        self.down.iter().chain(&self.up).copied().collect()
    }

    pub fn from_flat(flat: &[f64], down_len: usize) -> Self {
        Self {
            down: flat[..down_len].to_vec(),
            up: flat[down_len..].to_vec(),
        }
    }

    pub fn add_scaled(&mut self, other: &AdapterGrad, s: f64) {
        self.down.iter_mut().zip(&other.down).for_each(|(a, b)| *a += s * b);
        self.up.iter_mut().zip(&other.up).for_each(|(a, b)| *a += s * b);
    }

    pub fn is_zero(&self) -> bool {
        self.down.iter().chain(&self.up).all(|&v| v == 0.0)
    }
}

/// Gradient with respect to the base weights (used only to build synthetic
/// base models; DPO never touches the base).
pub type BaseGrad = BaseWeights;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    shape: ModelShape,
    base: BaseWeights,
    adapter: AdapterPair,
    end_token: Option<TokenId>,
}

struct Activations {
    x: Vec<f64>,
    h: Vec<f64>,
    z: Vec<f64>,
    logits: Vec<f64>,
}

impl ToyPolicy {
    pub fn new(
        shape: ModelShape,
        base: BaseWeights,
        adapter: AdapterPair,
        end_token: Option<TokenId>,
    ) -> Result<Self> {
        shape.validate()?;
        let expect = BaseWeights::zeros(&shape);
        let lens_ok = base
            .parts()
            .iter()
            .zip(expect.parts())
            .all(|(a, b)| a.len() == b.len());
        if !lens_ok {
            return Err(Error::invalid("policy", "base weight sizes do not match the shape"));
        }
        if adapter.rank == 0
            || adapter.down.len() != adapter.rank * shape.hidden_dim
            || adapter.up.len() != shape.vocab_size * adapter.rank
        {
            return Err(Error::invalid("policy", "adapter sizes do not match the shape"));
        }
        if base.flatten().iter().chain(&adapter.down).chain(&adapter.up).any(|v| !v.is_finite())
            || !adapter.scale.is_finite()
        {
            return Err(Error::invalid("policy", "weights must be finite"));
        }
        if let Some(t) = end_token {
            if t as usize >= shape.vocab_size {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab: shape.vocab_size,
                });
            }
        }
        Ok(Self {
            shape,
            base,
            adapter,
            end_token,
        })
    }

    /// Random base and a fresh (neutral) adapter.
    pub fn random(shape: ModelShape, rank: usize, scale: f64, end_token: Option<TokenId>, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = SeededRng::new(seed);
        let base = BaseWeights::random(&shape, &mut rng);
        let adapter = AdapterPair::new(&shape, rank, scale, &mut rng)?;
        Self::new(shape, base, adapter, end_token)
    }

    /// All-zero base: uniform next-token distribution for every context.
    pub fn uniform(vocab_size: usize, context_window: usize) -> Result<Self> {
        let shape = ModelShape {
            vocab_size,
            context_window,
            embed_dim: 2,
            hidden_dim: 2,
        };
        shape.validate()?;
        let adapter = AdapterPair::new(&shape, 1, 1.0, &mut SeededRng::new(0))?;
        Self::new(shape, BaseWeights::zeros(&shape), adapter, None)
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn base(&self) -> &BaseWeights {
        &self.base
    }

    pub fn adapter(&self) -> &AdapterPair {
        &self.adapter
    }

    pub fn end_token(&self) -> Option<TokenId> {
        self.end_token
    }

    pub fn adapter_params(&self) -> Vec<f64> {
        self.adapter.down.iter().chain(&self.adapter.up).copied().collect()
    }

    pub fn set_adapter_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.adapter.len(), "adapter parameter length mismatch");
        let d = self.adapter.down.len();
        self.adapter.down.copy_from_slice(&flat[..d]);
        self.adapter.up.copy_from_slice(&flat[d..]);
    }

    /// `adapter -= lr · grad`. The base is untouched.
    pub fn apply_adapter_step(&mut self, grad: &AdapterGrad, lr: f64) {
        self.adapter.down.iter_mut().zip(&grad.down).for_each(|(p, g)| *p -= lr * g);
        self.adapter.up.iter_mut().zip(&grad.up).for_each(|(p, g)| *p -= lr * g);
    }

    pub(crate) fn base_mut(&mut self) -> &mut BaseWeights {
        &mut self.base
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.shape.vocab_size) {
            Some(&token) => Err(Error::TokenOutOfRange {
                token,
                vocab: self.shape.vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn embedding_row(&self, token: TokenId) -> &[f64] {
        let e = self.shape.embed_dim;
        let t = token as usize;
        &self.base.embedding[t * e..(t + 1) * e]
    }

    fn features(&self, last: Option<TokenId>, prev: Option<TokenId>, sum: &[f64], count: usize) -> Vec<f64> {
        let e = self.shape.embed_dim;
        let mut x = vec![0.0; 3 * e];
        if let Some(t) = last {
            x[..e].copy_from_slice(self.embedding_row(t));
        }
        if let Some(t) = prev {
            x[e..2 * e].copy_from_slice(self.embedding_row(t));
        }
        if count > 0 {
            let inv = 1.0 / count as f64;
            x[2 * e..].iter_mut().zip(sum).for_each(|(xi, s)| *xi = s * inv);
        }
        x
    }

    fn activations(&self, x: Vec<f64>) -> Activations {
        let s = &self.shape;
        let f = s.feature_dim();
        let h: Vec<f64> = (0..s.hidden_dim)
            .map(|j| {
                let row = &self.base.hidden_w[j * f..(j + 1) * f];
                (dot(row, &x) + self.base.hidden_b[j]).tanh()
            })
            .collect();
        let r = self.adapter.rank;
        let z: Vec<f64> = (0..r)
            .map(|k| dot(&self.adapter.down[k * s.hidden_dim..(k + 1) * s.hidden_dim], &h))
            .collect();
        let logits = (0..s.vocab_size)
            .map(|v| {
                let base = dot(&self.base.output_w[v * s.hidden_dim..(v + 1) * s.hidden_dim], &h) + self.base.output_b[v];
                base + self.adapter.scale * dot(&self.adapter.up[v * r..(v + 1) * r], &z)
            })
            .collect();
        Activations { x, h, z, logits }
    }

    fn context_activations(&self, context: &[TokenId]) -> Activations {
        let e = self.shape.embed_dim;
        let mut sum = vec![0.0; e];
        for &t in context {
            sum.iter_mut().zip(self.embedding_row(t)).for_each(|(s, v)| *s += v);
        }
        let n = context.len();
        let last = n.checked_sub(1).map(|i| context[i]);
        let prev = n.checked_sub(2).map(|i| context[i]);
        self.activations(self.features(last, prev, &sum, n))
    }

    fn check_context(&self, context: &[TokenId]) -> Result<()> {
        if context.len() > self.shape.context_window {
            return Err(Error::ContextTooLong {
                len: context.len(),
                window: self.shape.context_window,
            });
        }
        self.check_tokens(context)
    }

    /// Raw output logits for the next token.
    pub fn logits(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        self.check_context(context)?;
        Ok(self.context_activations(context).logits)
    }

    /// Walks `prefix ++ tokens`, yielding activations for predicting each of `tokens`.
    fn walk<F>(&self, prefix: &[TokenId], tokens: &[TokenId], mut visit: F)
    where
        F: FnMut(usize, &Activations),
    {
        let e = self.shape.embed_dim;
        let mut sum = vec![0.0; e];
        for &t in prefix {
            sum.iter_mut().zip(self.embedding_row(t)).for_each(|(s, v)| *s += v);
        }
        let mut last = prefix.last().copied();
        let mut prev = prefix.len().checked_sub(2).map(|i| prefix[i]);
        let mut count = prefix.len();
        for (step, &tok) in tokens.iter().enumerate() {
            let act = self.activations(self.features(last, prev, &sum, count));
            visit(step, &act);
            sum.iter_mut().zip(self.embedding_row(tok)).for_each(|(s, v)| *s += v);
            prev = last;
            last = Some(tok);
            count += 1;
        }
    }

    fn check_sequence(&self, prefix: &[TokenId], tokens: &[TokenId]) -> Result<()> {
        let len = prefix.len() + tokens.len();
        if len > self.shape.context_window {
            return Err(Error::ContextTooLong {
                len,
                window: self.shape.context_window,
            });
        }
        self.check_tokens(prefix)?;
        self.check_tokens(tokens)
    }

    /// `Σ_t log P(tokens[t] | prefix, tokens[..t])`.
    pub fn sequence_log_prob(&self, prefix: &[TokenId], tokens: &[TokenId]) -> Result<f64> {
        self.check_sequence(prefix, tokens)?;
        let mut total = 0.0;
        self.walk(prefix, tokens, |step, act| {
            total += log_softmax_at(&act.logits, tokens[step] as usize);
        });
        Ok(total)
    }

    /// Sequence log-probability and its gradient with respect to the adapter.
    pub fn log_prob_adapter_grad(&self, prefix: &[TokenId], tokens: &[TokenId]) -> Result<(f64, AdapterGrad)> {
        self.check_sequence(prefix, tokens)?;
        let s = self.shape;
        let r = self.adapter.rank;
        let scale = self.adapter.scale;
        let mut grad = AdapterGrad::zeros_like(&self.adapter);
        let mut total = 0.0;
        self.walk(prefix, tokens, |step, act| {
            let y = tokens[step] as usize;
            let (lp, mut g) = log_softmax_grad(&act.logits, y);
            total += lp;
            g.iter_mut().for_each(|v| *v *= scale);
            // up[v][k] += scale·g[v]·z[k];  down[k][j] += scale·(Uᵀg)[k]·h[j]
            let mut ug = vec![0.0; r];
            for v in 0..s.vocab_size {
                let gv = g[v];
                let up_row = &self.adapter.up[v * r..(v + 1) * r];
                for k in 0..r {
                    grad.up[v * r + k] += gv * act.z[k];
                    ug[k] += up_row[k] * gv;
                }
            }
            for k in 0..r {
                let row = &mut grad.down[k * s.hidden_dim..(k + 1) * s.hidden_dim];
                row.iter_mut().zip(&act.h).for_each(|(d, hj)| *d += ug[k] * hj);
            }
        });
        Ok((total, grad))
    }

    /// Sequence log-probability and its gradient with respect to the base weights.
    pub fn log_prob_base_grad(&self, prefix: &[TokenId], tokens: &[TokenId]) -> Result<(f64, BaseGrad)> {
        self.check_sequence(prefix, tokens)?;
        let s = self.shape;
        let e = s.embed_dim;
        let f = s.feature_dim();
        let hd = s.hidden_dim;
        let r = self.adapter.rank;
        let mut grad = BaseWeights::zeros(&s);
        let mut total = 0.0;
        let mut context: Vec<TokenId> = prefix.to_vec();
        self.walk(prefix, tokens, |step, act| {
            let y = tokens[step] as usize;
            let (lp, g) = log_softmax_grad(&act.logits, y);
            total += lp;
            let mut dh = vec![0.0; hd];
            let mut ug = vec![0.0; r];
            for v in 0..s.vocab_size {
                let gv = g[v];
                grad.output_b[v] += gv;
                let w_row = &self.base.output_w[v * hd..(v + 1) * hd];
                let gw_row = &mut grad.output_w[v * hd..(v + 1) * hd];
                for j in 0..hd {
                    gw_row[j] += gv * act.h[j];
                    dh[j] += w_row[j] * gv;
                }
                for (k, u) in ug.iter_mut().enumerate() {
                    *u += self.adapter.up[v * r + k] * gv;
                }
            }
            for k in 0..r {
                let c = self.adapter.scale * ug[k];
                let d_row = &self.adapter.down[k * hd..(k + 1) * hd];
                dh.iter_mut().zip(d_row).for_each(|(a, d)| *a += c * d);
            }
            let dpre: Vec<f64> = dh.iter().zip(&act.h).map(|(d, h)| d * (1.0 - h * h)).collect();
            let mut dx = vec![0.0; f];
            for j in 0..hd {
                grad.hidden_b[j] += dpre[j];
                let w_row = &self.base.hidden_w[j * f..(j + 1) * f];
                let gw_row = &mut grad.hidden_w[j * f..(j + 1) * f];
                for i in 0..f {
                    gw_row[i] += dpre[j] * act.x[i];
                    dx[i] += w_row[i] * dpre[j];
                }
            }
            let n = context.len();
            if n >= 1 {
                let t = context[n - 1] as usize;
                grad.embedding[t * e..(t + 1) * e].iter_mut().zip(&dx[..e]).for_each(|(a, b)| *a += b);
            }
            if n >= 2 {
                let t = context[n - 2] as usize;
                grad.embedding[t * e..(t + 1) * e].iter_mut().zip(&dx[e..2 * e]).for_each(|(a, b)| *a += b);
            }
            if n >= 1 {
                let inv = 1.0 / n as f64;
                for &tok in &context {
                    let t = tok as usize;
                    grad.embedding[t * e..(t + 1) * e]
                        .iter_mut()
                        .zip(&dx[2 * e..])
                        .for_each(|(a, b)| *a += b * inv);
                }
            }
            context.push(tokens[step]);
        });
        Ok((total, grad))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

fn log_softmax_at(logits: &[f64], y: usize) -> f64 {
    logits[y] - log_sum_exp(logits)
}

/// `log softmax(logits)[y]` and its gradient `onehot(y) − softmax(logits)`.
fn log_softmax_grad(logits: &[f64], y: usize) -> (f64, Vec<f64>) {
    let probs = softmax(logits);
    let mut g: Vec<f64> = probs.iter().map(|p| -p).collect();
    g[y] += 1.0;
    (log_softmax_at(logits, y), g)
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / total).collect()
}

/// Probability vector over the vocabulary for the next token.
pub fn next_token_distribution(policy: &ToyPolicy, context: &[TokenId]) -> Result<Vec<f64>> {
    Ok(softmax(&policy.logits(context)?))
}

/// Natural-log probability of `tokens` as a continuation of the prompt.
pub fn compute_log_prob(policy: &ToyPolicy, prompt: &Prompt, tokens: &[TokenId]) -> Result<f64> {
    policy.sequence_log_prob(prompt.context_tokens(), tokens)
}

/// Indices of the nucleus: the shortest prefix of tokens sorted by
/// descending probability (ties by index) whose cumulative mass reaches
/// `top_p`. The threshold is inclusive and the nucleus is never empty.
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut cumulative = 0.0;
    let mut keep = 0;
    for &i in &order {
        cumulative += probs[i];
        keep += 1;
        // Absorb summation rounding so that exact boundaries stay inclusive.
        if cumulative >= top_p - 1e-12 {
            break;
        }
    }
    order.truncate(keep.max(1));
    order
}

/// One decoding step: the emitted token and the nucleus it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStep {
    pub token: TokenId,
    pub nucleus: Vec<TokenId>,
}

fn temperature_probs(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    softmax(&scaled)
}

/// Nucleus sampling with the per-step nucleus recorded.
pub fn sample_top_p_traced(
    policy: &ToyPolicy,
    prompt: &Prompt,
    cfg: &SamplingConfig,
    rng: &mut SeededRng,
) -> Result<Vec<SampleStep>> {
    let mut context = prompt.context_tokens().to_vec();
    policy.check_context(&context)?;
    let mut steps = Vec::new();
    while steps.len() < cfg.max_new_tokens() && context.len() < policy.shape.context_window {
        let logits = policy.context_activations(&context).logits;
        let probs = temperature_probs(&logits, cfg.temperature);
        let (token, members) = if probs.iter().any(|p| !p.is_finite()) {
            let t = argmax(&logits);
            (t, vec![t])
        } else {
            let members = nucleus(&probs, cfg.top_p);
            let weights: Vec<f64> = members.iter().map(|&i| probs[i]).collect();
            (members[rng.categorical(&weights)], members)
        };
        let token = token as TokenId;
        context.push(token);
        steps.push(SampleStep {
            token,
            nucleus: members.into_iter().map(|i| i as TokenId).collect(),
        });
        if Some(token) == policy.end_token {
            break;
        }
    }
    Ok(steps)
}

/// Samples one response by nucleus sampling. Stops at the end token,
/// `max_tokens`, or a full context window.
pub fn sample_top_p(policy: &ToyPolicy, prompt: &Prompt, cfg: &SamplingConfig, rng: &mut SeededRng) -> Result<Vec<TokenId>> {
    Ok(sample_top_p_traced(policy, prompt, cfg, rng)?
        .into_iter()
        .map(|s| s.token)
        .collect())
}

/// Samples `n` candidates and records each one's log-probability under
/// `policy`. Duplicates are resampled up to `5·n` times in total; past that
/// they are kept and the pool is flagged degenerate.
pub fn generate_candidates(
    policy: &ToyPolicy,
    prompt: &Prompt,
    n: usize,
    cfg: &SamplingConfig,
    rng: &mut SeededRng,
) -> Result<CandidatePool> {
    if n < 2 {
        return Err(Error::PoolTooSmall(n));
    }
    let budget = DUPLICATE_RETRY_FACTOR * n;
    let mut retries = 0;
    let mut degenerate = false;
    let mut sequences: Vec<Vec<TokenId>> = Vec::with_capacity(n);
    while sequences.len() < n {
        let tokens = sample_top_p(policy, prompt, cfg, rng)?;
        if sequences.contains(&tokens) {
            if retries < budget {
                retries += 1;
                continue;
            }
            degenerate = true;
        }
        sequences.push(tokens);
    }
    let candidates = sequences
        .into_iter()
        .map(|tokens| {
            let lp = compute_log_prob(policy, prompt, &tokens)?;
            Candidate::new(tokens, lp)
        })
        .collect::<Result<Vec<_>>>()?;
    CandidatePool::new(prompt.clone(), candidates, degenerate)
}

/// Folds `scale · up · down` into the output projection and zeroes `up`.
/// `down` is kept so the adapter can keep training from the merged point.
pub fn merge_adapters(policy: &ToyPolicy) -> ToyPolicy {
    let mut merged = policy.clone();
    let s = policy.shape;
    let a = &policy.adapter;
    if a.is_neutral() {
        return merged;
    }
    let r = a.rank;
    for v in 0..s.vocab_size {
        for j in 0..s.hidden_dim {
            let delta: f64 = (0..r).map(|k| a.up[v * r + k] * a.down[k * s.hidden_dim + j]).sum();
            merged.base.output_w[v * s.hidden_dim + j] += a.scale * delta;
        }
    }
    merged.adapter.up.iter_mut().for_each(|u| *u = 0.0);
    merged
}

/// Frozen snapshot of a policy, used as the DPO reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePolicy(ToyPolicy);

impl ReferencePolicy {
    pub fn snapshot(policy: &ToyPolicy) -> Self {
        Self(policy.clone())
    }

    pub fn policy(&self) -> &ToyPolicy {
        &self.0
    }
}

impl std::ops::Deref for ReferencePolicy {
    type Target = ToyPolicy;

    fn deref(&self) -> &ToyPolicy {
        &self.0
    }
}
