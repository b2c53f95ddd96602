//! DPO objective on mined pairs, exact adapter gradients, and the training
//! loop (plain SGD with linear warmup, then constant learning rate).
//!
//! Per pair, with `d = (logπ(w) − logπ_ref(w)) − (logπ(l) − logπ_ref(l))`:
//!
//! ```text
//! loss = −ln σ(β·d) = softplus(−β·d)
//! ∂loss/∂θ = −β·σ(−β·d)·(∇logπ(w) − ∇logπ(l))
//! ```

use rayon::prelude::*;

use crate::config::DpoConfig;
use crate::error::{Error, Result};
use crate::policy::{AdapterGrad, ReferencePolicy, ToyPolicy};
use crate::rng::SeededRng;
use crate::selection::PreferenceDataset;
use crate::types::PreferencePair;

/// The four sequence log-probabilities entering one pair's loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLogps {
    pub policy_w: f64,
    pub policy_l: f64,
    pub ref_w: f64,
    pub ref_l: f64,
}

impl PairLogps {
    pub fn new(policy_w: f64, policy_l: f64, ref_w: f64, ref_l: f64) -> Result<Self> {
        let all = [policy_w, policy_l, ref_w, ref_l];
        if all.iter().any(|v| v.is_nan() || *v > 0.0) {
            return Err(Error::invalid("pair log-probs", format!("all must be ≤ 0, got {all:?}")));
        }
        Ok(Self {
            policy_w,
            policy_l,
            ref_w,
            ref_l,
        })
    }

    /// Implicit reward margin, without β.
    pub fn margin(&self) -> f64 {
        (self.policy_w - self.ref_w) - (self.policy_l - self.ref_l)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn dpo_pair_loss(lp: &PairLogps, beta: f64) -> Result<f64> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid("beta", format!("must be > 0, got {beta}")));
    }
    let d = lp.margin();
    if !d.is_finite() {
        return Err(Error::NonFinite("dpo_pair_loss"));
    }
    Ok(softplus(-beta * d))
}

/// Neumaier-compensated sum; reduction order does not matter to ~1 ulp.
pub(crate) fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn pair_logps(pair: &PreferencePair, policy: &ToyPolicy, reference: &ReferencePolicy) -> Result<PairLogps> {
    let ctx = pair.prompt().context_tokens();
    let w = pair.preferred().tokens();
    let l = pair.dispreferred().tokens();
    PairLogps::new(
        policy.sequence_log_prob(ctx, w)?,
        policy.sequence_log_prob(ctx, l)?,
        reference.sequence_log_prob(ctx, w)?,
        reference.sequence_log_prob(ctx, l)?,
    )
}

/// Mean pair loss over a batch.
pub fn dpo_batch_loss(batch: &[PreferencePair], policy: &ToyPolicy, reference: &ReferencePolicy, beta: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let losses = batch
        .par_iter()
        .map(|p| dpo_pair_loss(&pair_logps(p, policy, reference)?, beta))
        .collect::<Result<Vec<f64>>>()?;
    Ok(compensated_sum(losses) / batch.len() as f64)
}

/// Batch loss, mean margin and adapter gradient from one pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEval {
    pub loss: f64,
    pub mean_margin: f64,
    pub grad: AdapterGrad,
}

struct PairEval {
    loss: f64,
    margin: f64,
    grad: AdapterGrad,
}

fn eval_pair(pair: &PreferencePair, policy: &ToyPolicy, reference: &ReferencePolicy, beta: f64) -> Result<PairEval> {
    let ctx = pair.prompt().context_tokens();
    let (pw, gw) = policy.log_prob_adapter_grad(ctx, pair.preferred().tokens())?;
    let (pl, gl) = policy.log_prob_adapter_grad(ctx, pair.dispreferred().tokens())?;
    let lp = PairLogps::new(
        pw,
        pl,
        reference.sequence_log_prob(ctx, pair.preferred().tokens())?,
        reference.sequence_log_prob(ctx, pair.dispreferred().tokens())?,
    )?;
    let loss = dpo_pair_loss(&lp, beta)?;
    let coeff = -beta * sigmoid(-beta * lp.margin());
    let mut grad = gw;
    grad.add_scaled(&gl, -1.0);
    grad.down.iter_mut().chain(grad.up.iter_mut()).for_each(|g| *g *= coeff);
    Ok(PairEval {
        loss,
        margin: lp.margin(),
        grad,
    })
}

pub fn dpo_loss_and_gradient(
    batch: &[PreferencePair],
    policy: &ToyPolicy,
    reference: &ReferencePolicy,
    beta: f64,
) -> Result<BatchEval> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let evals = batch
        .par_iter()
        .map(|p| eval_pair(p, policy, reference, beta))
        .collect::<Result<Vec<_>>>()?;
    let n = batch.len() as f64;
    let reduce = |pick: &dyn Fn(&PairEval) -> &[f64], len: usize| -> Vec<f64> {
        (0..len)
            .map(|i| compensated_sum(evals.iter().map(|e| pick(e)[i])) / n)
            .collect()
    };
    let grad = AdapterGrad {
        down: reduce(&|e| &e.grad.down, policy.adapter().down.len()),
        up: reduce(&|e| &e.grad.up, policy.adapter().up.len()),
    };
    Ok(BatchEval {
        loss: compensated_sum(evals.iter().map(|e| e.loss)) / n,
        mean_margin: compensated_sum(evals.iter().map(|e| e.margin)) / n,
        grad,
    })
}

/// Exact gradient of [`dpo_batch_loss`] with respect to the adapter.
pub fn dpo_gradient(batch: &[PreferencePair], policy: &ToyPolicy, reference: &ReferencePolicy, beta: f64) -> Result<AdapterGrad> {
    Ok(dpo_loss_and_gradient(batch, policy, reference, beta)?.grad)
}

pub fn warmup_steps(total_steps: usize, warmup_fraction: f64) -> usize {
    // 0.05 · 1000 lands a hair above 50 in binary; don't round that up.
    (warmup_fraction * total_steps as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Linear ramp from 0 over the warmup steps, then constant.
pub fn lr_at_step(step: usize, total_steps: usize, cfg: &DpoConfig) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    let warm = warmup_steps(total_steps, cfg.warmup_fraction);
    Ok(if step < warm {
        cfg.learning_rate * step as f64 / warm as f64
    } else {
        cfg.learning_rate
    })
}

/// Fraction of pairs with a positive implicit reward margin; zero margins
/// count one half.
pub fn evaluate_preference_accuracy(pairs: &[PreferencePair], policy: &ToyPolicy, reference: &ReferencePolicy) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("evaluation set", "no pairs"));
    }
    let margins = pairs
        .par_iter()
        .map(|p| pair_logps(p, policy, reference).map(|lp| lp.margin()))
        .collect::<Result<Vec<f64>>>()?;
    let credit: f64 = margins
        .iter()
        .map(|&m| if m > 0.0 { 1.0 } else if m == 0.0 { 0.5 } else { 0.0 })
        .sum();
    Ok(credit / pairs.len() as f64)
}

pub fn mean_margin(pairs: &[PreferencePair], policy: &ToyPolicy, reference: &ReferencePolicy) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("evaluation set", "no pairs"));
    }
    let margins = pairs
        .par_iter()
        .map(|p| pair_logps(p, policy, reference).map(|lp| lp.margin()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(compensated_sum(margins) / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Batch loss before each update.
    pub losses: Vec<f64>,
    /// Batch mean implicit-reward margin before each update.
    pub mean_margins: Vec<f64>,
    pub learning_rates: Vec<f64>,
    pub steps: usize,
    /// Accuracy and mean margin of the trained policy over the training set.
    pub final_accuracy: f64,
    pub final_mean_margin: f64,
    pub beta: f64,
    pub dataset_fingerprint: String,
    pub dpo_fingerprint: String,
}

impl TrainReport {
    /// Plain-text metrics: a header, one line per step, then a final line.
    pub fn to_metrics_text(&self) -> String {
        let mut out = format!(
            "# m3po-metrics v1 dataset_fingerprint={} dpo_fingerprint={} beta={} optimizer=sgd schedule=linear_warmup_then_constant\n",
            self.dataset_fingerprint, self.dpo_fingerprint, self.beta
        );
        for i in 0..self.steps {
            out.push_str(&format!(
                "step={} lr={} loss={} mean_margin={}\n",
                i, self.learning_rates[i], self.losses[i], self.mean_margins[i]
            ));
        }
        out.push_str(&format!(
            "final preference_accuracy={} mean_margin={} steps={}\n",
            self.final_accuracy, self.final_mean_margin, self.steps
        ));
        out
    }
}

/// How `train` treats the dataset's config fingerprint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FingerprintCheck<'a> {
    Require(&'a str),
    Override,
}

/// Runs DPO on `dataset`, starting from `policy`, which also becomes the
/// frozen reference. Only the adapter is updated.
pub fn train(
    dataset: &PreferenceDataset,
    policy: &ToyPolicy,
    cfg: &DpoConfig,
    check: FingerprintCheck<'_>,
) -> Result<(ToyPolicy, TrainReport)> {
    if let FingerprintCheck::Require(expected) = check {
        if expected != dataset.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: expected.to_string(),
                found: dataset.fingerprint.clone(),
            });
        }
    }
    let pairs = &dataset.pairs;
    if pairs.is_empty() {
        return Err(Error::invalid("dataset", "no preference pairs to train on"));
    }
    let reference = ReferencePolicy::snapshot(policy);
    let mut current = policy.clone();
    let batch = cfg.batch();
    let per_epoch = pairs.len().div_ceil(batch);
    let total = per_epoch * cfg.n_epochs();
    let mut rng = SeededRng::new(cfg.seed);
    let mut losses = Vec::with_capacity(total);
    let mut margins = Vec::with_capacity(total);
    let mut lrs = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.n_epochs() {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let members: Vec<PreferencePair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let eval = dpo_loss_and_gradient(&members, &current, &reference, cfg.beta)?;
            if !eval.loss.is_finite() || eval.grad.flatten().iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { step });
            }
            let lr = lr_at_step(step, total, cfg)?;
            current.apply_adapter_step(&eval.grad, lr);
            losses.push(eval.loss);
            margins.push(eval.mean_margin);
            lrs.push(lr);
            step += 1;
        }
    }
    let report = TrainReport {
        losses,
        mean_margins: margins,
        learning_rates: lrs,
        steps: step,
        final_accuracy: evaluate_preference_accuracy(pairs, &current, &reference)?,
        final_mean_margin: mean_margin(pairs, &current, &reference)?,
        beta: cfg.beta,
        dataset_fingerprint: dataset.fingerprint.clone(),
        dpo_fingerprint: cfg.fingerprint(),
    };
    Ok((current, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DpoParams;
    use crate::policy::ModelShape;
    use crate::types::{Candidate, Prompt, ScoreBreakdown, TokenId};
    use proptest::prelude::*;

    fn lp(d: f64) -> PairLogps {
        PairLogps::new(-1.0 - (-d).max(0.0), -1.0 - d.max(0.0), -1.0, -1.0).unwrap()
    }

    #[test]
    fn pair_loss_examples() {
        let eq = PairLogps::new(-3.0, -5.0, -3.0, -5.0).unwrap();
        assert!((dpo_pair_loss(&eq, 0.1).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let one = lp(1.0);
        assert_eq!(one.margin(), 1.0);
        assert!((dpo_pair_loss(&one, 0.1).unwrap() - 0.6443967).abs() < 1e-7);
        assert!(dpo_pair_loss(&lp(1e6), 0.1).unwrap() < 1e-300);
        assert!((dpo_pair_loss(&lp(-1e6), 0.1).unwrap() - 1e5).abs() < 1e-6);
        assert!(dpo_pair_loss(&eq, 0.0).is_err());
    }

    #[test]
    fn softplus_matches_naive_in_safe_range() {
        for x in [-20.0, -1.0, 0.0, 0.3, 5.0, 30.0] {
            assert!((softplus(x) - (1.0f64 + x.exp()).ln()).abs() < 1e-12);
        }
        assert_eq!(softplus(1000.0), 1000.0);
    }

    #[test]
    fn lr_schedule_examples() {
        let cfg = DpoConfig::default();
        assert_eq!(warmup_steps(1000, 0.05), 50);
        assert_eq!(lr_at_step(50, 1000, &cfg).unwrap(), 5e-5);
        assert_eq!(lr_at_step(0, 1000, &cfg).unwrap(), 0.0);
        assert!((lr_at_step(25, 1000, &cfg).unwrap() - 2.5e-5).abs() < 1e-20);
        assert_eq!(lr_at_step(999, 1000, &cfg).unwrap(), 5e-5);
        assert!(matches!(lr_at_step(1000, 1000, &cfg), Err(Error::StepOutOfRange { .. })));
        assert_eq!(warmup_steps(25, 0.05), 2);
        let flat = DpoParams {
            warmup_fraction: 0.0,
            ..Default::default()
        }
        .validate()
        .unwrap();
        assert_eq!(lr_at_step(0, 10, &flat).unwrap(), 5e-5);
    }

    #[test]
    fn compensated_sum_is_order_independent() {
        let mut rng = SeededRng::new(4);
        let mut xs: Vec<f64> = (0..1000).map(|_| (rng.normal() * 1e3).exp2().min(1e12) * rng.normal()).collect();
        let a = compensated_sum(xs.iter().copied());
        rng.shuffle(&mut xs);
        let b = compensated_sum(xs.iter().copied());
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    fn policy(seed: u64) -> ToyPolicy {
        let shape = ModelShape {
            vocab_size: 9,
            context_window: 12,
            embed_dim: 3,
            hidden_dim: 4,
        };
        ToyPolicy::random(shape, 2, 1.0, None, seed).unwrap()
    }

    fn pair(ctx: &[TokenId], w: &[TokenId], l: &[TokenId]) -> PreferencePair {
        let b = ScoreBreakdown {
            candidate_index: 1,
            mas_gap: 0.5,
            conf_penalty: 0.0,
            m3p_score: 0.5,
        };
        PreferencePair::new(
            Prompt::new("p", ctx.to_vec(), "").unwrap(),
            0,
            Candidate::new(w.to_vec(), -1.0).unwrap().with_mas(0.9).unwrap(),
            Candidate::new(l.to_vec(), -1.0).unwrap().with_mas(0.4).unwrap(),
            b,
        )
        .unwrap()
    }

    #[test]
    fn fresh_adapter_gives_ln2() {
        let p = policy(1);
        let r = ReferencePolicy::snapshot(&p);
        let batch = vec![pair(&[1, 2], &[3, 4], &[5]), pair(&[7], &[1], &[2, 2, 2])];
        assert!((dpo_batch_loss(&batch, &p, &r, 0.1).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let single = &batch[..1];
        let lp = pair_logps(&batch[0], &p, &r).unwrap();
        assert_eq!(dpo_batch_loss(single, &p, &r, 0.1).unwrap(), dpo_pair_loss(&lp, 0.1).unwrap());
        assert!(matches!(dpo_batch_loss(&[], &p, &r, 0.1), Err(Error::EmptyBatch)));
    }

    #[test]
    fn repeated_pair_batch_equals_single() {
        let mut p = policy(2);
        let r = ReferencePolicy::snapshot(&p);
        let mut rng = SeededRng::new(2);
        let params: Vec<f64> = p.adapter_params().iter().map(|v| v + 0.3 * rng.normal()).collect();
        p.set_adapter_params(&params);
        let one = pair(&[1, 2], &[3, 4], &[5]);
        let single = dpo_batch_loss(std::slice::from_ref(&one), &p, &r, 0.5).unwrap();
        let many = dpo_batch_loss(&vec![one; 7], &p, &r, 0.5).unwrap();
        assert!((single - many).abs() < 1e-15);
    }

    #[test]
    fn identical_responses_give_zero_gradient() {
        let mut p = policy(3);
        let r = ReferencePolicy::snapshot(&p);
        let mut rng = SeededRng::new(3);
        let params: Vec<f64> = p.adapter_params().iter().map(|v| v + 0.3 * rng.normal()).collect();
        p.set_adapter_params(&params);
        // Bypass the pair constructor: same tokens on both sides.
        let base = pair(&[1], &[3, 4], &[5]);
        let same = base.preferred().clone();
        let degenerate = base.force_dispreferred(same);
        let g = dpo_gradient(&[degenerate], &p, &r, 0.1).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn accuracy_ties_count_half() {
        let p = policy(4);
        let r = ReferencePolicy::snapshot(&p);
        let pairs = vec![pair(&[1], &[2], &[3]), pair(&[4], &[5, 6], &[7])];
        assert_eq!(evaluate_preference_accuracy(&pairs, &p, &r).unwrap(), 0.5);
        assert!(evaluate_preference_accuracy(&[], &p, &r).is_err());
    }

    fn dataset(pairs: Vec<PreferencePair>) -> PreferenceDataset {
        PreferenceDataset {
            fingerprint: "fp".into(),
            pairs,
            skipped: vec![],
        }
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let p = policy(5);
        let cfg = DpoParams {
            epochs: 0,
            ..Default::default()
        }
        .validate()
        .unwrap();
        let (out, report) = train(&dataset(vec![pair(&[1], &[2], &[3])]), &p, &cfg, FingerprintCheck::Override).unwrap();
        assert_eq!(out, p);
        assert!(report.losses.is_empty());
        assert_eq!(report.steps, 0);
    }

    #[test]
    fn fingerprint_guard() {
        let p = policy(6);
        let ds = dataset(vec![pair(&[1], &[2], &[3])]);
        let err = train(&ds, &p, &DpoConfig::default(), FingerprintCheck::Require("other")).unwrap_err();
        assert!(matches!(err, Error::FingerprintMismatch { .. }));
        assert!(train(&ds, &p, &DpoConfig::default(), FingerprintCheck::Require("fp")).is_ok());
    }

    #[test]
    fn training_memorizes_with_large_steps() {
        let p = policy(7);
        let pairs: Vec<PreferencePair> = (0..6)
            .map(|i| pair(&[1 + i as TokenId], &[2, (i % 3) as TokenId], &[8, 7]))
            .collect();
        let cfg = DpoParams {
            learning_rate: 2.0,
            epochs: 40,
            batch_size: 2,
            beta: 1.0,
            ..Default::default()
        }
        .validate()
        .unwrap();
        let (trained, report) = train(&dataset(pairs.clone()), &p, &cfg, FingerprintCheck::Override).unwrap();
        assert!((report.losses[0] - std::f64::consts::LN_2).abs() < 1e-9);
        let r = ReferencePolicy::snapshot(&p);
        assert_eq!(evaluate_preference_accuracy(&pairs, &trained, &r).unwrap(), 1.0);
        assert_eq!(trained.base(), p.base());
        assert!(report.losses.last().unwrap() < &report.losses[0]);
    }

    proptest! {
        #[test]
        fn loss_decreasing_in_margin(d in -50.0f64..50.0, step in 0.001f64..10.0, beta in 0.01f64..5.0) {
            let a = dpo_pair_loss(&lp(d), beta).unwrap();
            let b = dpo_pair_loss(&lp(d + step), beta).unwrap();
            prop_assert!(a > 0.0 && b > 0.0);
            prop_assert!(b < a);
            prop_assert!((a - softplus(-beta * d)).abs() < 1e-12);
        }

        #[test]
        fn doubling_beta_helps_positive_margins(d in 0.01f64..20.0, beta in 0.01f64..2.0) {
            prop_assert!(dpo_pair_loss(&lp(d), 2.0 * beta).unwrap() < dpo_pair_loss(&lp(d), beta).unwrap());
        }
    }
}
