//! Group-relative policy optimization over rewrite rollouts.
//!
//! For each query, `K` rewrites are sampled from the current policy, scored,
//! and turned into group-normalized advantages. The update maximizes
//!
//! ```text
//! mean_k [ min(r_k A_k, clip(r_k, 1-ε, 1+ε) A_k) - β KL_k ]
//! ```
//!
//! where `r_k` is the sequence-level ratio `exp(Σ log π_θ - Σ log π_old)` and
//! `KL_k` averages `exp(lr) - lr - 1`, `lr = log π_ref - log π_θ`, over the
//! rollout's tokens.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rewards::{total_reward, RewardBreakdown, RewardConfig, RewardContext};
use crate::seqmodel::{forward, generate_rewrite, rollout_logprob, Bound, ModelParams, RewriteRollout, TokenId, DEFAULT_BUDGET};
use crate::tensorcore::{mix_stream, Array, Graph, NodeId, Optimizer, RngStream, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    /// Rollouts per query.
    pub k: usize,
    pub epsilon: f64,
    pub beta: f64,
    pub advantage_eps: f64,
    pub lr: f64,
    pub steps: u64,
    /// Queries (groups) per optimizer step.
    pub queries_per_step: usize,
    pub budget: usize,
    /// Sampling temperature for rollouts; log-probs are always untempered.
    pub temperature: f64,
    /// Run one joint (contrastive + rewrite) step every this many RL steps;
    /// 0 keeps the stage purely on the policy objective.
    pub interleave_joint: u64,
    pub reward: RewardConfig,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            k: 8,
            epsilon: 0.2,
            beta: 0.04,
            advantage_eps: 1e-8,
            lr: 5e-6,
            steps: 200,
            queries_per_step: 4,
            budget: DEFAULT_BUDGET,
            temperature: 1.0,
            interleave_joint: 0,
            reward: RewardConfig::default(),
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::GroupTooSmallK(self.k));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::BadConfig(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::BadConfig(format!("beta must be non-negative, got {}", self.beta)));
        }
        if !(self.advantage_eps >= 0.0) {
            return Err(Error::BadConfig("advantage_eps must be non-negative".into()));
        }
        if self.queries_per_step == 0 {
            return Err(Error::BadConfig("queries_per_step must be positive".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::NonPositiveTemperature(self.temperature));
        }
        Ok(())
    }
}

/// K rollouts of one query with everything the update needs.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGroup {
    pub query: Vec<TokenId>,
    /// Rollouts with their old-policy log-probs.
    pub rollouts: Vec<RewriteRollout>,
    pub rewards: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
    pub ref_logprobs: Vec<Vec<f64>>,
}

/// Samples `k` independent rollouts; rewards, advantages and reference
/// log-probs are left empty.
pub fn sample_group<T: Scalar>(
    old: &ModelParams<T>,
    query: &[TokenId],
    k: usize,
    budget: usize,
    temperature: f64,
    rng: &mut RngStream,
) -> Result<PolicyGroup> {
    if k < 2 {
        return Err(Error::GroupTooSmallK(k));
    }
    let rollouts = (0..k)
        .map(|_| generate_rewrite(old, query, budget, temperature, rng))
        .collect::<Result<_>>()?;
    Ok(PolicyGroup {
        query: query.to_vec(),
        rollouts,
        rewards: Vec::new(),
        advantages: Vec::new(),
        ref_logprobs: Vec::new(),
    })
}

/// `(R_k - mean R) / (std R + eps)` with the population standard deviation.
pub fn advantages(rewards: &[f64], eps: f64) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    // A constant group carries no preference. Its float mean can miss the
    // common value by an ulp, which `eps` would not fully absorb.
    if rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    rewards.iter().map(|r| (r - mean) / (std + eps)).collect()
}

/// Clipped surrogate for one rollout given its ratio, on plain numbers.
pub fn clipped_term(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage)
}

/// Per-token KL estimate `exp(lr) - lr - 1` averaged over tokens.
pub fn kl_estimate(policy: &[f64], reference: &[f64]) -> f64 {
    if policy.is_empty() {
        return 0.0;
    }
    let total: f64 = policy
        .iter()
        .zip(reference)
        .map(|(p, r)| {
            let lr = r - p;
            lr.exp() - lr - 1.0
        })
        .sum();
    total / policy.len() as f64
}

/// Graph nodes and diagnostics of the policy loss.
#[derive(Debug, Clone)]
pub struct GrpoTerms {
    /// Negated objective (minimize this).
    pub loss: NodeId,
    pub surrogate: f64,
    pub kl: f64,
    /// Fraction of rollouts whose ratio fell outside `[1-ε, 1+ε]`.
    pub clip_fraction: f64,
    /// Per-rollout surrogate values, in group order.
    pub terms: Vec<f64>,
}

pub fn grpo_loss<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    model: &'p ModelParams<T>,
    bound: &Bound,
    groups: &[PolicyGroup],
    cfg: &RlConfig,
) -> Result<GrpoTerms> {
    let mut objective_terms = Vec::new();
    let mut terms = Vec::new();
    let (mut kl_total, mut clipped, mut count) = (0.0, 0usize, 0usize);
    for (gi, group) in groups.iter().enumerate() {
        if group.advantages.len() != group.rollouts.len() || group.ref_logprobs.len() != group.rollouts.len() {
            return Err(Error::StaleGroup(gi));
        }
        for ((rollout, &adv), reference) in group.rollouts.iter().zip(&group.advantages).zip(&group.ref_logprobs) {
            if rollout.logprobs.len() != rollout.tokens.len() || reference.len() != rollout.tokens.len() {
                return Err(Error::StaleGroup(gi));
            }
            count += 1;
            if rollout.tokens.is_empty() {
                // Empty rollout: ratio is exactly 1 and there are no tokens
                // to regularize; the term is a constant.
                terms.push(clipped_term(1.0, adv, cfg.epsilon));
                let c = g.leaf(Array::scalar(T::of(terms[terms.len() - 1])));
                objective_terms.push(c);
                continue;
            }
            let mut seq = group.query.clone();
            seq.extend_from_slice(&rollout.tokens);
            let h = forward::hidden_states(g, model, bound, &seq)?;
            let lp = forward::continuation_logprobs(g, model, bound, h, &seq, group.query.len())?;
            let total = g.sum(lp);
            let shifted = g.add_scalar(total, -rollout.total_logprob());
            let ratio = g.exp(shifted);
            let r = g.scalar(ratio).as_f64();
            if r < 1.0 - cfg.epsilon || r > 1.0 + cfg.epsilon {
                clipped += 1;
            }
            let plain = g.scale(ratio, adv);
            let clamp = g.clamp(ratio, 1.0 - cfg.epsilon, 1.0 + cfg.epsilon);
            let clamp = g.scale(clamp, adv);
            let term = g.minimum(plain, clamp)?;
            terms.push(g.scalar(term).as_f64());

            let ref_leaf = g.leaf(Array::new(reference.len(), 1, reference.iter().map(|&v| T::of(v)).collect())?);
            let lr = g.sub(ref_leaf, lp)?;
            let e = g.exp(lr);
            let d = g.sub(e, lr)?;
            let d = g.add_scalar(d, -1.0);
            let kl = g.mean(d);
            kl_total += g.scalar(kl).as_f64();
            let penalty = g.scale(kl, cfg.beta);
            objective_terms.push(g.sub(term, penalty)?);
        }
    }
    if count == 0 {
        return Err(Error::EmptyRolloutSet("policy"));
    }
    let mut acc = objective_terms[0];
    for &t in &objective_terms[1..] {
        acc = g.add(acc, t)?;
    }
    let loss = g.scale(acc, -1.0 / count as f64);
    Ok(GrpoTerms {
        loss,
        surrogate: terms.iter().sum::<f64>() / count as f64,
        kl: kl_total / count as f64,
        clip_fraction: clipped as f64 / count as f64,
        terms,
    })
}

/// One query for the RL stage: its input, its positive target, and
/// in-group negative targets.
#[derive(Debug, Clone, PartialEq)]
pub struct RlQuery {
    pub query: Vec<TokenId>,
    pub positive: Vec<TokenId>,
    pub negatives: Vec<Vec<TokenId>>,
}

/// Samples, scores and normalizes one group per query. Each query draws from
/// its own stream `(seed, mix(step, index))`, so results do not depend on
/// thread scheduling.
pub fn collect_groups<T: Scalar>(
    policy: &ModelParams<T>,
    reference: &ModelParams<T>,
    queries: &[RlQuery],
    cfg: &RlConfig,
    seed: u64,
    step: u64,
) -> Result<Vec<PolicyGroup>> {
    cfg.validate()?;
    queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let mut rng = RngStream::new(seed, mix_stream(0x52_4C, &[step, i as u64]));
            let ctx = RewardContext::sample(
                policy,
                &q.query,
                &q.positive,
                &q.negatives,
                &cfg.reward,
                cfg.budget,
                cfg.temperature,
                &mut rng,
            )?;
            let mut group = sample_group(policy, &q.query, cfg.k, cfg.budget, cfg.temperature, &mut rng)?;
            group.rewards = group
                .rollouts
                .iter()
                .map(|r| total_reward(r, &ctx, policy))
                .collect::<Result<_>>()?;
            let totals: Vec<f64> = group.rewards.iter().map(|r| r.total).collect();
            group.advantages = advantages(&totals, cfg.advantage_eps);
            group.ref_logprobs = group
                .rollouts
                .iter()
                .map(|r| rollout_logprob(reference, &q.query, &r.tokens))
                .collect::<Result<_>>()?;
            Ok(group)
        })
        .collect()
}

/// Telemetry of one policy update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub k: usize,
    pub mean_reward: f64,
    pub mean_format: f64,
    pub mean_gap: f64,
    pub mean_process: f64,
    pub mean_advantage: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub mean_len: f64,
    pub grad_norm: f64,
    /// Largest `|term| / ((1+ε)|A|)` over rollouts with nonzero advantage.
    pub max_clip_ratio: f64,
}

/// One optimizer step on the policy loss of `groups`.
pub fn rl_step<T: Scalar>(
    model: &mut ModelParams<T>,
    optimizer: &mut Optimizer<T>,
    groups: &[PolicyGroup],
    cfg: &RlConfig,
    step: u64,
) -> Result<StepReport> {
    let (terms, grads) = {
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let terms = grpo_loss(&mut g, model, &bound, groups, cfg)?;
        let loss = g.scalar(terms.loss).as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, detail: format!("policy loss {loss}") });
        }
        let grads = g.backward(terms.loss)?.param_grads(&model.store);
        (terms, grads)
    };
    let grad_norm = optimizer.step(&mut model.store, &grads)?;
    let all: Vec<&RewardBreakdown> = groups.iter().flat_map(|g| &g.rewards).collect();
    let n = all.len().max(1) as f64;
    let mean = |f: fn(&RewardBreakdown) -> f64| all.iter().map(|r| f(r)).sum::<f64>() / n;
    let advs: Vec<f64> = groups.iter().flat_map(|g| g.advantages.iter().copied()).collect();
    let lens: Vec<usize> = groups.iter().flat_map(|g| g.rollouts.iter().map(|r| r.len())).collect();
    let max_clip_ratio = terms
        .terms
        .iter()
        .zip(&advs)
        .filter(|(_, a)| **a != 0.0)
        .map(|(t, a)| t.abs() / ((1.0 + cfg.epsilon) * a.abs()))
        .fold(0.0, f64::max);
    Ok(StepReport {
        step,
        k: groups.first().map_or(0, |g| g.rollouts.len()),
        mean_reward: mean(|r| r.total),
        mean_format: mean(|r| r.format),
        mean_gap: mean(|r| r.gap),
        mean_process: mean(|r| r.process),
        mean_advantage: advs.iter().sum::<f64>() / advs.len().max(1) as f64,
        surrogate: terms.surrogate,
        kl: terms.kl,
        clip_fraction: terms.clip_fraction,
        mean_len: lens.iter().sum::<usize>() as f64 / lens.len().max(1) as f64,
        grad_norm,
        max_clip_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodel::{special, ModelConfig, Vocab};
    use crate::tensorcore::{grad_check, OptimizerConfig, TensorError};

    #[test]
    fn advantage_examples() {
        assert_eq!(advantages(&[2.0, 2.0, 2.0], 1e-8), vec![0.0; 3]);
        assert_eq!(advantages(&[0.0, 2.0], 0.0), vec![-1.0, 1.0]);
        let a = advantages(&[0.3, 1.7, -0.2, 2.5], 1e-8);
        let b = advantages(&[5.3, 6.7, 4.8, 7.5], 1e-8);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_arithmetic() {
        assert_eq!(clipped_term(10.0, 2.0, 0.2), 1.2 * 2.0);
        assert_eq!(clipped_term(1.0, -0.5, 0.2), -0.5);
        assert_eq!(clipped_term(0.1, -1.0, 0.2), -0.8);
        assert_eq!(kl_estimate(&[-1.0, -2.0], &[-1.0, -2.0]), 0.0);
    }

    fn toy() -> ModelParams<f64> {
        let vocab = Vocab::new((0..5).map(|i| format!("r{i}")).collect()).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 8,
            max_seq: 24,
        };
        ModelParams::init(&cfg, &vocab, 11).unwrap()
    }

    fn scored_group(m: &ModelParams<f64>, advs: Vec<f64>, seed: u64) -> PolicyGroup {
        let q = vec![special::BOS, 8, 9];
        let mut g = sample_group(m, &q, advs.len(), 6, 1.0, &mut RngStream::new(seed, 0)).unwrap();
        g.ref_logprobs = g.rollouts.iter().map(|r| rollout_logprob(m, &q, &r.tokens).unwrap()).collect();
        g.rewards = advs.iter().map(|_| RewardBreakdown::new(0.0, 0.0, 0.0)).collect();
        g.advantages = advs;
        g
    }

    #[test]
    fn group_size_must_be_two() {
        let m = toy();
        assert!(matches!(
            sample_group(&m, &[special::BOS], 1, 4, 1.0, &mut RngStream::new(0, 0)),
            Err(Error::GroupTooSmallK(1))
        ));
    }

    #[test]
    fn on_policy_values() {
        let m = toy();
        let group = scored_group(&m, vec![0.5, -1.0, 0.25, 0.25], 1);
        let cfg = RlConfig { beta: 0.0, ..RlConfig::default() };
        let mut g = Graph::new();
        let bound = m.bind(&mut g);
        let t = grpo_loss(&mut g, &m, &bound, &[group], &cfg).unwrap();
        assert!((g.scalar(t.loss) - -0.0).abs() < 1e-10);
        assert!(t.kl.abs() < 1e-10);
        assert_eq!(t.clip_fraction, 0.0);
    }

    #[test]
    fn zero_advantage_zero_beta_gives_zero_gradient() {
        let mut m = toy();
        let before = m.clone();
        let group = scored_group(&m, vec![0.0; 4], 2);
        let cfg = RlConfig { beta: 0.0, ..RlConfig::default() };
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.5), &m.store);
        let report = rl_step(&mut m, &mut opt, &[group], &cfg, 0).unwrap();
        assert_eq!(report.grad_norm, 0.0);
        assert_eq!(m, before);
    }

    #[test]
    fn policy_gradient_matches_differences() {
        let base = toy();
        let mut group = scored_group(&base, vec![1.0, -0.5, 0.8], 3);
        // Perturb the old and reference log-probs so ratios and KL are
        // away from their trivial values.
        for (i, r) in group.rollouts.iter_mut().enumerate() {
            r.logprobs.iter_mut().for_each(|l| *l -= 0.01 * (i as f64 + 1.0));
        }
        for rl in &mut group.ref_logprobs {
            rl.iter_mut().for_each(|l| *l += 0.05);
        }
        let cfg = RlConfig { beta: 0.5, epsilon: 0.5, ..RlConfig::default() };
        let flat = base.store.flatten();
        let coords: Vec<usize> = (0..flat.len()).step_by(5).collect();
        let report = grad_check(
            |x| {
                let mut m = base.clone();
                m.store.assign_flat(x)?;
                let mut g = Graph::new();
                let bound = m.bind(&mut g);
                let t = grpo_loss(&mut g, &m, &bound, std::slice::from_ref(&group), &cfg)
                    .map_err(|e| TensorError::Invalid(e.to_string()))?;
                let grads = g.backward(t.loss)?.param_grads(&m.store);
                Ok((g.scalar(t.loss), grads.iter().flat_map(|a| a.data().to_vec()).collect()))
            },
            &flat,
            1e-5,
            Some(&coords),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
