//! Rewards for rewrite rollouts: template adherence, generative similarity
//! gap, and whether that gap beats the discriminative one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqmodel::{encode_disc, encode_gen, follows_rewrite_template, generate_rewrite, Embedding, ModelParams, RewriteRollout, TokenId};
use crate::tensorcore::{RngStream, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Rollouts sampled for the positive target.
    pub positive_rollouts: usize,
    /// In-group negative targets per query.
    pub negatives: usize,
    /// Rollouts sampled for each negative target.
    pub negative_rollouts: usize,
    /// Compare against the first negative only on the discriminative side.
    pub single_negative: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            positive_rollouts: 2,
            negatives: 2,
            negative_rollouts: 2,
            single_negative: false,
        }
    }
}

/// Everything needed to score rollouts of one query.
#[derive(Debug, Clone)]
pub struct RewardContext {
    pub query_input: Vec<TokenId>,
    pub query_disc: Embedding,
    pub positive_disc: Embedding,
    pub negative_disc: Vec<Embedding>,
    /// Generative embeddings of the positive target under its rollouts.
    pub positive_gen: Vec<Embedding>,
    /// Generative embeddings of all negative-target rollouts.
    pub negative_gen: Vec<Embedding>,
    pub single_negative: bool,
}

impl RewardContext {
    /// Builds a context by sampling fresh target rollouts from `model`.
    #[allow(clippy::too_many_arguments)]
    pub fn sample<T: Scalar>(
        model: &ModelParams<T>,
        query: &[TokenId],
        positive: &[TokenId],
        negatives: &[Vec<TokenId>],
        cfg: &RewardConfig,
        budget: usize,
        temperature: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let mut gen_of = |input: &[TokenId], n: usize| -> Result<Vec<Embedding>> {
            (0..n)
                .map(|_| {
                    let r = generate_rewrite(model, input, budget, temperature, rng)?;
                    encode_gen(model, input, &r.tokens)
                })
                .collect()
        };
        let positive_gen = gen_of(positive, cfg.positive_rollouts)?;
        let mut negative_gen = Vec::new();
        for n in negatives {
            negative_gen.extend(gen_of(n, cfg.negative_rollouts)?);
        }
        Ok(Self {
            query_input: query.to_vec(),
            query_disc: encode_disc(model, query)?,
            positive_disc: encode_disc(model, positive)?,
            negative_disc: negatives.iter().map(|n| encode_disc(model, n)).collect::<Result<_>>()?,
            positive_gen,
            negative_gen,
            single_negative: cfg.single_negative,
        })
    }

    /// `q·t⁺ − mean_j q·t⁻_j` on discriminative embeddings (first negative
    /// only in single-negative mode).
    pub fn disc_gap(&self) -> Result<f64> {
        let negs = if self.single_negative {
            &self.negative_disc[..self.negative_disc.len().min(1)]
        } else {
            &self.negative_disc[..]
        };
        if negs.is_empty() {
            return Err(Error::EmptyRolloutSet("negative"));
        }
        let neg = negs.iter().map(|n| self.query_disc.dot(n)).sum::<f64>() / negs.len() as f64;
        Ok(self.query_disc.dot(&self.positive_disc) - neg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: f64,
    pub gap: f64,
    pub process: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn new(format: f64, gap: f64, process: f64) -> Self {
        Self { format, gap, process, total: format + gap + process }
    }
}

/// 1 when the rollout follows `<think> w+ </think> suffix <eos>`.
pub fn format_reward(tokens: &[TokenId]) -> f64 {
    if follows_rewrite_template(tokens) {
        1.0
    } else {
        0.0
    }
}

fn mean_dot(q: &Embedding, set: &[Embedding]) -> Option<f64> {
    if set.is_empty() {
        None
    } else {
        Some(set.iter().map(|e| q.dot(e)).sum::<f64>() / set.len() as f64)
    }
}

/// Mean similarity to positive-target rollouts minus mean similarity to
/// negative-target rollouts, for the query's generative embedding.
pub fn gap_reward(ctx: &RewardContext, query_gen: &Embedding) -> Result<f64> {
    let pos = mean_dot(query_gen, &ctx.positive_gen).ok_or(Error::EmptyRolloutSet("positive"))?;
    let neg = mean_dot(query_gen, &ctx.negative_gen).ok_or(Error::EmptyRolloutSet("negative"))?;
    Ok(pos - neg)
}

/// 1 iff the generative gap strictly exceeds the discriminative gap.
pub fn process_reward(ctx: &RewardContext, gap_gen: f64) -> Result<f64> {
    Ok(if gap_gen > ctx.disc_gap()? { 1.0 } else { 0.0 })
}

/// Scores one query rollout.
pub fn total_reward<T: Scalar>(rollout: &RewriteRollout, ctx: &RewardContext, model: &ModelParams<T>) -> Result<RewardBreakdown> {
    let query_gen = encode_gen(model, &ctx.query_input, &rollout.tokens)?;
    let gap = gap_reward(ctx, &query_gen)?;
    let process = process_reward(ctx, gap)?;
    Ok(RewardBreakdown::new(format_reward(&rollout.tokens), gap, process))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodel::{special::*, EmbeddingMode};

    fn e(v: &[f64]) -> Embedding {
        Embedding::from_raw(v.to_vec(), EmbeddingMode::Gen).unwrap()
    }

    fn ctx(pos: Vec<Embedding>, neg: Vec<Embedding>) -> RewardContext {
        RewardContext {
            query_input: vec![BOS],
            query_disc: e(&[1.0, 0.0, 0.0]),
            positive_disc: e(&[1.0, 1.0, 0.0]),
            negative_disc: vec![e(&[0.0, 1.0, 0.0]), e(&[0.0, 0.0, 1.0])],
            positive_gen: pos,
            negative_gen: neg,
            single_negative: false,
        }
    }

    #[test]
    fn template_examples() {
        let w = 9;
        assert_eq!(format_reward(&[THINK_OPEN, w, THINK_CLOSE, ANSWER, EOS]), 1.0);
        assert_eq!(format_reward(&[]), 0.0);
        assert_eq!(format_reward(&[THINK_OPEN, w, ANSWER, EOS]), 0.0);
    }

    #[test]
    fn gap_examples() {
        let q = e(&[1.0, 0.0, 0.0]);
        let c = ctx(vec![e(&[1.0, 0.0, 0.0])], vec![e(&[0.0, 1.0, 0.0]), e(&[0.0, 0.0, 1.0])]);
        assert!((gap_reward(&c, &q).unwrap() - 1.0).abs() < 1e-15);
        let same = ctx(vec![e(&[0.3, 0.4, 0.5])], vec![e(&[0.3, 0.4, 0.5])]);
        assert_eq!(gap_reward(&same, &q).unwrap(), 0.0);
        // two positives, three negatives, hand-computed dot products
        let s = 0.5f64.sqrt();
        let c = ctx(
            vec![e(&[1.0, 0.0, 0.0]), e(&[s, s, 0.0])],
            vec![e(&[0.0, 1.0, 0.0]), e(&[-1.0, 0.0, 0.0]), e(&[s, 0.0, s])],
        );
        let expected = (1.0 + s) / 2.0 - (0.0 - 1.0 + s) / 3.0;
        assert!((gap_reward(&c, &q).unwrap() - expected).abs() < 1e-12);
        let empty = ctx(vec![], vec![e(&[1.0, 0.0, 0.0])]);
        assert!(matches!(gap_reward(&empty, &q), Err(Error::EmptyRolloutSet("positive"))));
    }

    #[test]
    fn process_is_strict() {
        let c = ctx(vec![], vec![]);
        let d = c.disc_gap().unwrap();
        assert!((d - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(process_reward(&c, d).unwrap(), 0.0);
        assert_eq!(process_reward(&c, d + 1e-9).unwrap(), 1.0);
        assert_eq!(process_reward(&c, -0.1).unwrap(), 0.0);
        let single = RewardContext { single_negative: true, ..c };
        assert!((single.disc_gap().unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn breakdown_extremes() {
        assert_eq!(RewardBreakdown::new(1.0, 1.0, 1.0).total, 3.0);
        assert_eq!(RewardBreakdown::new(0.0, -2.0, 0.0).total, -2.0);
    }
}
