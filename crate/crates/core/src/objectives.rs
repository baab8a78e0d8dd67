//! Supervised-stage losses.
//!
//! All contrastive terms share one shape: a `[N, d]` block of unit-norm query
//! embeddings scored against a `[N, d]` block of unit-norm target embeddings,
//! with row `i` of each forming the positive pair and every other row an
//! in-batch negative. The discriminative, generative and two cross-mode terms
//! differ only in which embedding blocks are fed in.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqmodel::{disc_sequence, forward, gen_sequence, special, Bound, ModelParams, TokenId};
use crate::tensorcore::{Array, Graph, NodeId, Scalar};

/// Source of the rewrite text that conditions generative embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenSource {
    /// Teacher-forced gold rewrites.
    Gold,
    /// Rollouts supplied with the batch.
    Rollout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Temperature shared by every contrastive term.
    pub tau: f64,
    /// Weight of the rewrite language-modeling loss.
    pub lambda: f64,
    /// Add the target-to-query direction to every contrastive term.
    pub symmetric: bool,
    /// Include the cross-mode terms in the contrastive total.
    pub use_intra: bool,
    pub gen_source: GenSource,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.02,
            lambda: 1.0,
            symmetric: false,
            use_intra: true,
            gen_source: GenSource::Gold,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::NonPositiveTemperature(self.tau));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::BadConfig(format!("lambda must be a finite non-negative number, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// One side of a training pair: raw input tokens and its gold rewrite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Side {
    pub input: Vec<TokenId>,
    pub gold: Vec<TokenId>,
}

/// Aligned query/target pairs drawn from one homogeneous group.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastBatch {
    pub group: u32,
    pub queries: Vec<Side>,
    pub targets: Vec<Side>,
    /// Sampled rewrites, needed only when generative embeddings are
    /// conditioned on rollouts instead of gold text.
    pub query_rollouts: Option<Vec<Vec<TokenId>>>,
    pub target_rollouts: Option<Vec<Vec<TokenId>>>,
}

impl ContrastBatch {
    pub fn new(group: u32, queries: Vec<Side>, targets: Vec<Side>) -> Self {
        Self {
            group,
            queries,
            targets,
            query_rollouts: None,
            target_rollouts: None,
        }
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Gold rewrite with padding removed.
fn content(gold: &[TokenId]) -> Vec<TokenId> {
    gold.iter().copied().filter(|&t| t != special::PAD).collect()
}

/// InfoNCE of `q` against `t` (row i ↔ row i), averaged over rows:
/// `-(1/N) Σ_i log softmax_j(q_i · t_j / τ)[i]`.
pub fn info_nce<T: Scalar>(g: &mut Graph<'_, T>, q: NodeId, t: NodeId, tau: f64, symmetric: bool) -> Result<NodeId> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    let (sq, st) = (g.shape(q), g.shape(t));
    if sq[1] != st[1] {
        return Err(Error::DimensionMismatch { left: sq[1], right: st[1] });
    }
    if sq[0] != st[0] {
        return Err(Error::DimensionMismatch { left: sq[0], right: st[0] });
    }
    let diag: Vec<usize> = (0..sq[0]).collect();
    let one_way = |g: &mut Graph<'_, T>, a: NodeId, b: NodeId| -> Result<NodeId> {
        let sim = g.matmul_nt(a, b)?;
        let logits = g.scale(sim, 1.0 / tau);
        let lp = g.log_softmax(logits);
        let picked = g.pick(lp, &diag)?;
        let m = g.mean(picked);
        Ok(g.neg(m))
    };
    let forward = one_way(g, q, t)?;
    if symmetric {
        let back = one_way(g, t, q)?;
        Ok(g.add(forward, back)?)
    } else {
        Ok(forward)
    }
}

/// Embedding blocks and rewrite log-likelihood for one batch.
#[derive(Debug, Clone, Copy)]
pub struct EncodedBatch {
    pub query_disc: NodeId,
    pub target_disc: NodeId,
    pub query_gen: NodeId,
    pub target_gen: NodeId,
    /// Sum over all supervised gold tokens of their log-probability.
    pub gold_logprob: NodeId,
    pub gold_tokens: usize,
}

/// Runs every forward pass a batch needs inside `g`.
///
/// Per item: one pass over `input <disc_emb>`, one over
/// `input rewrite <gen_emb>`; with gold conditioning the latter also supplies
/// the teacher-forced rewrite log-probabilities, otherwise a third pass over
/// the gold text does.
pub fn encode_batch<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    model: &'p ModelParams<T>,
    bound: &Bound,
    batch: &ContrastBatch,
    source: GenSource,
) -> Result<EncodedBatch> {
    if batch.queries.len() != batch.targets.len() {
        return Err(Error::DimensionMismatch { left: batch.queries.len(), right: batch.targets.len() });
    }
    let mut gold_terms = Vec::new();
    let mut gold_tokens = 0;
    let mut sides = |items: &[Side], rollouts: &Option<Vec<Vec<TokenId>>>, g: &mut Graph<'p, T>| -> Result<(NodeId, NodeId)> {
        let mut disc = Vec::with_capacity(items.len());
        let mut gen = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            let seq = disc_sequence(&item.input);
            let h = forward::hidden_states(g, model, bound, &seq)?;
            disc.push(forward::embedding_at(g, h, seq.len() - 1)?);

            let gold = content(&item.gold);
            let rewrite = match source {
                GenSource::Gold => gold.clone(),
                GenSource::Rollout => rollouts
                    .as_ref()
                    .and_then(|r| r.get(i))
                    .cloned()
                    .ok_or(Error::MissingRollout(i))?,
            };
            let seq = gen_sequence(&item.input, &rewrite);
            let h = forward::hidden_states(g, model, bound, &seq)?;
            gen.push(forward::embedding_at(g, h, seq.len() - 1)?);

            if gold.is_empty() {
                continue;
            }
            let lm_hidden = if source == GenSource::Gold {
                h
            } else {
                forward::hidden_states(g, model, bound, &gen_sequence(&item.input, &gold))?
            };
            let mut tokens = item.input.clone();
            tokens.extend_from_slice(&gold);
            let lp = forward::continuation_logprobs(g, model, bound, lm_hidden, &tokens, item.input.len())?;
            gold_terms.push(g.sum(lp));
            gold_tokens += gold.len();
        }
        Ok((g.stack_rows(&disc)?, g.stack_rows(&gen)?))
    };
    let (query_disc, query_gen) = sides(&batch.queries, &batch.query_rollouts, g)?;
    let (target_disc, target_gen) = sides(&batch.targets, &batch.target_rollouts, g)?;
    let gold_logprob = match gold_terms.split_first() {
        None => g.leaf(Array::scalar(T::zero())),
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = g.add(acc, t)?;
            }
            acc
        }
    };
    Ok(EncodedBatch {
        query_disc,
        target_disc,
        query_gen,
        target_gen,
        gold_logprob,
        gold_tokens,
    })
}

/// Discriminative contrastive loss.
pub fn disc_info_nce<T: Scalar>(g: &mut Graph<'_, T>, enc: &EncodedBatch, cfg: &LossConfig) -> Result<NodeId> {
    info_nce(g, enc.query_disc, enc.target_disc, cfg.tau, cfg.symmetric)
}

/// Generative contrastive loss.
pub fn gen_info_nce<T: Scalar>(g: &mut Graph<'_, T>, enc: &EncodedBatch, cfg: &LossConfig) -> Result<NodeId> {
    info_nce(g, enc.query_gen, enc.target_gen, cfg.tau, cfg.symmetric)
}

/// Cross-mode loss: disc queries against gen targets plus gen queries
/// against disc targets.
pub fn intra_mode_loss<T: Scalar>(g: &mut Graph<'_, T>, enc: &EncodedBatch, cfg: &LossConfig) -> Result<NodeId> {
    let a = info_nce(g, enc.query_disc, enc.target_gen, cfg.tau, cfg.symmetric)?;
    let b = info_nce(g, enc.query_gen, enc.target_disc, cfg.tau, cfg.symmetric)?;
    Ok(g.add(a, b)?)
}

/// Mean negative log-likelihood per gold rewrite token.
pub fn rewrite_lm_loss<T: Scalar>(g: &mut Graph<'_, T>, enc: &EncodedBatch) -> Result<NodeId> {
    if enc.gold_tokens == 0 {
        return Err(Error::EmptyGold);
    }
    Ok(g.scale(enc.gold_logprob, -1.0 / enc.gold_tokens as f64))
}

/// Loss nodes of one batch. `cm_total` and `joint` are built from the other
/// nodes by graph addition, so their values are exact sums.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub disc: NodeId,
    pub gen: NodeId,
    pub intra: NodeId,
    pub cm_total: NodeId,
    pub rewrite: NodeId,
    pub joint: NodeId,
}

/// Scalar values of a [`LossReport`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValues {
    pub disc: f64,
    pub gen: f64,
    pub intra: f64,
    pub cm_total: f64,
    pub rewrite: f64,
    pub joint: f64,
}

impl LossReport {
    pub fn values<T: Scalar>(&self, g: &Graph<'_, T>) -> LossValues {
        let v = |n| g.scalar(n).as_f64();
        LossValues {
            disc: v(self.disc),
            gen: v(self.gen),
            intra: v(self.intra),
            cm_total: v(self.cm_total),
            rewrite: v(self.rewrite),
            joint: v(self.joint),
        }
    }
}

impl LossValues {
    pub fn is_finite(&self) -> bool {
        [self.disc, self.gen, self.intra, self.cm_total, self.rewrite, self.joint]
            .iter()
            .all(|v| v.is_finite())
    }

    fn accumulate(&mut self, other: &LossValues, w: f64) {
        self.disc += w * other.disc;
        self.gen += w * other.gen;
        self.intra += w * other.intra;
        self.cm_total += w * other.cm_total;
        self.rewrite += w * other.rewrite;
        self.joint += w * other.joint;
    }
}

/// Contrastive total (`disc + gen [+ intra]`) from already built terms.
pub fn cm_info_nce<T: Scalar>(g: &mut Graph<'_, T>, disc: NodeId, gen: NodeId, intra: NodeId, use_intra: bool) -> Result<NodeId> {
    let two = g.add(disc, gen)?;
    if use_intra {
        Ok(g.add(two, intra)?)
    } else {
        Ok(two)
    }
}

/// `λ · rewrite + cm_total` with all components.
pub fn joint_loss<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    model: &'p ModelParams<T>,
    bound: &Bound,
    batch: &ContrastBatch,
    cfg: &LossConfig,
) -> Result<LossReport> {
    cfg.validate()?;
    let enc = encode_batch(g, model, bound, batch, cfg.gen_source)?;
    let disc = disc_info_nce(g, &enc, cfg)?;
    let gen = gen_info_nce(g, &enc, cfg)?;
    let intra = intra_mode_loss(g, &enc, cfg)?;
    let cm_total = cm_info_nce(g, disc, gen, intra, cfg.use_intra)?;
    let rewrite = rewrite_lm_loss(g, &enc)?;
    let weighted = g.scale(rewrite, cfg.lambda);
    let joint = g.add(weighted, cm_total)?;
    Ok(LossReport { disc, gen, intra, cm_total, rewrite, joint })
}

/// Joint loss value and parameter gradients for one batch.
pub fn joint_gradients<T: Scalar>(
    model: &ModelParams<T>,
    batch: &ContrastBatch,
    cfg: &LossConfig,
) -> Result<(LossValues, Vec<Array<T>>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let report = joint_loss(&mut g, model, &bound, batch, cfg)?;
    let grads = g.backward(report.joint)?;
    Ok((report.values(&g), grads.param_grads(&model.store)))
}

/// Teacher-forced rewrite loss alone (mean NLL per gold token) and its
/// gradients, for warming up the generator before joint training.
pub fn rewrite_gradients<T: Scalar>(model: &ModelParams<T>, sides: &[Side]) -> Result<(f64, Vec<Array<T>>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let mut total: Option<NodeId> = None;
    let mut count = 0;
    for side in sides {
        let gold = content(&side.gold);
        if gold.is_empty() {
            continue;
        }
        let h = forward::hidden_states(&mut g, model, &bound, &gen_sequence(&side.input, &gold))?;
        let mut tokens = side.input.clone();
        tokens.extend_from_slice(&gold);
        let lp = forward::continuation_logprobs(&mut g, model, &bound, h, &tokens, side.input.len())?;
        let s = g.sum(lp);
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
        count += gold.len();
    }
    let total = total.ok_or(Error::EmptyGold)?;
    let loss = g.scale(total, -1.0 / count as f64);
    let value = g.scalar(loss).as_f64();
    let grads = g.backward(loss)?.param_grads(&model.store);
    Ok((value, grads))
}

/// Averages loss values and gradients over micro-batches (gradient
/// accumulation). Micro-batches are evaluated in parallel; the reduction
/// runs in batch order, so the result is independent of thread count.
pub fn accumulated_gradients<T: Scalar>(
    model: &ModelParams<T>,
    batches: &[ContrastBatch],
    cfg: &LossConfig,
) -> Result<(LossValues, Vec<Array<T>>)> {
    if batches.is_empty() {
        return Err(Error::BadConfig("no micro-batches to accumulate".into()));
    }
    let parts: Vec<(LossValues, Vec<Array<T>>)> =
        batches.par_iter().map(|b| joint_gradients(model, b, cfg)).collect::<Result<_>>()?;
    let w = 1.0 / parts.len() as f64;
    let mut values = LossValues::default();
    let mut total = model.store.zeros_like();
    for (v, grads) in &parts {
        values.accumulate(v, w);
        for (acc, gr) in total.iter_mut().zip(grads) {
            acc.add_assign(gr);
        }
    }
    if parts.len() > 1 {
        for acc in &mut total {
            acc.scale_assign(T::of(w));
        }
    }
    Ok((values, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodel::{ModelConfig, Vocab};
    use crate::tensorcore::grad_check;

    fn leaf(g: &mut Graph<'_, f64>, rows: &[&[f64]]) -> NodeId {
        g.leaf(Array::from_rows(rows).unwrap())
    }

    #[test]
    fn orthogonal_pair_closed_form() {
        let mut g = Graph::<f64>::new();
        let q = leaf(&mut g, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let t = leaf(&mut g, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let l = info_nce(&mut g, q, t, 1.0, false).unwrap();
        let e = std::f64::consts::E;
        assert!((g.scalar(l) - -(e / (e + 1.0)).ln()).abs() < 1e-9);
        assert!((g.scalar(l) - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn identical_rows_give_log_n() {
        let mut g = Graph::<f64>::new();
        let row: &[f64] = &[0.6, 0.8];
        let q = leaf(&mut g, &[row, row, row]);
        let l = info_nce(&mut g, q, q, 0.02, false).unwrap();
        assert!((g.scalar(l) - 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn argument_errors() {
        let mut g = Graph::<f64>::new();
        let q = leaf(&mut g, &[&[1.0, 0.0]]);
        let t = leaf(&mut g, &[&[1.0, 0.0, 0.0]]);
        assert!(matches!(info_nce(&mut g, q, q, 0.0, false), Err(Error::NonPositiveTemperature(_))));
        assert!(matches!(info_nce(&mut g, q, t, 1.0, false), Err(Error::DimensionMismatch { .. })));
    }

    fn toy() -> ModelParams<f64> {
        let vocab = Vocab::new((0..6).map(|i| format!("s{i}")).collect()).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 8,
            max_seq: 16,
        };
        ModelParams::init(&cfg, &vocab, 3).unwrap()
    }

    fn side(content: &[TokenId]) -> Side {
        let mut input = vec![special::BOS];
        input.extend_from_slice(content);
        let mut gold = vec![special::THINK_OPEN];
        gold.extend(content.iter().rev());
        gold.extend([special::THINK_CLOSE, special::ANSWER, special::EOS]);
        Side { input, gold }
    }

    fn batch() -> ContrastBatch {
        ContrastBatch::new(0, vec![side(&[8, 9]), side(&[10, 11])], vec![side(&[12, 8]), side(&[13, 10])])
    }

    #[test]
    fn components_compose_exactly() {
        let m = toy();
        for use_intra in [true, false] {
            let cfg = LossConfig { use_intra, lambda: 0.7, ..LossConfig::default() };
            let mut g = Graph::new();
            let bound = m.bind(&mut g);
            let r = joint_loss(&mut g, &m, &bound, &batch(), &cfg).unwrap();
            let v = r.values(&g);
            let intra = if use_intra { v.intra } else { 0.0 };
            assert_eq!(v.cm_total, v.disc + v.gen + intra);
            assert_eq!(v.joint, 0.7 * v.rewrite + v.cm_total);
        }
        let cfg = LossConfig { lambda: 0.0, ..LossConfig::default() };
        let (v, _) = joint_gradients(&m, &batch(), &cfg).unwrap();
        assert_eq!(v.joint, v.cm_total);
    }

    #[test]
    fn joint_gradient_matches_differences() {
        let base = toy();
        let cfg = LossConfig { tau: 0.5, ..LossConfig::default() };
        let b = batch();
        let flat = base.store.flatten();
        let coords: Vec<usize> = (0..flat.len()).step_by(7).collect();
        let report = grad_check(
            |x| {
                let mut m = base.clone();
                m.store.assign_flat(x)?;
                let (v, grads) = joint_gradients(&m, &b, &cfg).map_err(|e| crate::tensorcore::TensorError::Invalid(e.to_string()))?;
                Ok((v.joint, grads.iter().flat_map(|a| a.data().to_vec()).collect()))
            },
            &flat,
            1e-5,
            Some(&coords),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn padding_is_not_supervised() {
        let m = toy();
        let cfg = LossConfig::default();
        let (a, _) = joint_gradients(&m, &batch(), &cfg).unwrap();
        let mut padded = batch();
        padded.queries[0].gold.extend([special::PAD, special::PAD]);
        let (b, _) = joint_gradients(&m, &padded, &cfg).unwrap();
        assert_eq!(a.rewrite, b.rewrite);
    }

    #[test]
    fn rollout_conditioning_requires_rollouts() {
        let m = toy();
        let cfg = LossConfig { gen_source: GenSource::Rollout, ..LossConfig::default() };
        assert!(matches!(joint_gradients(&m, &batch(), &cfg), Err(Error::MissingRollout(0))));
        let mut b = batch();
        b.query_rollouts = Some(vec![vec![]; 2]);
        b.target_rollouts = Some(vec![vec![]; 2]);
        let (v, _) = joint_gradients(&m, &b, &cfg).unwrap();
        assert!(v.is_finite());
    }
}
