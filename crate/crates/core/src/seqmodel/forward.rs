//! Differentiable forward pass expressed on a [`Graph`].

use super::params::{Bound, ModelParams};
use super::vocab::TokenId;
use crate::error::{Error, Result};
use crate::tensorcore::{Graph, NodeId, Scalar};

/// Final-norm hidden states `[len, d_model]` for `tokens`.
pub fn hidden_states<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    model: &'p ModelParams<T>,
    bound: &Bound,
    tokens: &[TokenId],
) -> Result<NodeId> {
    let cfg = &model.config;
    if tokens.len() > cfg.max_seq {
        return Err(Error::SequenceTooLong { len: tokens.len(), max: cfg.max_seq });
    }
    let lay = &model.layout;
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let tok = g.gather_rows(bound.node(lay.tok_emb), &ids)?;
    let pos = g.gather_rows(bound.node(lay.pos_emb), &positions)?;
    let mut x = g.add(tok, pos)?;
    for b in &lay.blocks {
        let h = g.layer_norm(x, bound.node(b.ln1_gain), bound.node(b.ln1_bias))?;
        let q = g.matmul(h, bound.node(b.w_q))?;
        let k = g.matmul(h, bound.node(b.w_k))?;
        let v = g.matmul(h, bound.node(b.w_v))?;
        let att = g.causal_attention(q, k, v, cfg.n_heads)?;
        let proj = g.matmul(att, bound.node(b.w_o))?;
        let proj = g.add_row(proj, bound.node(b.b_o))?;
        x = g.add(x, proj)?;

        let h = g.layer_norm(x, bound.node(b.ln2_gain), bound.node(b.ln2_bias))?;
        let up = g.matmul(h, bound.node(b.w_ff1))?;
        let up = g.add_row(up, bound.node(b.b_ff1))?;
        let act = g.gelu(up);
        let down = g.matmul(act, bound.node(b.w_ff2))?;
        let down = g.add_row(down, bound.node(b.b_ff2))?;
        x = g.add(x, down)?;
    }
    Ok(g.layer_norm(x, bound.node(lay.lnf_gain), bound.node(lay.lnf_bias))?)
}

/// Unit-norm embedding `[1, d_model]` read from row `position` of `hidden`.
pub fn embedding_at<T: Scalar>(g: &mut Graph<'_, T>, hidden: NodeId, position: usize) -> Result<NodeId> {
    let row = g.gather_rows(hidden, &[position])?;
    Ok(g.l2_normalize(row)?)
}

/// Log-probabilities `[n, 1]` of `tokens[start..]`, each predicted from the
/// hidden state one position earlier. Requires `start >= 1`.
pub fn continuation_logprobs<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    model: &'p ModelParams<T>,
    bound: &Bound,
    hidden: NodeId,
    tokens: &[TokenId],
    start: usize,
) -> Result<NodeId> {
    assert!(start >= 1, "the first token has no predicting state");
    let rows: Vec<usize> = (start - 1..tokens.len() - 1).collect();
    let targets: Vec<usize> = tokens[start..].iter().map(|&t| t as usize).collect();
    let lay = &model.layout;
    let h = g.gather_rows(hidden, &rows)?;
    let logits = g.matmul(h, bound.node(lay.w_out))?;
    let logits = g.add_row(logits, bound.node(lay.b_out))?;
    let lp = g.log_softmax(logits);
    Ok(g.pick(lp, &targets)?)
}
