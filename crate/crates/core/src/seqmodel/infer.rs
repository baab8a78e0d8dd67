//! Graph-free incremental decoder with a per-layer key/value cache.
//!
//! Produces the same numbers as the graph forward pass (up to summation
//! order inside matrix products) without recording a tape, which makes
//! generation, encoding and log-probability scoring cheap and shareable
//! across threads.

use super::params::ModelParams;
use super::vocab::TokenId;
use crate::error::{Error, Result};
use crate::tensorcore::kernels::{dot, gelu, layer_norm_row, matmul, softmax_row};
use crate::tensorcore::{Array, Scalar};

pub(crate) struct Decoder<'m, T: Scalar> {
    model: &'m ModelParams<T>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

fn norm_affine<T: Scalar>(x: &Array<T>, gain: &Array<T>, bias: &Array<T>) -> Array<T> {
    let mut out = Array::zeros(x.rows(), x.cols());
    let (g, b) = (gain.data(), bias.data());
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        layer_norm_row(x.row(i), row);
        for (j, o) in row.iter_mut().enumerate() {
            *o = *o * g[j] + b[j];
        }
    }
    out
}

fn add_bias<T: Scalar>(x: &mut Array<T>, bias: &Array<T>) {
    let b = bias.data();
    for i in 0..x.rows() {
        for (o, &v) in x.row_mut(i).iter_mut().zip(b) {
            *o = *o + v;
        }
    }
}

impl<'m, T: Scalar> Decoder<'m, T> {
    pub fn new(model: &'m ModelParams<T>) -> Self {
        let layers = model.config.n_layers;
        Self {
            model,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            len: 0,
        }
    }

    /// Appends `tokens` and returns their final-norm hidden states.
    pub fn feed(&mut self, tokens: &[TokenId]) -> Result<Array<T>> {
        let m = self.model;
        let cfg = &m.config;
        let total = self.len + tokens.len();
        if total > cfg.max_seq {
            return Err(Error::SequenceTooLong { len: total, max: cfg.max_seq });
        }
        let d = cfg.d_model;
        let lay = &m.layout;
        let (tok, pos) = (m.get(lay.tok_emb), m.get(lay.pos_emb));
        let mut x = Array::zeros(tokens.len(), d);
        for (i, &t) in tokens.iter().enumerate() {
            let (e, p) = (tok.row(t as usize), pos.row(self.len + i));
            for (j, o) in x.row_mut(i).iter_mut().enumerate() {
                *o = e[j] + p[j];
            }
        }
        let heads = cfg.n_heads;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut scores = vec![T::zero(); total];
        let mut probs = vec![T::zero(); total];
        for (l, b) in lay.blocks.iter().enumerate() {
            let h = norm_affine(&x, m.get(b.ln1_gain), m.get(b.ln1_bias));
            let q = matmul(&h, false, m.get(b.w_q), false);
            let k = matmul(&h, false, m.get(b.w_k), false);
            let v = matmul(&h, false, m.get(b.w_v), false);
            self.keys[l].extend_from_slice(k.data());
            self.values[l].extend_from_slice(v.data());
            let (kc, vc) = (&self.keys[l], &self.values[l]);
            let mut att = Array::zeros(tokens.len(), d);
            for i in 0..tokens.len() {
                let p = self.len + i;
                for hd in 0..heads {
                    let off = hd * dh;
                    let qi = &q.row(i)[off..off + dh];
                    for j in 0..=p {
                        scores[j] = dot(qi, &kc[j * d + off..j * d + off + dh]) * scale;
                    }
                    softmax_row(&scores[..=p], &mut probs[..=p]);
                    let orow = &mut att.row_mut(i)[off..off + dh];
                    for (j, &pj) in probs[..=p].iter().enumerate() {
                        for (o, &val) in orow.iter_mut().zip(&vc[j * d + off..j * d + off + dh]) {
                            *o = *o + pj * val;
                        }
                    }
                }
            }
            let mut proj = matmul(&att, false, m.get(b.w_o), false);
            add_bias(&mut proj, m.get(b.b_o));
            x.add_assign(&proj);

            let h = norm_affine(&x, m.get(b.ln2_gain), m.get(b.ln2_bias));
            let mut up = matmul(&h, false, m.get(b.w_ff1), false);
            add_bias(&mut up, m.get(b.b_ff1));
            let act = up.map(gelu);
            let mut down = matmul(&act, false, m.get(b.w_ff2), false);
            add_bias(&mut down, m.get(b.b_ff2));
            x.add_assign(&down);
        }
        self.len = total;
        Ok(norm_affine(&x, m.get(lay.lnf_gain), m.get(lay.lnf_bias)))
    }

    /// Output logits for one final-norm hidden row.
    pub fn logits(&self, hidden: &[T]) -> Vec<T> {
        let lay = &self.model.layout;
        let w = self.model.get(lay.w_out);
        let mut out = self.model.get(lay.b_out).data().to_vec();
        for (k, &h) in hidden.iter().enumerate() {
            for (o, &wv) in out.iter_mut().zip(w.row(k)) {
                *o = *o + h * wv;
            }
        }
        out
    }
}
