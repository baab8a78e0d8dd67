//! Tiny shared-parameter autoregressive model.
//!
//! One parameter set serves three roles: it writes rewrites token by token,
//! it embeds an input directly (read at a trailing `<disc_emb>` token), and
//! it embeds an input together with a rewrite (read at a trailing
//! `<gen_emb>` token). Embeddings are the special token's own final hidden
//! state, L2-normalized.

pub mod checkpoint;
pub mod forward;
mod infer;
mod params;
pub mod vocab;

pub use params::{BlockIds, Bound, Layout, ModelConfig, ModelParams};
pub use vocab::{follows_rewrite_template, special, TokenId, Vocab, ANSWER_SUFFIX};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::kernels::log_softmax_row;
use crate::tensorcore::{RngStream, Scalar, TensorError, MIN_NORM};
use infer::Decoder;

/// Default number of tokens a rewrite may use.
pub const DEFAULT_BUDGET: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    Disc,
    Gen,
}

impl EmbeddingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingMode::Disc => "disc",
            EmbeddingMode::Gen => "gen",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            EmbeddingMode::Disc => 0,
            EmbeddingMode::Gen => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(EmbeddingMode::Disc),
            1 => Some(EmbeddingMode::Gen),
            _ => None,
        }
    }
}

impl std::str::FromStr for EmbeddingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disc" => Ok(EmbeddingMode::Disc),
            "gen" => Ok(EmbeddingMode::Gen),
            other => Err(Error::BadConfig(format!("unknown embedding mode {other:?}"))),
        }
    }
}

/// Unit-norm vector tagged with the mode that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub mode: EmbeddingMode,
    pub item: Option<u32>,
}

impl Embedding {
    /// Normalizes `raw`; fails on a (near-)zero vector.
    pub fn from_raw(raw: Vec<f64>, mode: EmbeddingMode) -> Result<Self> {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm.is_nan() || norm < MIN_NORM {
            return Err(TensorError::DegenerateNorm { row: 0, norm }.into());
        }
        Ok(Self {
            vector: raw.into_iter().map(|v| v / norm).collect(),
            mode,
            item: None,
        })
    }

    pub fn with_item(mut self, item: u32) -> Self {
        self.item = Some(item);
        self
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum()
    }
}

/// A generated rewrite with per-token log-probabilities of the
/// temperature-1 policy that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteRollout {
    pub tokens: Vec<TokenId>,
    pub logprobs: Vec<f64>,
    pub format_ok: bool,
}

impl RewriteRollout {
    pub fn from_tokens(tokens: Vec<TokenId>, logprobs: Vec<f64>) -> Self {
        let format_ok = follows_rewrite_template(&tokens);
        Self { tokens, logprobs, format_ok }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn total_logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }

    /// Mean per-token log-probability (0 for an empty rollout).
    pub fn mean_logprob(&self) -> f64 {
        if self.logprobs.is_empty() {
            0.0
        } else {
            self.total_logprob() / self.logprobs.len() as f64
        }
    }
}

/// `input ++ [<disc_emb>]`, unless the input already ends with it.
pub fn disc_sequence(input: &[TokenId]) -> Vec<TokenId> {
    let mut seq = input.to_vec();
    if seq.last() != Some(&special::DISC_EMB) {
        seq.push(special::DISC_EMB);
    }
    seq
}

/// `input ++ rewrite ++ [<gen_emb>]`.
pub fn gen_sequence(input: &[TokenId], rewrite: &[TokenId]) -> Vec<TokenId> {
    let mut seq = Vec::with_capacity(input.len() + rewrite.len() + 1);
    seq.extend_from_slice(input);
    seq.extend_from_slice(rewrite);
    seq.push(special::GEN_EMB);
    seq
}

fn read_last<T: Scalar>(model: &ModelParams<T>, seq: &[TokenId], mode: EmbeddingMode) -> Result<Embedding> {
    let mut dec = Decoder::new(model);
    let hidden = dec.feed(seq)?;
    let last = hidden.row(hidden.rows() - 1);
    Embedding::from_raw(last.iter().map(|v| v.as_f64()).collect(), mode)
}

/// Discriminative embedding: hidden state at the trailing `<disc_emb>`.
pub fn encode_disc<T: Scalar>(model: &ModelParams<T>, input: &[TokenId]) -> Result<Embedding> {
    read_last(model, &disc_sequence(input), EmbeddingMode::Disc)
}

/// Generative embedding: hidden state at `<gen_emb>` placed after the rewrite.
pub fn encode_gen<T: Scalar>(model: &ModelParams<T>, input: &[TokenId], rewrite: &[TokenId]) -> Result<Embedding> {
    read_last(model, &gen_sequence(input, rewrite), EmbeddingMode::Gen)
}

/// Samples a rewrite after `input`.
///
/// `temperature == 0` selects the argmax (first maximum on ties); positive
/// values sample from `softmax(logits / temperature)`. Recorded log-probs are
/// always those of the untempered policy. Generation stops after `<eos>` or
/// when `budget` tokens have been produced; one position is reserved so the
/// rollout can always be followed by `<gen_emb>`.
pub fn generate_rewrite<T: Scalar>(
    model: &ModelParams<T>,
    input: &[TokenId],
    budget: usize,
    temperature: f64,
    rng: &mut RngStream,
) -> Result<RewriteRollout> {
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    if input.is_empty() {
        return Err(Error::BadConfig("generation needs a non-empty input".into()));
    }
    let max = model.config.max_seq;
    if input.len() + budget + 1 > max {
        return Err(Error::SequenceTooLong { len: input.len() + budget + 1, max });
    }
    let mut tokens = Vec::new();
    let mut logprobs = Vec::new();
    if budget == 0 {
        return Ok(RewriteRollout::from_tokens(tokens, logprobs));
    }
    let mut dec = Decoder::new(model);
    let hidden = dec.feed(input)?;
    let mut state = hidden.row(hidden.rows() - 1).to_vec();
    let vocab = model.config.vocab_size;
    let mut lp = vec![T::zero(); vocab];
    let mut probs = vec![0.0f64; vocab];
    loop {
        let logits = dec.logits(&state);
        log_softmax_row(&logits, &mut lp);
        let next = if temperature == 0.0 {
            argmax(&lp)
        } else {
            let inv = 1.0 / temperature;
            let max_lp = lp.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (p, v) in probs.iter_mut().zip(&lp) {
                *p = ((v.as_f64() - max_lp) * inv).exp();
                total += *p;
            }
            probs.iter_mut().for_each(|p| *p /= total);
            rng.categorical(&probs)
        };
        tokens.push(next as TokenId);
        logprobs.push(lp[next].as_f64());
        if next as TokenId == special::EOS || tokens.len() == budget {
            break;
        }
        let h = dec.feed(&[next as TokenId])?;
        state = h.row(0).to_vec();
    }
    Ok(RewriteRollout::from_tokens(tokens, logprobs))
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Teacher-forced log-probabilities of exactly `rewrite` following `input`.
pub fn rollout_logprob<T: Scalar>(model: &ModelParams<T>, input: &[TokenId], rewrite: &[TokenId]) -> Result<Vec<f64>> {
    if rewrite.is_empty() {
        return Ok(Vec::new());
    }
    if input.is_empty() {
        return Err(Error::BadConfig("scoring needs a non-empty input".into()));
    }
    let mut seq = input.to_vec();
    seq.extend_from_slice(&rewrite[..rewrite.len() - 1]);
    let mut dec = Decoder::new(model);
    let hidden = dec.feed(&seq)?;
    let vocab = model.config.vocab_size;
    let mut lp = vec![T::zero(); vocab];
    let mut out = Vec::with_capacity(rewrite.len());
    for (k, &tok) in rewrite.iter().enumerate() {
        let row = hidden.row(input.len() - 1 + k);
        log_softmax_row(&dec.logits(row), &mut lp);
        out.push(lp[tok as usize].as_f64());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::Graph;

    fn toy(seed: u64) -> ModelParams<f64> {
        let vocab = Vocab::new((0..8).map(|i| format!("c{i}")).collect()).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 24,
            max_seq: 32,
        };
        ModelParams::init(&cfg, &vocab, seed).unwrap()
    }

    const INPUT: [TokenId; 4] = [special::BOS, 9, 11, 12];

    fn norm(e: &Embedding) -> f64 {
        e.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn embeddings_are_unit_norm_and_pure() {
        let m = toy(1);
        let a = encode_disc(&m, &INPUT).unwrap();
        let b = encode_disc(&m, &INPUT).unwrap();
        assert!((norm(&a) - 1.0).abs() < 1e-6);
        assert_eq!(a, b);
        let g = encode_gen(&m, &INPUT, &[]).unwrap();
        assert!((norm(&g) - 1.0).abs() < 1e-6);
        assert!(a.dot(&g) < 1.0);
    }

    #[test]
    fn content_order_matters() {
        let m = toy(2);
        let a = encode_disc(&m, &[special::BOS, 9, 11]).unwrap();
        let b = encode_disc(&m, &[special::BOS, 11, 9]).unwrap();
        assert!(a.dot(&b) < 1.0 - 1e-6);
    }

    #[test]
    fn decoder_matches_graph_forward() {
        let m = toy(3);
        let seq = gen_sequence(&INPUT, &[special::THINK_OPEN, 10, special::THINK_CLOSE]);
        let mut g = Graph::new();
        let bound = m.bind(&mut g);
        let h = forward::hidden_states(&mut g, &m, &bound, &seq).unwrap();
        let e = forward::embedding_at(&mut g, h, seq.len() - 1).unwrap();
        let direct = encode_gen(&m, &INPUT, &[special::THINK_OPEN, 10, special::THINK_CLOSE]).unwrap();
        for (x, y) in g.value(e).data().iter().zip(&direct.vector) {
            assert!((x - y).abs() < 1e-12);
        }
        let lp = forward::continuation_logprobs(&mut g, &m, &bound, h, &seq, INPUT.len()).unwrap();
        let rw = &seq[INPUT.len()..];
        let teacher = rollout_logprob(&m, &INPUT, rw).unwrap();
        for (x, y) in g.value(lp).data().iter().zip(&teacher) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_budget_is_empty_and_malformed() {
        let m = toy(4);
        let r = generate_rewrite(&m, &INPUT, 0, 1.0, &mut RngStream::new(0, 0)).unwrap();
        assert!(r.is_empty() && !r.format_ok);
    }

    #[test]
    fn greedy_is_reproducible_and_rescored_exactly() {
        let m = toy(5);
        let a = generate_rewrite(&m, &INPUT, 12, 0.0, &mut RngStream::new(0, 0)).unwrap();
        let b = generate_rewrite(&m, &INPUT, 12, 0.0, &mut RngStream::new(9, 9)).unwrap();
        assert_eq!(a, b);
        let again = rollout_logprob(&m, &INPUT, &a.tokens).unwrap();
        for (x, y) in a.logprobs.iter().zip(&again) {
            assert!((x - y).abs() < 1e-10);
        }
        assert!((a.mean_logprob() - a.total_logprob() / a.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn sampled_rollouts_rescore_at_f32() {
        let m = toy(6).cast::<f32>();
        for s in 0..4 {
            let r = generate_rewrite(&m, &INPUT, 20, 1.3, &mut RngStream::new(s, 1)).unwrap();
            assert_eq!(r.logprobs.len(), r.tokens.len());
            assert!(r.logprobs.iter().all(|&l| l <= 0.0));
            let again = rollout_logprob(&m, &INPUT, &r.tokens).unwrap();
            for (x, y) in r.logprobs.iter().zip(&again) {
                assert!((x - y).abs() < 1e-6, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn single_step_continuations_sum_to_one() {
        let m = toy(7);
        let total: f64 = (0..m.config.vocab_size as TokenId)
            .map(|t| rollout_logprob(&m, &INPUT, &[t]).unwrap()[0].exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn bad_temperature_and_overlong_input() {
        let m = toy(8);
        let mut rng = RngStream::new(0, 0);
        assert!(matches!(
            generate_rewrite(&m, &INPUT, 4, -1.0, &mut rng),
            Err(Error::NonPositiveTemperature(_))
        ));
        let long = vec![special::BOS; 40];
        assert!(matches!(encode_disc(&m, &long), Err(Error::SequenceTooLong { .. })));
    }
}
