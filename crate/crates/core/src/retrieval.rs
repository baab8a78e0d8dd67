//! Brute-force embedding search and ranked-retrieval metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqmodel::{encode_disc, encode_gen, generate_rewrite, Embedding, EmbeddingMode, ModelParams, TokenId, DEFAULT_BUDGET};
use crate::tensorcore::{mix_stream, RngStream, Scalar};

/// Tolerance on the unit-norm contract for indexed rows.
const NORM_TOLERANCE: f64 = 1e-6;

/// Corpus embeddings of a single mode, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    mode: EmbeddingMode,
    ids: Vec<u32>,
    rows: Vec<f64>,
}

impl EmbeddingIndex {
    pub fn new(dim: usize, mode: EmbeddingMode) -> Self {
        Self { dim, mode, ids: Vec::new(), rows: Vec::new() }
    }

    pub fn build(items: &[(u32, Embedding)], mode: EmbeddingMode) -> Result<Self> {
        let dim = items.first().map_or(0, |(_, e)| e.dim());
        let mut index = Self::new(dim, mode);
        for (id, e) in items {
            index.insert(*id, e)?;
        }
        Ok(index)
    }

    pub fn insert(&mut self, id: u32, e: &Embedding) -> Result<()> {
        if e.dim() != self.dim {
            return Err(Error::DimensionMismatch { left: self.dim, right: e.dim() });
        }
        if e.mode != self.mode {
            return Err(Error::BadConfig(format!("{} embedding inserted into {} index", e.mode.as_str(), self.mode.as_str())));
        }
        let norm = e.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::BadConfig(format!("item {id} has norm {norm}")));
        }
        if self.ids.contains(&id) {
            return Err(Error::BadConfig(format!("duplicate item id {id}")));
        }
        self.ids.push(id);
        self.rows.extend_from_slice(&e.vector);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> EmbeddingMode {
        self.mode
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }
}

/// Top-`k` items by dot product; ties keep insertion order.
pub fn rank(query: &Embedding, index: &EmbeddingIndex, k: usize) -> Result<Vec<(u32, f64)>> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if query.dim() != index.dim {
        return Err(Error::DimensionMismatch { left: query.dim(), right: index.dim });
    }
    if k == 0 {
        return Err(Error::BadConfig("k must be at least 1".into()));
    }
    let mut scored: Vec<(u32, f64)> = index
        .rows
        .chunks_exact(index.dim)
        .zip(&index.ids)
        .map(|(row, &id)| (id, row.iter().zip(&query.vector).map(|(a, b)| a * b).sum()))
        .collect();
    // Stable sort: equal scores stay in insertion order.
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.truncate(k);
    Ok(scored)
}

/// Ranked item ids returned for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub query: u32,
    pub items: Vec<u32>,
}

/// Binary relevance: query id → relevant item ids.
pub type Judgments = BTreeMap<u32, BTreeSet<u32>>;

fn relevant<'a>(r: &Ranking, judgments: &'a Judgments) -> Result<&'a BTreeSet<u32>> {
    let rel = judgments.get(&r.query).ok_or(Error::UnjudgedQuery(r.query))?;
    if rel.is_empty() {
        warn!("query {} has an empty relevant set; it scores 0", r.query);
    }
    Ok(rel)
}

fn hits_in_top(r: &Ranking, rel: &BTreeSet<u32>, k: usize) -> usize {
    r.items.iter().take(k).filter(|i| rel.contains(i)).count()
}

fn mean_over(rankings: &[Ranking], judgments: &Judgments, f: impl Fn(&Ranking, &BTreeSet<u32>) -> f64) -> Result<f64> {
    if rankings.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for r in rankings {
        total += f(r, relevant(r, judgments)?);
    }
    Ok(total / rankings.len() as f64)
}

/// Fraction of queries with at least one relevant item in the top `k`.
pub fn hit_at_k(rankings: &[Ranking], judgments: &Judgments, k: usize) -> Result<f64> {
    mean_over(rankings, judgments, |r, rel| if hits_in_top(r, rel, k) > 0 { 1.0 } else { 0.0 })
}

/// Mean of `|relevant ∩ top k| / |relevant|`.
pub fn recall_at_k(rankings: &[Ranking], judgments: &Judgments, k: usize) -> Result<f64> {
    mean_over(rankings, judgments, |r, rel| {
        if rel.is_empty() {
            0.0
        } else {
            hits_in_top(r, rel, k) as f64 / rel.len() as f64
        }
    })
}

/// Mean of `|relevant ∩ top k| / k`.
pub fn precision_at_k(rankings: &[Ranking], judgments: &Judgments, k: usize) -> Result<f64> {
    mean_over(rankings, judgments, |r, rel| hits_in_top(r, rel, k) as f64 / k as f64)
}

/// Binary-gain NDCG with discount `1 / log2(rank + 1)`.
pub fn ndcg_at_k(rankings: &[Ranking], judgments: &Judgments, k: usize) -> Result<f64> {
    mean_over(rankings, judgments, |r, rel| {
        let ideal: f64 = (1..=rel.len().min(k)).map(|i| 1.0 / ((i + 1) as f64).log2()).sum();
        if ideal == 0.0 {
            return 0.0;
        }
        let dcg: f64 = r
            .items
            .iter()
            .take(k)
            .enumerate()
            .filter(|(_, i)| rel.contains(i))
            .map(|(pos, _)| 1.0 / ((pos + 2) as f64).log2())
            .sum();
        dcg / ideal
    })
}

/// The reported metric set.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSet {
    #[serde(rename = "Hit@1")]
    pub hit_at_1: f64,
    #[serde(rename = "Recall@1")]
    pub recall_at_1: f64,
    #[serde(rename = "Recall@10")]
    pub recall_at_10: f64,
    #[serde(rename = "Precision@1")]
    pub precision_at_1: f64,
    #[serde(rename = "NDCG@5")]
    pub ndcg_at_5: f64,
    #[serde(rename = "NDCG@10")]
    pub ndcg_at_10: f64,
}

/// Deepest cutoff any reported metric needs.
pub const MAX_CUTOFF: usize = 10;

impl MetricSet {
    pub fn compute(rankings: &[Ranking], judgments: &Judgments) -> Result<Self> {
        Ok(Self {
            hit_at_1: hit_at_k(rankings, judgments, 1)?,
            recall_at_1: recall_at_k(rankings, judgments, 1)?,
            recall_at_10: recall_at_k(rankings, judgments, 10)?,
            precision_at_1: precision_at_k(rankings, judgments, 1)?,
            ndcg_at_5: ndcg_at_k(rankings, judgments, 5)?,
            ndcg_at_10: ndcg_at_k(rankings, judgments, 10)?,
        })
    }
}

/// An item to embed: tokens, the candidate pool it belongs to, and a
/// free-form category used for per-category breakdowns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: u32,
    pub pool: u32,
    pub category: String,
    pub input: Vec<TokenId>,
}

/// Queries, corpus and relevance. Each query is ranked against the corpus
/// items of its own pool.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub queries: Vec<EvalItem>,
    pub corpus: Vec<EvalItem>,
    pub judgments: Judgments,
}

/// A query-mode × target-mode combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pathway {
    pub query: EmbeddingMode,
    pub target: EmbeddingMode,
}

impl Pathway {
    pub const ALL: [Pathway; 4] = [
        Pathway { query: EmbeddingMode::Disc, target: EmbeddingMode::Disc },
        Pathway { query: EmbeddingMode::Disc, target: EmbeddingMode::Gen },
        Pathway { query: EmbeddingMode::Gen, target: EmbeddingMode::Disc },
        Pathway { query: EmbeddingMode::Gen, target: EmbeddingMode::Gen },
    ];

    pub fn name(self) -> String {
        format!("{}-{}", self.query.as_str(), self.target.as_str())
    }
}

impl std::str::FromStr for Pathway {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (q, t) = s
            .split_once('-')
            .ok_or_else(|| Error::BadConfig(format!("pathway {s:?} is not of the form query-target")))?;
        Ok(Pathway { query: q.parse()?, target: t.parse()? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub budget: usize,
    /// 0 = greedy query rewrites; corpus rewrites are always greedy.
    pub query_temperature: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { budget: DEFAULT_BUDGET, query_temperature: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathwayReport {
    pub pathway: String,
    pub queries: usize,
    /// Mean number of rewrite tokens generated per query.
    pub query_tokens: f64,
    pub metrics: MetricSet,
    pub per_category: BTreeMap<String, MetricSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub pathways: Vec<PathwayReport>,
}

impl ModeReport {
    pub fn get(&self, pathway: Pathway) -> Option<&PathwayReport> {
        let name = pathway.name();
        self.pathways.iter().find(|p| p.pathway == name)
    }
}

/// Embeddings of a set of items in one mode, plus generated token counts.
struct Encoded {
    embeddings: Vec<Embedding>,
    tokens: Vec<usize>,
}

fn encode_all<T: Scalar>(
    model: &ModelParams<T>,
    items: &[EvalItem],
    mode: EmbeddingMode,
    budget: usize,
    temperature: f64,
    seed: u64,
) -> Result<Encoded> {
    let out: Vec<(Embedding, usize)> = items
        .par_iter()
        .map(|item| {
            let e = match mode {
                EmbeddingMode::Disc => (encode_disc(model, &item.input)?, 0),
                EmbeddingMode::Gen => {
                    let mut rng = RngStream::new(seed, mix_stream(0x45_56, &[item.id as u64]));
                    let r = generate_rewrite(model, &item.input, budget, temperature, &mut rng)?;
                    (encode_gen(model, &item.input, &r.tokens)?, r.len())
                }
            };
            Ok((e.0.with_item(item.id), e.1))
        })
        .collect::<Result<_>>()?;
    let (embeddings, tokens) = out.into_iter().unzip();
    Ok(Encoded { embeddings, tokens })
}

/// Encodes queries and corpus in the requested modes and reports metrics for
/// every pathway, in the order given.
pub fn evaluate_modes<T: Scalar>(model: &ModelParams<T>, set: &EvalSet, pathways: &[Pathway], cfg: &EvalConfig) -> Result<ModeReport> {
    let mut query_enc: BTreeMap<EmbeddingMode, Encoded> = BTreeMap::new();
    let mut corpus_enc: BTreeMap<EmbeddingMode, Encoded> = BTreeMap::new();
    for p in pathways {
        if !query_enc.contains_key(&p.query) {
            let e = encode_all(model, &set.queries, p.query, cfg.budget, cfg.query_temperature, cfg.seed)?;
            query_enc.insert(p.query, e);
        }
        if !corpus_enc.contains_key(&p.target) {
            let e = encode_all(model, &set.corpus, p.target, cfg.budget, 0.0, cfg.seed)?;
            corpus_enc.insert(p.target, e);
        }
    }
    let mut pathways_out = Vec::with_capacity(pathways.len());
    for p in pathways {
        let corpus = &corpus_enc[&p.target];
        let mut pools: BTreeMap<u32, Vec<(u32, Embedding)>> = BTreeMap::new();
        for (item, e) in set.corpus.iter().zip(&corpus.embeddings) {
            pools.entry(item.pool).or_default().push((item.id, e.clone()));
        }
        let indexes: BTreeMap<u32, EmbeddingIndex> = pools
            .into_iter()
            .map(|(pool, items)| Ok((pool, EmbeddingIndex::build(&items, p.target)?)))
            .collect::<Result<_>>()?;
        let queries = &query_enc[&p.query];
        let rankings: Vec<Ranking> = set
            .queries
            .par_iter()
            .zip(&queries.embeddings)
            .map(|(q, e)| {
                let index = indexes.get(&q.pool).ok_or(Error::EmptyIndex)?;
                let top = rank(e, index, MAX_CUTOFF.min(index.len()))?;
                Ok(Ranking { query: q.id, items: top.into_iter().map(|(id, _)| id).collect() })
            })
            .collect::<Result<_>>()?;
        let mut by_category: BTreeMap<String, Vec<Ranking>> = BTreeMap::new();
        for (q, r) in set.queries.iter().zip(&rankings) {
            by_category.entry(q.category.clone()).or_default().push(r.clone());
        }
        let per_category = by_category
            .into_iter()
            .map(|(c, rs)| Ok((c, MetricSet::compute(&rs, &set.judgments)?)))
            .collect::<Result<_>>()?;
        let n = set.queries.len();
        pathways_out.push(PathwayReport {
            pathway: p.name(),
            queries: n,
            query_tokens: queries.tokens.iter().sum::<usize>() as f64 / n.max(1) as f64,
            metrics: MetricSet::compute(&rankings, &set.judgments)?,
            per_category,
        });
    }
    Ok(ModeReport { pathways: pathways_out })
}

pub const DUMP_MAGIC: &[u8] = b"RIMEEMB1";

/// Serializes embeddings: magic, u32 dim, u32 count, mode byte, then rows of
/// f32 little-endian values.
pub fn dump_to_bytes(embeddings: &[Embedding], mode: EmbeddingMode) -> Result<Vec<u8>> {
    let dim = embeddings.first().map_or(0, Embedding::dim);
    let mut out = DUMP_MAGIC.to_vec();
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(embeddings.len() as u32).to_le_bytes());
    out.push(mode.tag());
    for e in embeddings {
        if e.dim() != dim {
            return Err(Error::DimensionMismatch { left: dim, right: e.dim() });
        }
        for &v in &e.vector {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Reads a dump back as raw rows (values are not renormalized).
pub fn dump_from_bytes(bytes: &[u8]) -> Result<(EmbeddingMode, Vec<Vec<f32>>)> {
    let header = DUMP_MAGIC.len() + 9;
    if bytes.len() < header || &bytes[..DUMP_MAGIC.len()] != DUMP_MAGIC {
        return Err(Error::Format("not an embedding dump".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let dim = word(DUMP_MAGIC.len());
    let count = word(DUMP_MAGIC.len() + 4);
    let mode = EmbeddingMode::from_tag(bytes[DUMP_MAGIC.len() + 8]).ok_or_else(|| Error::Format("bad mode byte".into()))?;
    if bytes.len() != header + dim * count * 4 {
        return Err(Error::Format("embedding dump has the wrong length".into()));
    }
    let rows = bytes[header..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect::<Vec<_>>()
        .chunks(dim.max(1))
        .take(count)
        .map(<[f32]>::to_vec)
        .collect();
    Ok((mode, rows))
}

pub fn write_dump(path: &Path, embeddings: &[Embedding], mode: EmbeddingMode) -> Result<()> {
    fs::write(path, dump_to_bytes(embeddings, mode)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(v: &[f64]) -> Embedding {
        Embedding::from_raw(v.to_vec(), EmbeddingMode::Disc).unwrap()
    }

    fn judg(pairs: &[(u32, &[u32])]) -> Judgments {
        pairs.iter().map(|(q, r)| (*q, r.iter().copied().collect())).collect()
    }

    #[test]
    fn self_similarity_and_ties() {
        let items = vec![(5, e(&[1.0, 0.0])), (3, e(&[0.0, 1.0])), (9, e(&[0.0, 1.0]))];
        let index = EmbeddingIndex::build(&items, EmbeddingMode::Disc).unwrap();
        let top = rank(&e(&[1.0, 0.0]), &index, 1).unwrap();
        assert_eq!(top[0].0, 5);
        assert!((top[0].1 - 1.0).abs() < 1e-6);
        let top = rank(&e(&[0.0, 1.0]), &index, 3).unwrap();
        assert_eq!(top.iter().map(|t| t.0).collect::<Vec<_>>(), vec![3, 9, 5]);
        assert!(matches!(rank(&e(&[1.0, 0.0]), &EmbeddingIndex::new(2, EmbeddingMode::Disc), 1), Err(Error::EmptyIndex)));
    }

    #[test]
    fn metric_examples() {
        let j = judg(&[(0, &[7])]);
        let first = [Ranking { query: 0, items: vec![7, 1, 2] }];
        let second = [Ranking { query: 0, items: vec![1, 7, 2] }];
        assert_eq!(hit_at_k(&first, &j, 1).unwrap(), 1.0);
        assert_eq!(hit_at_k(&second, &j, 1).unwrap(), 0.0);
        assert_eq!(ndcg_at_k(&first, &j, 5).unwrap(), 1.0);
        assert!((ndcg_at_k(&second, &j, 5).unwrap() - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((ndcg_at_k(&second, &j, 5).unwrap() - 0.63093).abs() < 1e-5);
        let j2 = judg(&[(0, &[7, 8])]);
        assert_eq!(recall_at_k(&first, &j2, 10).unwrap(), 0.5);
        assert_eq!(precision_at_k(&first, &j, 1).unwrap(), 1.0);
        assert!(matches!(hit_at_k(&first, &judg(&[]), 1), Err(Error::UnjudgedQuery(0))));
    }

    #[test]
    fn dump_round_trip() {
        let es = vec![e(&[0.6, 0.8]), e(&[1.0, 0.0])];
        let bytes = dump_to_bytes(&es, EmbeddingMode::Gen).unwrap();
        let (mode, rows) = dump_from_bytes(&bytes).unwrap();
        assert_eq!(mode, EmbeddingMode::Gen);
        assert_eq!(rows, vec![vec![0.6f32, 0.8], vec![1.0, 0.0]]);
    }

    #[test]
    fn pathway_names_parse() {
        for p in Pathway::ALL {
            assert_eq!(p.name().parse::<Pathway>().unwrap(), p);
        }
        assert!("disc".parse::<Pathway>().is_err());
    }
}
