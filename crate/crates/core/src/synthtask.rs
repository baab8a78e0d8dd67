//! Synthetic retrieval tasks whose matching attributes are hidden behind an
//! obfuscated surface encoding and stated plainly by a gold rewrite.
//!
//! Each item carries a latent vector `a ∈ [0, C)^A`. Its surface is written
//! in one of four pseudo-modality sublanguages (disjoint token sets, one
//! symbol table per attribute slot). Slots form consecutive blocks of
//! `chain_block`; inside a block the value written in slot `j` is
//! `a_j + a_{j-1}` (the first slot of a block writes `a_j`), shifted by a per-(modality, slot)
//! offset and passed through a per-(modality, slot) permutation; distractor
//! tokens are inserted at random. With chaining, no single surface token
//! determines an attribute, but decoding slot by slot — as the rewrite does —
//! only ever combines one surface token with the previously decoded value. The gold rewrite lists the latent values with shared,
//! modality-independent value tokens.
//!
//! Every group pairs a query modality with a target modality and declares a
//! key subset of attributes; a corpus item is relevant to a query iff it sits
//! in the same group and agrees on every key attribute. Training and
//! evaluation use disjoint key combinations.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::RlQuery;
use crate::objectives::{ContrastBatch, Side};
use crate::retrieval::{EvalItem, EvalSet, Judgments};
use crate::seqmodel::{special, TokenId, Vocab};
use crate::tensorcore::{mix_stream, RngStream};

pub const SCHEMA_VERSION: &str = "rimeforge-task/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Img,
    Vid,
    Doc,
    Txt,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Img, Modality::Vid, Modality::Doc, Modality::Txt];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Img => "img",
            Modality::Vid => "vid",
            Modality::Doc => "doc",
            Modality::Txt => "txt",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Query/target modality pairs of the groups, cycled when there are more
/// than eight groups.
const GROUP_MODALITIES: [(Modality, Modality); 8] = [
    (Modality::Txt, Modality::Img),
    (Modality::Img, Modality::Txt),
    (Modality::Txt, Modality::Vid),
    (Modality::Vid, Modality::Txt),
    (Modality::Txt, Modality::Doc),
    (Modality::Doc, Modality::Txt),
    (Modality::Img, Modality::Vid),
    (Modality::Doc, Modality::Img),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub n_groups: usize,
    pub pairs_per_group: usize,
    pub eval_queries_per_group: usize,
    /// Corpus items per group: one positive per query, the rest hard
    /// negatives differing from a query in one key attribute.
    pub eval_corpus_per_group: usize,
    /// Latent attribute count `A`.
    pub attributes: usize,
    /// Values per attribute `C`.
    pub values: usize,
    /// Attributes that decide relevance.
    pub key_size: usize,
    /// Probability of inserting a distractor before each surface token.
    pub noise_rate: f64,
    pub distractors: usize,
    /// 1: values only; 2: each value preceded by its attribute marker.
    pub verbosity: u8,
    /// Length of the runs of chained slots; 1 disables chaining.
    pub chain_block: usize,
    /// Share of key combinations reserved for evaluation.
    pub eval_fraction: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            n_groups: 8,
            pairs_per_group: 128,
            eval_queries_per_group: 32,
            eval_corpus_per_group: 64,
            attributes: 4,
            values: 6,
            key_size: 3,
            noise_rate: 0.15,
            distractors: 3,
            verbosity: 2,
            chain_block: 3,
            eval_fraction: 0.25,
            seed: 7,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadConfig(m));
        if self.n_groups == 0 || self.pairs_per_group == 0 || self.eval_queries_per_group == 0 {
            return bad("group, pair and query counts must be positive".into());
        }
        if self.attributes == 0 || self.values < 2 {
            return bad("need at least one attribute with two values".into());
        }
        if self.key_size == 0 || self.key_size > self.attributes {
            return bad(format!("key_size must lie in 1..={}", self.attributes));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return bad(format!("noise_rate must lie in [0, 1), got {}", self.noise_rate));
        }
        if self.noise_rate > 0.0 && self.distractors == 0 {
            return bad("noise needs at least one distractor token".into());
        }
        if self.chain_block == 0 {
            return bad("chain_block must be positive".into());
        }
        if !matches!(self.verbosity, 1 | 2) {
            return bad("verbosity must be 1 or 2".into());
        }
        if self.eval_corpus_per_group < self.eval_queries_per_group {
            return bad("each query needs its positive in the corpus".into());
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return bad("eval_fraction must lie in (0, 1)".into());
        }
        let combos = self.values.checked_pow(self.key_size as u32).unwrap_or(usize::MAX);
        let eval = (combos as f64 * self.eval_fraction).floor() as usize;
        if eval == 0 || eval == combos {
            return bad(format!("{combos} key combinations cannot be split by eval_fraction {}", self.eval_fraction));
        }
        Ok(())
    }
}

/// One query/target sub-task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub id: u32,
    pub query_modality: Modality,
    pub target_modality: Modality,
    pub key: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskItem {
    pub id: u32,
    pub group: u32,
    pub modality: Modality,
    pub latents: Vec<u8>,
    /// Full model input: `<bos> task marker surface...`.
    pub input: Vec<TokenId>,
    pub gold: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainPair {
    pub query: TaskItem,
    pub target: TaskItem,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: TaskConfig,
    pub vocab: Vocab,
    pub groups: Vec<GroupSpec>,
    pub train: Vec<TrainPair>,
    pub eval_queries: Vec<TaskItem>,
    pub eval_corpus: Vec<TaskItem>,
}

/// Token tables shared by generation and decoding.
#[derive(Debug, Clone)]
pub struct Lexicon {
    attributes: usize,
    values: usize,
    chain_block: usize,
    /// `surface[m][j][s]`: token of symbol `s` in slot `j` of modality `m`.
    surface: Vec<Vec<Vec<TokenId>>>,
    /// `perm[m][j][v]`: surface symbol written for encoded value `v`.
    perm: Vec<Vec<Vec<usize>>>,
    offset: Vec<Vec<usize>>,
    distractors: Vec<TokenId>,
    tasks: Vec<TokenId>,
    markers: Vec<TokenId>,
    value_tokens: Vec<TokenId>,
    attr_tokens: Vec<TokenId>,
    verbosity: u8,
}

fn symbols(cfg: &TaskConfig) -> Vec<String> {
    let mut out = Vec::new();
    for m in Modality::ALL {
        for j in 0..cfg.attributes {
            out.extend((0..cfg.values).map(|s| format!("{}{j}:{s}", m.name())));
        }
    }
    out.extend((0..cfg.distractors).map(|d| format!("~{d}")));
    out.extend((0..cfg.n_groups).map(|g| format!("task{g}")));
    out.extend(Modality::ALL.iter().map(|m| format!("<{}>", m.name())));
    out.extend((0..cfg.values).map(|v| format!("v{v}")));
    if cfg.verbosity == 2 {
        out.extend((0..cfg.attributes).map(|a| format!("a{a}")));
    }
    out
}

/// The task vocabulary: special tokens followed by all task symbols.
pub fn task_vocab(cfg: &TaskConfig) -> Result<Vocab> {
    Vocab::new(symbols(cfg))
}

const LEXICON_STREAM: u64 = 0x4C45_58;
const DATA_STREAM: u64 = 0x4441_5441;

impl Lexicon {
    pub fn new(cfg: &TaskConfig, vocab: &Vocab) -> Result<Self> {
        let id = |s: String| vocab.id(&s);
        let mut surface = Vec::new();
        let mut perm = Vec::new();
        let mut offset = Vec::new();
        for m in Modality::ALL {
            surface.push(
                (0..cfg.attributes)
                    .map(|j| (0..cfg.values).map(|s| id(format!("{}{j}:{s}", m.name()))).collect::<Result<Vec<_>>>())
                    .collect::<Result<Vec<_>>>()?,
            );
            let mut rng = RngStream::new(cfg.seed, mix_stream(LEXICON_STREAM, &[m.index() as u64]));
            let mut pm = Vec::new();
            let mut off = Vec::new();
            for _ in 0..cfg.attributes {
                let mut p: Vec<usize> = (0..cfg.values).collect();
                rng.shuffle(&mut p);
                pm.push(p);
                off.push(rng.below(cfg.values));
            }
            perm.push(pm);
            offset.push(off);
        }
        Ok(Self {
            attributes: cfg.attributes,
            values: cfg.values,
            chain_block: cfg.chain_block,
            surface,
            perm,
            offset,
            distractors: (0..cfg.distractors).map(|d| id(format!("~{d}"))).collect::<Result<_>>()?,
            tasks: (0..cfg.n_groups).map(|g| id(format!("task{g}"))).collect::<Result<_>>()?,
            markers: Modality::ALL.iter().map(|m| id(format!("<{}>", m.name()))).collect::<Result<_>>()?,
            value_tokens: (0..cfg.values).map(|v| id(format!("v{v}"))).collect::<Result<_>>()?,
            attr_tokens: if cfg.verbosity == 2 {
                (0..cfg.attributes).map(|a| id(format!("a{a}"))).collect::<Result<_>>()?
            } else {
                Vec::new()
            },
            verbosity: cfg.verbosity,
        })
    }

    fn chained(&self, j: usize) -> bool {
        j % self.chain_block != 0
    }

    fn encoded_value(&self, latents: &[u8], j: usize) -> usize {
        let prev = if self.chained(j) { latents[j - 1] as usize } else { 0 };
        latents[j] as usize + prev
    }

    /// Surface tokens for `latents` in modality `m`, with distractors.
    pub fn surface(&self, m: Modality, latents: &[u8], noise: f64, rng: &mut RngStream) -> Vec<TokenId> {
        let mi = m.index();
        let mut out = Vec::new();
        for j in 0..self.attributes {
            if noise > 0.0 && rng.bernoulli(noise) {
                out.push(self.distractors[rng.below(self.distractors.len())]);
            }
            let v = (self.encoded_value(latents, j) + self.offset[mi][j]) % self.values;
            out.push(self.surface[mi][j][self.perm[mi][j][v]]);
        }
        out
    }

    /// Canonical decode of surface tokens back to latents.
    pub fn decode(&self, m: Modality, surface: &[TokenId]) -> Result<Vec<u8>> {
        let mi = m.index();
        let content: Vec<TokenId> = surface.iter().copied().filter(|t| !self.distractors.contains(t)).collect();
        if content.len() != self.attributes {
            return Err(Error::Format(format!("expected {} surface symbols, found {}", self.attributes, content.len())));
        }
        let mut latents = Vec::with_capacity(self.attributes);
        for (j, tok) in content.iter().enumerate() {
            let sym = self.surface[mi][j]
                .iter()
                .position(|t| t == tok)
                .ok_or_else(|| Error::Format(format!("token {tok} is not a {} slot-{j} symbol", m.name())))?;
            let v = self.perm[mi][j].iter().position(|&p| p == sym).expect("permutation is a bijection");
            let c = self.values;
            let mut a = (v + c - self.offset[mi][j]) % c;
            if self.chained(j) {
                a = (a + c - latents[j - 1] as usize) % c;
            }
            latents.push(a as u8);
        }
        Ok(latents)
    }

    pub fn gold_rewrite(&self, latents: &[u8]) -> Vec<TokenId> {
        let mut out = vec![special::THINK_OPEN];
        for (j, &a) in latents.iter().enumerate() {
            if self.verbosity == 2 {
                out.push(self.attr_tokens[j]);
            }
            out.push(self.value_tokens[a as usize]);
        }
        out.extend([special::THINK_CLOSE, special::ANSWER, special::EOS]);
        out
    }

    fn item(&self, id: u32, group: &GroupSpec, m: Modality, latents: Vec<u8>, noise: f64, rng: &mut RngStream) -> TaskItem {
        let mut input = vec![special::BOS, self.tasks[group.id as usize], self.markers[m.index()]];
        input.extend(self.surface(m, &latents, noise, rng));
        TaskItem { id, group: group.id, modality: m, gold: self.gold_rewrite(&latents), latents, input }
    }
}

/// Length of the surface prefix `<bos> task marker` of every input.
pub const INPUT_PREFIX: usize = 3;

pub fn group_specs(cfg: &TaskConfig) -> Vec<GroupSpec> {
    (0..cfg.n_groups)
        .map(|g| {
            let (q, t) = GROUP_MODALITIES[g % GROUP_MODALITIES.len()];
            let key = (0..cfg.key_size).map(|i| (g + i) % cfg.attributes).collect::<BTreeSet<_>>();
            GroupSpec { id: g as u32, query_modality: q, target_modality: t, key: key.into_iter().collect() }
        })
        .collect()
}

fn key_of(latents: &[u8], key: &[usize]) -> Vec<u8> {
    key.iter().map(|&k| latents[k]).collect()
}

fn combo(index: usize, values: usize, len: usize) -> Vec<u8> {
    let mut rest = index;
    (0..len)
        .map(|_| {
            let v = rest % values;
            rest /= values;
            v as u8
        })
        .collect()
}

fn fill(cfg: &TaskConfig, key: &[usize], key_values: &[u8], rng: &mut RngStream) -> Vec<u8> {
    let mut latents: Vec<u8> = (0..cfg.attributes).map(|_| rng.below(cfg.values) as u8).collect();
    for (&k, &v) in key.iter().zip(key_values) {
        latents[k] = v;
    }
    latents
}

/// Generates the full dataset; a pure function of `cfg`.
pub fn gen_corpus(cfg: &TaskConfig) -> Result<Dataset> {
    cfg.validate()?;
    let vocab = task_vocab(cfg)?;
    let lex = Lexicon::new(cfg, &vocab)?;
    let groups = group_specs(cfg);
    let combos = cfg.values.pow(cfg.key_size as u32);
    let n_eval = (combos as f64 * cfg.eval_fraction).floor() as usize;
    let mut train = Vec::new();
    let mut eval_queries = Vec::new();
    let mut eval_corpus = Vec::new();
    let mut next_id = 0u32;
    let mut fresh = || {
        next_id += 1;
        next_id - 1
    };
    for g in &groups {
        let mut rng = RngStream::new(cfg.seed, mix_stream(DATA_STREAM, &[g.id as u64]));
        let mut order: Vec<usize> = (0..combos).collect();
        rng.shuffle(&mut order);
        let (eval_combos, train_combos) = order.split_at(n_eval);
        let as_key = |i: usize| combo(i, cfg.values, cfg.key_size);

        for _ in 0..cfg.pairs_per_group {
            let key = as_key(train_combos[rng.below(train_combos.len())]);
            let ql = fill(cfg, &g.key, &key, &mut rng);
            let tl = fill(cfg, &g.key, &key, &mut rng);
            let query = lex.item(fresh(), g, g.query_modality, ql, cfg.noise_rate, &mut rng);
            let target = lex.item(fresh(), g, g.target_modality, tl, cfg.noise_rate, &mut rng);
            train.push(TrainPair { query, target });
        }

        let eval_keys: Vec<Vec<u8>> = eval_combos.iter().map(|&i| as_key(i)).collect();
        let mut query_keys = Vec::new();
        for q in 0..cfg.eval_queries_per_group {
            let key = if q < eval_keys.len() {
                eval_keys[q].clone()
            } else {
                eval_keys[rng.below(eval_keys.len())].clone()
            };
            let latents = fill(cfg, &g.key, &key, &mut rng);
            eval_queries.push(lex.item(fresh(), g, g.query_modality, latents, cfg.noise_rate, &mut rng));
            query_keys.push(key);
        }
        let mut corpus = Vec::new();
        for key in &query_keys {
            let latents = fill(cfg, &g.key, key, &mut rng);
            corpus.push(lex.item(fresh(), g, g.target_modality, latents, cfg.noise_rate, &mut rng));
        }
        for n in 0..cfg.eval_corpus_per_group - query_keys.len() {
            let base = &query_keys[n % query_keys.len()];
            // Prefer another held-out combination one attribute away.
            let near: Vec<&Vec<u8>> = eval_keys
                .iter()
                .filter(|k| k.iter().zip(base).filter(|(a, b)| a != b).count() == 1)
                .collect();
            let key = if near.is_empty() {
                eval_keys[rng.below(eval_keys.len())].clone()
            } else {
                near[rng.below(near.len())].clone()
            };
            let latents = fill(cfg, &g.key, &key, &mut rng);
            corpus.push(lex.item(fresh(), g, g.target_modality, latents, cfg.noise_rate, &mut rng));
        }
        rng.shuffle(&mut corpus);
        eval_corpus.extend(corpus);
    }
    Ok(Dataset { config: cfg.clone(), vocab, groups, train, eval_queries, eval_corpus })
}

impl Dataset {
    pub fn group(&self, id: u32) -> &GroupSpec {
        &self.groups[id as usize]
    }

    pub fn is_relevant(&self, query: &TaskItem, item: &TaskItem) -> bool {
        let key = &self.group(query.group).key;
        query.group == item.group && key_of(&query.latents, key) == key_of(&item.latents, key)
    }

    pub fn judgments(&self) -> Judgments {
        self.eval_queries
            .iter()
            .map(|q| {
                let rel = self.eval_corpus.iter().filter(|c| self.is_relevant(q, c)).map(|c| c.id).collect();
                (q.id, rel)
            })
            .collect()
    }

    pub fn eval_set(&self) -> EvalSet {
        let conv = |i: &TaskItem| EvalItem {
            id: i.id,
            pool: i.group,
            category: i.modality.name().to_string(),
            input: i.input.clone(),
        };
        EvalSet {
            queries: self.eval_queries.iter().map(conv).collect(),
            corpus: self.eval_corpus.iter().map(conv).collect(),
            judgments: self.judgments(),
        }
    }

    /// Key combinations seen in the train pairs (per group).
    pub fn train_keys(&self) -> BTreeSet<(u32, Vec<u8>)> {
        self.train
            .iter()
            .flat_map(|p| [&p.query, &p.target])
            .map(|i| (i.group, key_of(&i.latents, &self.group(i.group).key)))
            .collect()
    }

    pub fn eval_keys(&self) -> BTreeSet<(u32, Vec<u8>)> {
        self.eval_queries
            .iter()
            .chain(&self.eval_corpus)
            .map(|i| (i.group, key_of(&i.latents, &self.group(i.group).key)))
            .collect()
    }

    /// RL queries: every train pair with `negatives` in-group targets whose
    /// key differs from the query's.
    pub fn rl_queries(&self, negatives: usize, rng: &mut RngStream) -> Vec<RlQuery> {
        let mut by_group: BTreeMap<u32, Vec<&TrainPair>> = BTreeMap::new();
        for p in &self.train {
            by_group.entry(p.query.group).or_default().push(p);
        }
        self.train
            .iter()
            .map(|p| {
                let pool: Vec<&TrainPair> = by_group[&p.query.group]
                    .iter()
                    .copied()
                    .filter(|o| !self.is_relevant(&p.query, &o.target))
                    .collect();
                let negatives = (0..negatives.min(pool.len()))
                    .map(|_| pool[rng.below(pool.len())].target.input.clone())
                    .collect();
                RlQuery { query: p.query.input.clone(), positive: p.target.input.clone(), negatives }
            })
            .collect()
    }
}

fn side(item: &TaskItem) -> Side {
    Side { input: item.input.clone(), gold: item.gold.clone() }
}

/// One epoch of homogeneous batches: pairs are shuffled within each group,
/// cut into batches of `batch_size` (the last batch of a group may be
/// smaller), and the batch order is shuffled across groups.
pub fn make_batches(dataset: &Dataset, batch_size: usize, rng: &mut RngStream) -> Result<Vec<ContrastBatch>> {
    if batch_size == 0 {
        return Err(Error::BadConfig("batch_size must be positive".into()));
    }
    let mut by_group: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, p) in dataset.train.iter().enumerate() {
        by_group.entry(p.query.group).or_default().push(i);
    }
    let mut batches = Vec::new();
    for (group, mut idx) in by_group {
        if idx.len() < batch_size {
            return Err(Error::GroupTooSmall { group: group as usize, available: idx.len(), batch: batch_size });
        }
        rng.shuffle(&mut idx);
        for chunk in idx.chunks(batch_size) {
            let pairs: Vec<&TrainPair> = chunk.iter().map(|&i| &dataset.train[i]).collect();
            batches.push(ContrastBatch::new(
                group,
                pairs.iter().map(|p| side(&p.query)).collect(),
                pairs.iter().map(|p| side(&p.target)).collect(),
            ));
        }
    }
    rng.shuffle(&mut batches);
    Ok(batches)
}

/// Ideal ranking: relevant items first, then the rest, each by ascending id.
pub fn oracle_rank(dataset: &Dataset, query: &TaskItem, corpus: &[TaskItem]) -> Vec<u32> {
    let mut ids: Vec<(bool, u32)> = corpus
        .iter()
        .filter(|c| c.group == query.group)
        .map(|c| (!dataset.is_relevant(query, c), c.id))
        .collect();
    ids.sort();
    ids.into_iter().map(|(_, id)| id).collect()
}

// ---------------------------------------------------------------------------
// Files

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    config: TaskConfig,
    vocab: Vocab,
    groups: Vec<GroupSpec>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    kind: RecordKind,
    id: u32,
    group: u32,
    modality: Modality,
    surface: Vec<String>,
    latents: Vec<u8>,
    gold: Vec<String>,
}

#[derive(Serialize, Deserialize, PartialEq, Eq, Clone, Copy)]
#[serde(rename_all = "lowercase")]
enum RecordKind {
    Query,
    Target,
    EvalQuery,
    Corpus,
}

impl Record {
    fn new(kind: RecordKind, item: &TaskItem, vocab: &Vocab) -> Self {
        Record {
            kind,
            id: item.id,
            group: item.group,
            modality: item.modality,
            surface: vocab.decode(&item.input),
            latents: item.latents.clone(),
            gold: vocab.decode(&item.gold),
        }
    }

    fn item(self, vocab: &Vocab) -> Result<TaskItem> {
        Ok(TaskItem {
            id: self.id,
            group: self.group,
            modality: self.modality,
            latents: self.latents,
            input: vocab.encode(&self.surface)?,
            gold: vocab.encode(&self.gold)?,
        })
    }
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";

fn write_lines(path: &Path, header: &Header, records: impl Iterator<Item = Record>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut out, &r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `train.jsonl` and `eval.jsonl` into `dir`: a header line (schema
/// version, task config, vocabulary, groups) followed by one item per line.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let header = Header {
        schema: SCHEMA_VERSION.into(),
        config: dataset.config.clone(),
        vocab: dataset.vocab.clone(),
        groups: dataset.groups.clone(),
    };
    let v = &dataset.vocab;
    write_lines(
        &dir.join(TRAIN_FILE),
        &header,
        dataset
            .train
            .iter()
            .flat_map(|p| [Record::new(RecordKind::Query, &p.query, v), Record::new(RecordKind::Target, &p.target, v)]),
    )?;
    write_lines(
        &dir.join(EVAL_FILE),
        &header,
        dataset
            .eval_queries
            .iter()
            .map(|q| Record::new(RecordKind::EvalQuery, q, v))
            .chain(dataset.eval_corpus.iter().map(|c| Record::new(RecordKind::Corpus, c, v))),
    )?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<(Header, Vec<Record>)> {
    let file = BufReader::new(fs::File::open(path)?);
    let mut lines = file.lines();
    let first = lines.next().ok_or_else(|| Error::Format(format!("{} is empty", path.display())))??;
    let header: Header = serde_json::from_str(&first)?;
    if header.schema != SCHEMA_VERSION {
        return Err(Error::Format(format!("unsupported schema {:?}", header.schema)));
    }
    let records = lines
        .map(|l| Ok(serde_json::from_str::<Record>(&l?)?))
        .collect::<Result<Vec<_>>>()?;
    Ok((header, records))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let (header, train_records) = read_lines(&dir.join(TRAIN_FILE))?;
    let (eval_header, eval_records) = read_lines(&dir.join(EVAL_FILE))?;
    if eval_header.config != header.config || eval_header.vocab != header.vocab {
        return Err(Error::Format("train and eval files come from different configs".into()));
    }
    let vocab = header.vocab;
    let mut train = Vec::new();
    let mut pending: Option<TaskItem> = None;
    for r in train_records {
        match (r.kind, pending.take()) {
            (RecordKind::Query, None) => pending = Some(r.item(&vocab)?),
            (RecordKind::Target, Some(query)) => train.push(TrainPair { query, target: r.item(&vocab)? }),
            _ => return Err(Error::Format("train records must alternate query/target".into())),
        }
    }
    if pending.is_some() {
        return Err(Error::Format("dangling query record".into()));
    }
    let mut eval_queries = Vec::new();
    let mut eval_corpus = Vec::new();
    for r in eval_records {
        match r.kind {
            RecordKind::EvalQuery => eval_queries.push(r.item(&vocab)?),
            RecordKind::Corpus => eval_corpus.push(r.item(&vocab)?),
            _ => return Err(Error::Format("unexpected record kind in eval file".into())),
        }
    }
    Ok(Dataset { config: header.config, vocab, groups: header.groups, train, eval_queries, eval_corpus })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::{ndcg_at_k, Ranking};
    use crate::seqmodel::follows_rewrite_template;

    fn small() -> TaskConfig {
        TaskConfig {
            n_groups: 3,
            pairs_per_group: 16,
            eval_queries_per_group: 8,
            eval_corpus_per_group: 16,
            ..TaskConfig::default()
        }
    }

    #[test]
    fn deterministic_and_split() {
        let a = gen_corpus(&small()).unwrap();
        let b = gen_corpus(&small()).unwrap();
        assert_eq!(a, b);
        assert!(a.train_keys().is_disjoint(&a.eval_keys()));
    }

    #[test]
    fn gold_is_well_formed_and_surface_decodes() {
        for chain_block in [1, 2, 4] {
            let cfg = TaskConfig { chain_block, verbosity: 2, ..small() };
            let d = gen_corpus(&cfg).unwrap();
            let lex = Lexicon::new(&cfg, &d.vocab).unwrap();
            for item in d.train.iter().flat_map(|p| [&p.query, &p.target]).chain(&d.eval_corpus) {
                assert!(follows_rewrite_template(&item.gold));
                assert_eq!(lex.decode(item.modality, &item.input[INPUT_PREFIX..]).unwrap(), item.latents);
            }
        }
    }

    #[test]
    fn modality_token_sets_are_disjoint() {
        let cfg = small();
        let v = task_vocab(&cfg).unwrap();
        let lex = Lexicon::new(&cfg, &v).unwrap();
        let mut seen = BTreeSet::new();
        for set in lex.surface.iter().flatten() {
            for t in set {
                assert!(seen.insert(*t));
                assert!(!Vocab::is_special(*t));
            }
        }
    }

    #[test]
    fn every_query_has_a_relevant_item() {
        let d = gen_corpus(&small()).unwrap();
        assert!(d.judgments().values().all(|r| !r.is_empty()));
    }

    #[test]
    fn batches_partition_an_epoch() {
        let d = gen_corpus(&small()).unwrap();
        let a = make_batches(&d, 5, &mut RngStream::new(1, 0)).unwrap();
        let b = make_batches(&d, 5, &mut RngStream::new(2, 0)).unwrap();
        let key = |bs: &[ContrastBatch]| {
            let mut v: Vec<Vec<TokenId>> = bs.iter().flat_map(|b| b.queries.iter().map(|s| s.input.clone())).collect();
            v.sort();
            v
        };
        assert_eq!(key(&a), key(&b));
        assert_eq!(key(&a).len(), d.train.len());
        assert_ne!(a, b);
        for batch in &a {
            let group = batch.group;
            assert!(batch.queries.iter().all(|s| s.input[1] == d.train.iter().find(|p| p.query.group == group).unwrap().query.input[1]));
        }
        assert!(matches!(make_batches(&d, 17, &mut RngStream::new(0, 0)), Err(Error::GroupTooSmall { .. })));
    }

    #[test]
    fn oracle_is_ideal() {
        let d = gen_corpus(&small()).unwrap();
        let j = d.judgments();
        let rankings: Vec<Ranking> = d
            .eval_queries
            .iter()
            .map(|q| Ranking { query: q.id, items: oracle_rank(&d, q, &d.eval_corpus) })
            .collect();
        assert_eq!(ndcg_at_k(&rankings, &j, 10).unwrap(), 1.0);
    }

    #[test]
    fn files_round_trip() {
        let d = gen_corpus(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&d, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), d);
    }
}
