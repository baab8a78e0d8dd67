use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::tensorcore::{mix_stream, Array, Graph, NodeId, ParamId, ParamStore, RngStream, Scalar};

/// Dimensions of the shared-parameter sequence model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            max_seq: 96,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::BadConfig(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::BadConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Parameter ids of one transformer block.
#[derive(Debug, Clone, Copy)]
pub struct BlockIds {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w_ff1: ParamId,
    pub b_ff1: ParamId,
    pub w_ff2: ParamId,
    pub b_ff2: ParamId,
}

/// Parameter ids in declaration order; fully determined by the config.
#[derive(Debug, Clone)]
pub struct Layout {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<BlockIds>,
    pub lnf_gain: ParamId,
    pub lnf_bias: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

#[derive(Clone, Copy)]
enum Init {
    Uniform(f64),
    Zeros,
    Ones,
}

/// Declared parameter order with shapes and init rule.
fn declarations(c: &ModelConfig) -> Vec<(String, [usize; 2], Init)> {
    let (v, d, f, s) = (c.vocab_size, c.d_model, c.d_ff, c.max_seq);
    let in_d = 1.0 / (d as f64).sqrt();
    let in_f = 1.0 / (f as f64).sqrt();
    let residual = 1.0 / ((2 * c.n_layers) as f64).sqrt();
    let mut out = vec![
        ("tok_emb".to_string(), [v, d], Init::Uniform(0.1)),
        ("pos_emb".to_string(), [s, d], Init::Uniform(0.1)),
    ];
    for l in 0..c.n_layers {
        let p = |n: &str| format!("block{l}.{n}");
        out.extend([
            (p("ln1_gain"), [1, d], Init::Ones),
            (p("ln1_bias"), [1, d], Init::Zeros),
            (p("w_q"), [d, d], Init::Uniform(in_d)),
            (p("w_k"), [d, d], Init::Uniform(in_d)),
            (p("w_v"), [d, d], Init::Uniform(in_d)),
            (p("w_o"), [d, d], Init::Uniform(in_d * residual)),
            (p("b_o"), [1, d], Init::Zeros),
            (p("ln2_gain"), [1, d], Init::Ones),
            (p("ln2_bias"), [1, d], Init::Zeros),
            (p("w_ff1"), [d, f], Init::Uniform(in_d)),
            (p("b_ff1"), [1, f], Init::Zeros),
            (p("w_ff2"), [f, d], Init::Uniform(in_f * residual)),
            (p("b_ff2"), [1, d], Init::Zeros),
        ]);
    }
    out.extend([
        ("lnf_gain".to_string(), [1, d], Init::Ones),
        ("lnf_bias".to_string(), [1, d], Init::Zeros),
        ("w_out".to_string(), [d, v], Init::Uniform(in_d)),
        ("b_out".to_string(), [1, v], Init::Zeros),
    ]);
    out
}

impl Layout {
    pub fn for_config(c: &ModelConfig) -> Self {
        let mut next = 0usize;
        let mut id = || {
            next += 1;
            ParamId(next - 1)
        };
        let tok_emb = id();
        let pos_emb = id();
        let blocks = (0..c.n_layers)
            .map(|_| BlockIds {
                ln1_gain: id(),
                ln1_bias: id(),
                w_q: id(),
                w_k: id(),
                w_v: id(),
                w_o: id(),
                b_o: id(),
                ln2_gain: id(),
                ln2_bias: id(),
                w_ff1: id(),
                b_ff1: id(),
                w_ff2: id(),
                b_ff2: id(),
            })
            .collect();
        Layout {
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain: id(),
            lnf_bias: id(),
            w_out: id(),
            b_out: id(),
        }
    }
}

/// Stream label used for parameter initialization.
const INIT_STREAM: u64 = 0x494E_4954;

/// Complete model: configuration, vocabulary and weights.
#[derive(Debug, Clone)]
pub struct ModelParams<T: Scalar> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore<T>,
    pub layout: Layout,
}

impl<T: Scalar> PartialEq for ModelParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.vocab == other.vocab && self.store == other.store
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Deterministic initialization: each matrix is drawn from its own
    /// stream `(seed, mix(INIT, index))`, uniform in `[-a, a]` with
    /// `a = 1/sqrt(fan_in)` for projections (residual outputs further scaled
    /// by `1/sqrt(2 * n_layers)`), `a = 0.1` for embedding tables; gains
    /// start at one and biases at zero.
    pub fn init(config: &ModelConfig, vocab: &Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::BadConfig(format!(
                "vocab_size {} does not match vocabulary of {} symbols",
                config.vocab_size,
                vocab.len()
            )));
        }
        let mut store = ParamStore::new();
        for (i, (name, [r, c], init)) in declarations(config).into_iter().enumerate() {
            let value = match init {
                Init::Zeros => Array::zeros(r, c),
                Init::Ones => Array::filled(r, c, T::one()),
                Init::Uniform(a) => {
                    let mut rng = RngStream::new(seed, mix_stream(INIT_STREAM, &[i as u64]));
                    let data = (0..r * c).map(|_| T::of(rng.uniform_in(-a, a))).collect();
                    Array::new(r, c, data)?
                }
            };
            store.push(name, value);
        }
        Ok(Self {
            config: config.clone(),
            vocab: vocab.clone(),
            store,
            layout: Layout::for_config(config),
        })
    }

    /// Rebuilds a model from stored matrices, checking names and shapes.
    pub fn from_parts(config: ModelConfig, vocab: Vocab, matrices: Vec<Array<T>>) -> Result<Self> {
        config.validate()?;
        let decl = declarations(&config);
        if decl.len() != matrices.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} matrices, found {}",
                decl.len(),
                matrices.len()
            )));
        }
        let mut store = ParamStore::new();
        for ((name, shape, _), m) in decl.into_iter().zip(matrices) {
            if m.shape() != shape {
                return Err(Error::CheckpointMismatch(format!(
                    "{name}: expected {shape:?}, found {:?}",
                    m.shape()
                )));
            }
            store.push(name, m);
        }
        let layout = Layout::for_config(&config);
        Ok(Self {
            config,
            vocab,
            store,
            layout,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind<'p>(&'p self, g: &mut Graph<'p, T>) -> Bound {
        Bound {
            nodes: self.store.ids().map(|id| g.param(id, self.store.get(id))).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Array<T> {
        self.store.get(id)
    }
}

/// Graph nodes of a bound parameter set, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    nodes: Vec<NodeId>,
}

impl Bound {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(n: usize) -> Vocab {
        Vocab::new((0..n).map(|i| format!("w{i}")).collect()).unwrap()
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = ModelConfig { vocab_size: 20, ..ModelConfig::default() };
        let v = vocab(12);
        let a = ModelParams::<f32>::init(&cfg, &v, 9).unwrap();
        let b = ModelParams::<f32>::init(&cfg, &v, 9).unwrap();
        let bits = |p: &ModelParams<f32>| p.store.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = ModelParams::<f32>::init(&cfg, &v, 10).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = ModelConfig { d_model: 32, n_heads: 5, ..ModelConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::BadConfig(_))));
    }

    #[test]
    fn parameter_count_closed_form() {
        let cfg = ModelConfig::default();
        let v = vocab(cfg.vocab_size - 8);
        let p = ModelParams::<f64>::init(&cfg, &v, 0).unwrap();
        let (vs, d, f, s, l) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.max_seq, cfg.n_layers);
        // embeddings + blocks (2 norms, 4 square projections, output bias,
        // two feed-forward layers with biases) + final norm + output head
        let per_block = 2 * d + 4 * d * d + d + 2 * d + d * f + f + f * d + d;
        let expected = vs * d + s * d + l * per_block + 2 * d + d * vs + vs;
        assert_eq!(p.param_count(), expected);
        assert_eq!(expected, 64 * 64 + 96 * 64 + 2 * 49_792 + 128 + 64 * 64 + 64);
    }
}
