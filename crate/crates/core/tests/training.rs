//! Library-level pipeline on a small synthetic task: train a few steps,
//! checkpoint, reload, evaluate.

use rimeforge::objectives::{joint_gradients, LossConfig};
use rimeforge::retrieval::{evaluate_modes, EvalConfig, Pathway};
use rimeforge::seqmodel::checkpoint::{model_from_bytes, model_to_bytes};
use rimeforge::seqmodel::{ModelConfig, ModelParams};
use rimeforge::synthtask::{gen_corpus, make_batches, Dataset, TaskConfig};
use rimeforge::tensorcore::{Optimizer, OptimizerConfig, RngStream};

fn dataset() -> Dataset {
    gen_corpus(&TaskConfig {
        n_groups: 2,
        pairs_per_group: 8,
        eval_queries_per_group: 4,
        eval_corpus_per_group: 8,
        ..TaskConfig::default()
    })
    .unwrap()
}

fn model(data: &Dataset) -> ModelParams<f32> {
    let cfg = ModelConfig { vocab_size: data.vocab.len(), d_model: 16, n_heads: 2, n_layers: 1, d_ff: 32, max_seq: 48 };
    ModelParams::init(&cfg, &data.vocab, 3).unwrap()
}

#[test]
fn repeated_steps_fit_a_fixed_batch() {
    let data = dataset();
    let mut m = model(&data);
    let batch = make_batches(&data, 4, &mut RngStream::new(0, 0)).unwrap().remove(0);
    let cfg = LossConfig { tau: 0.1, ..LossConfig::default() };
    let mut opt = Optimizer::new(OptimizerConfig { lr: 3e-3, ..OptimizerConfig::default() }, &m.store);
    let (first, _) = joint_gradients(&m, &batch, &cfg).unwrap();
    for _ in 0..30 {
        let (_, grads) = joint_gradients(&m, &batch, &cfg).unwrap();
        opt.step(&mut m.store, &grads).unwrap();
    }
    let (last, _) = joint_gradients(&m, &batch, &cfg).unwrap();
    assert!(last.joint < 0.7 * first.joint, "{first:?} -> {last:?}");
    assert!(last.rewrite < first.rewrite);
}

#[test]
fn checkpoints_round_trip_and_evaluate_identically() {
    let data = dataset();
    let m = model(&data);
    let bytes = model_to_bytes(&m).unwrap();
    let back: ModelParams<f32> = model_from_bytes(&bytes).unwrap();
    assert_eq!(model_to_bytes(&back).unwrap(), bytes);

    let cfg = EvalConfig { budget: 16, ..EvalConfig::default() };
    let set = data.eval_set();
    let a = evaluate_modes(&m, &set, &Pathway::ALL, &cfg).unwrap();
    let b = evaluate_modes(&back, &set, &Pathway::ALL, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.pathways.len(), 4);
    for p in &a.pathways {
        assert_eq!(p.queries, set.queries.len());
        assert!((0.0..=1.0).contains(&p.metrics.hit_at_1));
        assert!(p.metrics.recall_at_10 >= p.metrics.recall_at_1);
    }
    let disc = a.get(Pathway::ALL[0]).unwrap();
    assert_eq!(disc.query_tokens, 0.0);
    assert!(a.get(Pathway::ALL[3]).unwrap().query_tokens > 0.0);
}
