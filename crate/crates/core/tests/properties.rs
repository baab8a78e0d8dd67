//! Property tests for the library's invariants.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rimeforge::grpo::{advantages, clipped_term, kl_estimate};
use rimeforge::objectives::info_nce;
use rimeforge::retrieval::{hit_at_k, ndcg_at_k, precision_at_k, rank, recall_at_k, EmbeddingIndex, Judgments, Ranking};
use rimeforge::rewards::{format_reward, gap_reward, process_reward, RewardBreakdown, RewardContext};
use rimeforge::seqmodel::{special, Embedding, EmbeddingMode, TokenId};
use rimeforge::synthtask::{gen_corpus, make_batches, TaskConfig};
use rimeforge::tensorcore::{Array, Graph, RngStream};

fn raw_vector(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, dim).prop_filter("non-degenerate", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-4)
}

fn embeddings(dim: usize, n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Embedding>> {
    prop::collection::vec(raw_vector(dim), n)
        .prop_map(|vs| vs.into_iter().map(|v| Embedding::from_raw(v, EmbeddingMode::Gen).unwrap()).collect())
}

fn small_task(seed: u64) -> TaskConfig {
    TaskConfig {
        n_groups: 3,
        pairs_per_group: 10,
        eval_queries_per_group: 4,
        eval_corpus_per_group: 8,
        seed,
        ..TaskConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn advantages_are_centered_and_shift_invariant(
        rewards in prop::collection::vec(-4.0f64..4.0, 2..16),
        shift in -10.0f64..10.0,
    ) {
        let a = advantages(&rewards, 1e-8);
        prop_assert!((a.iter().sum::<f64>() / a.len() as f64).abs() <= 1e-9);
        let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        for (x, y) in a.iter().zip(advantages(&shifted, 1e-8)) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn advantages_are_scale_invariant_without_floor(
        rewards in prop::collection::vec(-4.0f64..4.0, 2..16),
        scale in 0.01f64..100.0,
    ) {
        let a = advantages(&rewards, 0.0);
        let scaled: Vec<f64> = rewards.iter().map(|r| r * scale).collect();
        for (x, y) in a.iter().zip(advantages(&scaled, 0.0)) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn constant_groups_have_no_advantage(value in -5.0f64..5.0, k in 2usize..16) {
        prop_assert!(advantages(&vec![value; k], 1e-8).iter().all(|&a| a == 0.0));
    }

    /// The min-clip surrogate is capped at `(1+ε)A` for positive advantages;
    /// for negative ones only the ratio itself bounds it.
    #[test]
    fn clipped_surrogate_bounds(ratio in 0.0f64..5.0, adv in -3.0f64..3.0, eps in 0.01f64..0.9) {
        let term = clipped_term(ratio, adv, eps);
        if adv >= 0.0 {
            prop_assert!(term >= 0.0 && term <= (1.0 + eps) * adv + 1e-12);
        }
        if ratio <= 1.0 + eps {
            prop_assert!(term.abs() <= (1.0 + eps) * adv.abs() + 1e-12);
        }
        prop_assert!(term.abs() <= ratio.max(1.0 + eps) * adv.abs() + 1e-12);
        prop_assert_eq!(clipped_term(1.0, adv, eps), adv);
    }

    #[test]
    fn kl_estimate_is_nonnegative(
        pairs in prop::collection::vec((-8.0f64..0.0, -8.0f64..0.0), 0..20),
    ) {
        let (p, r): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assert!(kl_estimate(&p, &r) >= 0.0);
        prop_assert_eq!(kl_estimate(&p, &p), 0.0);
    }

    #[test]
    fn embeddings_have_unit_norm(v in raw_vector(7)) {
        let e = Embedding::from_raw(v, EmbeddingMode::Disc).unwrap();
        prop_assert!((e.dot(&e) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_sorts_scores_descending(items in embeddings(5, 1..40), query in raw_vector(5), k in 1usize..50) {
        let q = Embedding::from_raw(query, EmbeddingMode::Gen).unwrap();
        let indexed: Vec<(u32, Embedding)> = items.into_iter().enumerate().map(|(i, e)| (i as u32, e)).collect();
        let index = EmbeddingIndex::build(&indexed, EmbeddingMode::Gen).unwrap();
        let ranked = rank(&q, &index, k).unwrap();
        prop_assert_eq!(ranked.len(), k.min(indexed.len()));
        prop_assert!(ranked.windows(2).all(|w| w[0].1 >= w[1].1));
        prop_assert_eq!(ranked.iter().map(|r| r.0).collect::<BTreeSet<_>>().len(), ranked.len());
    }

    #[test]
    fn metrics_are_bounded_and_monotone(
        order in Just((0u32..30).collect::<Vec<_>>()).prop_shuffle(),
        relevant in prop::collection::btree_set(0u32..30, 0..10),
    ) {
        let rankings = vec![Ranking { query: 0, items: order }];
        let judgments: Judgments = BTreeMap::from([(0, relevant)]);
        let mut last_hit = 0.0;
        let mut last_recall = 0.0;
        for k in 1..=30 {
            let hit = hit_at_k(&rankings, &judgments, k).unwrap();
            let recall = recall_at_k(&rankings, &judgments, k).unwrap();
            let precision = precision_at_k(&rankings, &judgments, k).unwrap();
            let ndcg = ndcg_at_k(&rankings, &judgments, k).unwrap();
            for m in [hit, recall, precision, ndcg] {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&m));
            }
            prop_assert!(hit >= last_hit && recall >= last_recall);
            prop_assert!(precision <= hit);
            last_hit = hit;
            last_recall = recall;
        }
    }

    #[test]
    fn info_nce_is_nonnegative_and_ln_n_when_identical(
        rows in prop::collection::vec(raw_vector(4), 1..8),
        tau in 0.05f64..2.0,
    ) {
        let unit: Vec<Vec<f64>> = rows.iter().map(|v| Embedding::from_raw(v.clone(), EmbeddingMode::Disc).unwrap().vector).collect();
        let mut g = Graph::<f64>::new();
        let q = g.leaf(Array::from_rows(&unit).unwrap());
        let mut shuffled = unit.clone();
        shuffled.rotate_left(1);
        let t = g.leaf(Array::from_rows(&shuffled).unwrap());
        let l = info_nce(&mut g, q, t, tau, false).unwrap();
        prop_assert!(g.scalar(l) >= -1e-12);
        let same = g.leaf(Array::from_rows(&vec![unit[0].clone(); unit.len()]).unwrap());
        let l = info_nce(&mut g, same, same, tau, true).unwrap();
        prop_assert!((g.scalar(l) - 2.0 * (unit.len() as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn gap_reward_is_bounded(
        q in raw_vector(6),
        pos in embeddings(6, 1..4),
        neg in embeddings(6, 1..6),
        discs in embeddings(6, 3..6),
    ) {
        let ctx = RewardContext {
            query_input: vec![special::BOS],
            query_disc: discs[0].clone(),
            positive_disc: discs[1].clone(),
            negative_disc: discs[2..].to_vec(),
            positive_gen: pos,
            negative_gen: neg,
            single_negative: false,
        };
        let gap = gap_reward(&ctx, &Embedding::from_raw(q, EmbeddingMode::Gen).unwrap()).unwrap();
        prop_assert!((-2.0..=2.0).contains(&gap));
        let process = process_reward(&ctx, gap).unwrap();
        prop_assert_eq!(process, if gap > ctx.disc_gap().unwrap() { 1.0 } else { 0.0 });
        prop_assert_eq!(process_reward(&ctx, ctx.disc_gap().unwrap()).unwrap(), 0.0);
        let b = RewardBreakdown::new(1.0, gap, process);
        prop_assert_eq!(b.total, b.format + b.gap + b.process);
    }

    #[test]
    fn format_reward_accepts_exactly_the_template(
        body in prop::collection::vec(0u32..16, 0..6),
        prefix in prop::bool::ANY,
        suffix in prop::bool::ANY,
    ) {
        let body: Vec<TokenId> = body.into_iter().map(|t| t as TokenId).collect();
        let mut tokens = vec![];
        if prefix {
            tokens.push(special::THINK_OPEN);
        }
        tokens.extend(&body);
        if suffix {
            tokens.extend([special::THINK_CLOSE, special::ANSWER, special::EOS]);
        }
        let is_content = |t: &TokenId| *t as usize >= special::COUNT;
        let expected = match tokens.as_slice() {
            [open, inner @ .., close, answer, eos] => {
                *open == special::THINK_OPEN
                    && !inner.is_empty()
                    && inner.iter().all(is_content)
                    && (*close, *answer, *eos) == (special::THINK_CLOSE, special::ANSWER, special::EOS)
            }
            _ => false,
        };
        prop_assert_eq!(format_reward(&tokens), if expected { 1.0 } else { 0.0 });
        if prefix && suffix && !body.is_empty() && body.iter().all(is_content) {
            prop_assert_eq!(format_reward(&tokens), 1.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn datasets_are_a_function_of_the_config(seed in 0u64..1000) {
        let a = gen_corpus(&small_task(seed)).unwrap();
        let b = gen_corpus(&small_task(seed)).unwrap();
        prop_assert_eq!(&a.train, &b.train);
        prop_assert_eq!(&a.eval_queries, &b.eval_queries);
        prop_assert_eq!(&a.eval_corpus, &b.eval_corpus);
        prop_assert!(a.eval_queries.iter().all(|q| a.eval_corpus.iter().any(|c| a.is_relevant(q, c))));
    }

    #[test]
    fn batches_partition_an_epoch(seed in 0u64..1000, batch in 1usize..10, shuffle in 0u64..1000) {
        let data = gen_corpus(&small_task(seed)).unwrap();
        let batches = make_batches(&data, batch, &mut RngStream::new(shuffle, 0)).unwrap();
        let mut seen: Vec<(Vec<TokenId>, Vec<TokenId>)> = Vec::new();
        for b in &batches {
            prop_assert!(!b.is_empty() && b.len() <= batch);
            prop_assert_eq!(b.queries.len(), b.targets.len());
            for (q, t) in b.queries.iter().zip(&b.targets) {
                seen.push((q.input.clone(), t.input.clone()));
            }
        }
        let mut expected: Vec<(Vec<TokenId>, Vec<TokenId>)> =
            data.train.iter().map(|p| (p.query.input.clone(), p.target.input.clone())).collect();
        seen.sort();
        expected.sort();
        prop_assert_eq!(seen, expected);
        // Homogeneous: every batch draws from a single group.
        for b in &batches {
            let groups: BTreeSet<u32> = data
                .train
                .iter()
                .filter(|p| b.queries.iter().any(|q| q.input == p.query.input))
                .map(|p| p.query.group)
                .collect();
            prop_assert_eq!(groups, BTreeSet::from([b.group]));
        }
    }
}
