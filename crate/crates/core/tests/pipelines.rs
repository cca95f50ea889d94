mod common;

use apb_core::compressor::Scorer;
use apb_core::layout::{split_document_query, SplitInput};
use apb_core::model::{reference_prefill, LayerWeights, ModelConfig, ModelWeights};
use apb_core::simnet::Schedule;
use apb_core::strategies::{
    apb_prefill, generate, ring_attention_prefill, ulysses_prefill, StrategyConfig, StrategyKind,
};
use apb_core::tensor::Matrix;
use apb_core::ApbError;

fn scaled(m: &Matrix, s: f32) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |r, c| m.get(r, c) * s)
}

/// Seeded weights scaled up so attention is far from uniform.
fn sharp(config: ModelConfig, seed: u64, s: f32) -> ModelWeights {
    let w = ModelWeights::seeded_with_retaining(config, seed, 16);
    let layers = w
        .layers
        .iter()
        .map(|l| LayerWeights {
            wq: scaled(&l.wq, s),
            wk: scaled(&l.wk, s),
            wv: scaled(&l.wv, s),
            wo: scaled(&l.wo, s),
            gate: scaled(&l.gate, s),
            up: scaled(&l.up, s),
            down: scaled(&l.down, s),
        })
        .collect();
    ModelWeights::new(
        w.config().clone(),
        scaled(&w.embedding, s * 2.0),
        layers,
        w.retaining.clone(),
    )
    .unwrap()
}

fn tokens(n: usize, vocab: u32) -> Vec<u32> {
    (0..n as u32).map(|i| (i * 37 + 11) % vocab).collect()
}

#[test]
fn exact_strategies_with_sharp_attention() {
    let w = sharp(ModelConfig::toy(), 3, 8.0);
    let t = tokens(256, 256);
    let reference = reference_prefill(&t, &w).unwrap();
    let oracle = common::causal_forward(&t, &w);
    assert!(common::max_diff(&reference.hidden, &oracle) < 1e-4);
    for hosts in [2, 4] {
        let ring = ring_attention_prefill(&t, &w, hosts, Schedule::Forward).unwrap();
        let uly = ulysses_prefill(&t, &w, hosts, Schedule::Forward).unwrap();
        assert!(ring.hidden().max_abs_diff(&reference.hidden) < 1e-4);
        assert!(uly.hidden().max_abs_diff(&reference.hidden) < 1e-4);
    }
}

#[test]
fn ulysses_replicates_kv_heads_when_hosts_outnumber_them() {
    let c = ModelConfig::new(1, 64, 8, 2, 64, 64, 10000.0).unwrap();
    let w = ModelWeights::seeded(c, 5);
    let t = tokens(64, 64);
    let reference = reference_prefill(&t, &w).unwrap();
    let r = ulysses_prefill(&t, &w, 8, Schedule::Parallel).unwrap();
    assert!(r.hidden().max_abs_diff(&reference.hidden) < 1e-5);
}

fn check_against_oracle(w: &ModelWeights, input: &SplitInput, cfg: &StrategyConfig, tol: f64) {
    let r = apb_prefill(input, w, cfg).unwrap();
    let hosts = common::oracle_hosts(
        &input.document,
        &input.query,
        cfg.hosts,
        cfg.anchor_len,
        cfg.embed_query,
        cfg.use_anchor,
    );
    let expect = common::apb_forward(&hosts, &r.selections, w);
    for (h, (got, want)) in r.block_hidden.iter().zip(&expect).enumerate() {
        let err = common::max_diff(got, want);
        assert!(err < tol, "host {h}: {err}");
    }
}

#[test]
fn apb_sharp_uneven_blocks_match_oracle() {
    let w = sharp(ModelConfig::toy(), 4, 6.0);
    let input = split_document_query(&tokens(262, 256), 12).unwrap();
    check_against_oracle(&w, &input, &StrategyConfig::apb(4, 10, 7), 1e-4);
}

#[test]
fn apb_without_anchor_matches_oracle() {
    let w = sharp(ModelConfig::toy(), 5, 6.0);
    let input = split_document_query(&tokens(200, 256), 8).unwrap();
    let cfg = StrategyConfig {
        use_anchor: false,
        embed_query: false,
        scorer: Scorer::Random,
        ..StrategyConfig::apb(4, 0, 5)
    };
    check_against_oracle(&w, &input, &cfg, 1e-4);
}

#[test]
fn single_host_apb_is_bitwise_reference() {
    let w = ModelWeights::seeded_with_retaining(ModelConfig::toy(), 6, 16);
    let input = SplitInput {
        document: tokens(100, 256),
        query: Vec::new(),
    };
    let apb = apb_prefill(&input, &w, &StrategyConfig::apb(1, 0, 0)).unwrap();
    let reference = reference_prefill(&input.document, &w).unwrap();
    assert_eq!(apb.hidden(), reference.hidden);
    assert_eq!(apb.first_token, reference.first_token);
}

#[test]
fn generation_independent_of_schedule() {
    let w = ModelWeights::seeded_with_retaining(ModelConfig::toy(), 7, 16);
    let input = split_document_query(&tokens(160, 256), 8).unwrap();
    let run = |schedule| {
        let cfg = StrategyConfig {
            schedule,
            ..StrategyConfig::apb(4, 8, 4)
        };
        generate(&input, &w, &cfg, 6, None).unwrap()
    };
    let a = run(Schedule::Forward);
    let b = run(Schedule::Parallel);
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.prefill.checksum(), b.prefill.checksum());
    assert_eq!(a.tokens.len(), 6);
}

#[test]
fn empty_query_generation_starts_from_prefill_token() {
    let w = ModelWeights::seeded_with_retaining(ModelConfig::toy(), 8, 16);
    let input = SplitInput {
        document: tokens(64, 256),
        query: Vec::new(),
    };
    let g = generate(&input, &w, &StrategyConfig::new(StrategyKind::Ring, 2), 3, None).unwrap();
    assert_eq!(g.tokens[0], g.prefill.first_token);
}

#[test]
fn retain_scorer_without_weights_is_reported() {
    let w = ModelWeights::seeded_with_retaining(ModelConfig::toy(), 9, 0);
    let input = split_document_query(&tokens(64, 256), 4).unwrap();
    let err = apb_prefill(&input, &w, &StrategyConfig::apb(2, 4, 4)).unwrap_err();
    assert!(matches!(err, ApbError::ScorerWeightsUnavailable { layer: 0 }));
    assert_eq!(err.exit_code(), 3);
}
