//! Browser bindings for the simulator demo page.
//!
//! Every export returns a JSON string; failures come back as
//! `{"error": "..."}` so the page never has to catch exceptions.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use apb_core::compressor::Scorer;
use apb_core::costmodel::{flops_apb, flops_full, flops_star};
use apb_core::harness::{make_workload, PRESETS};
use apb_core::layout::{build_apb_mask, split_document_query};
use apb_core::model::{reference_prefill, ModelConfig, ModelWeights};
use apb_core::simnet::Schedule;
use apb_core::strategies::{generate_from, run_prefill, StrategyConfig, StrategyKind};

fn respond(r: Result<Value, String>) -> String {
    r.unwrap_or_else(|e| json!({ "error": e })).to_string()
}

/// Visibility grid of the anchor/passing/block mask: one row per query
/// (anchor rows first), one column per key.
pub fn mask_grid_value(anchor: usize, passing: usize, block: usize) -> Result<Value, String> {
    if block == 0 || anchor + passing + block > 256 {
        return Err("need 1 <= block and at most 256 keys".into());
    }
    let mask = build_apb_mask(anchor, passing, block);
    let rows: Vec<String> = mask
        .to_dense(anchor + block)
        .iter()
        .map(|r| r.iter().map(|&v| if v { '1' } else { '0' }).collect())
        .collect();
    Ok(json!({ "anchor": anchor, "passing": passing, "block": block, "rows": rows }))
}

#[wasm_bindgen]
pub fn mask_grid(anchor: usize, passing: usize, block: usize) -> String {
    respond(mask_grid_value(anchor, passing, block))
}

/// Formula FLOPs of full, star and APB prefill at every preset length.
pub fn flops_curves_value() -> Value {
    let rows: Vec<Value> = PRESETS
        .iter()
        .map(|p| {
            let params = p.cost_params();
            json!({
                "preset": p.name,
                "n": p.n,
                "full": flops_full(&params),
                "star": flops_star(&params),
                "apb": flops_apb(&params),
            })
        })
        .collect();
    Value::Array(rows)
}

#[wasm_bindgen]
pub fn flops_curves() -> String {
    flops_curves_value().to_string()
}

/// Prefill and greedily decode a seeded toy workload with one strategy.
pub fn run_toy_value(strategy: &str, hosts: usize, passing_len: usize, seed: u64) -> Result<Value, String> {
    let kind: StrategyKind = strategy.parse().map_err(|e: apb_core::ApbError| e.to_string())?;
    let (n, query_len) = (256, 16);
    let weights = ModelWeights::seeded_with_retaining(ModelConfig::toy(), seed, 64);
    let tokens = make_workload(n, query_len, seed.wrapping_add(1), 256, None).map_err(|e| e.to_string())?;
    let input = split_document_query(&tokens, query_len).map_err(|e| e.to_string())?;
    let doc = input.document.len();
    let cfg = match kind {
        StrategyKind::Apb => StrategyConfig {
            scorer: Scorer::Retain,
            seed,
            ..StrategyConfig::apb(hosts, doc / hosts.max(1) / 4, passing_len)
        },
        StrategyKind::Star => StrategyConfig::star(hosts, doc).map_err(|e| e.to_string())?,
        other => StrategyConfig::new(other, hosts),
    };
    let prefill = run_prefill(&input, &weights, &cfg).map_err(|e| e.to_string())?;
    let reference = reference_prefill(&input.document, &weights).map_err(|e| e.to_string())?;
    let err = prefill.hidden().max_abs_diff(&reference.hidden);
    let comm = prefill.trace.volume();
    let flops = prefill.measured_flops();
    let cached: Vec<usize> = prefill.caches.iter().map(|c| c.len()).collect();
    let anchor_rows = prefill.anchor_rows();
    let g = generate_from(prefill, &input.query, &weights, Schedule::Forward, 8, None).map_err(|e| e.to_string())?;
    Ok(json!({
        "strategy": kind.to_string(),
        "hosts": hosts,
        "document": doc,
        "max_abs_err": err,
        "comm_elements": comm,
        "measured_flops": flops,
        "cached_rows_per_host": cached,
        "anchor_rows": anchor_rows,
        "generated": g.tokens,
        "checksum": g.prefill.checksum(),
    }))
}

#[wasm_bindgen]
pub fn run_toy(strategy: &str, hosts: usize, passing_len: usize, seed: u64) -> String {
    respond(run_toy_value(strategy, hosts, passing_len, seed))
}
