//! Closed-form prefill FLOPs, measured FLOP counting, and the end-to-end
//! speed metric.
//!
//! All closed forms share the per-sequence transformer cost
//! `T(x) = 4xd² + 4xd²/g + 2x²d + 6xdI` (Q/O projections, K/V projections
//! under grouped-query attention, causal attention, gated FFN):
//!
//! * full attention: `L·T(n)`
//! * star attention: host 1 pays `T(n/H)`, every other host `T(2n/H)`
//! * APB: host 1 pays `T(n/H)`, every other host `T(n/H + l_a)`, plus
//!   `l_p·H·(H−1)·(n/H + l_a)·d` for the passing keys.
//!
//! The APB and star expressions are evaluated in expanded form so that the
//! single-host reductions agree with [`flops_full`] bit-for-bit.

use serde::Serialize;

use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostParams {
    pub layers: u64,
    pub n: u64,
    pub hidden: u64,
    pub intermediate: u64,
    pub group: u64,
    pub hosts: u64,
    pub anchor_len: u64,
    pub passing_len: u64,
}

impl CostParams {
    /// Llama-3.1-8B dimensions at sequence length `n`.
    pub fn llama_8b(n: u64) -> Self {
        Self {
            layers: 32,
            n,
            hidden: 4096,
            intermediate: 14336,
            group: 4,
            hosts: 1,
            anchor_len: 0,
            passing_len: 0,
        }
    }
}

fn per_sequence(x: f64, p: &CostParams) -> f64 {
    let (d, i, g) = (p.hidden as f64, p.intermediate as f64, p.group as f64);
    4.0 * x * d * d + 4.0 * x * d * d / g + 2.0 * x * x * d + 6.0 * x * d * i
}

pub fn flops_full(p: &CostParams) -> f64 {
    p.layers as f64 * per_sequence(p.n as f64, p)
}

pub fn flops_star(p: &CostParams) -> f64 {
    let (l, n, d, i, g, h) = (
        p.layers as f64,
        p.n as f64,
        p.hidden as f64,
        p.intermediate as f64,
        p.group as f64,
        p.hosts as f64,
    );
    if h == 0.0 {
        return 0.0;
    }
    (l / h)
        * ((8.0 * h - 4.0) * n * d * d
            + (8.0 * h - 4.0) * n * d * d / g
            + ((8.0 * h - 6.0) / h) * n * n * d
            + (12.0 * h - 6.0) * n * d * i)
}

pub fn flops_apb(p: &CostParams) -> f64 {
    let h = p.hosts as f64;
    if h == 0.0 {
        return 0.0;
    }
    let block = p.n as f64 / h;
    let extended = block + p.anchor_len as f64;
    let first = per_sequence(block, p);
    let others = (h - 1.0) * per_sequence(extended, p);
    let passing = p.passing_len as f64 * h * (h - 1.0) * extended * p.hidden as f64;
    p.layers as f64 * (first + others + passing)
}

/// FLOPs of executed kernels, grouped by the stage that issued them.
///
/// Matmuls count `2·m·k·n`; attention counts `4·head_dim` per charged score
/// entry (scores and value aggregation) where causal triangles are charged
/// half their square.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct FlopCounter {
    pub projection: f64,
    pub attention: f64,
    pub ffn: f64,
    /// Importance scoring; not part of the compared total.
    pub scorer: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlopKind {
    Projection,
    Ffn,
    Scorer,
}

impl FlopCounter {
    pub fn add_matmul(&mut self, kind: FlopKind, m: usize, k: usize, n: usize) {
        let f = 2.0 * m as f64 * k as f64 * n as f64;
        match kind {
            FlopKind::Projection => self.projection += f,
            FlopKind::Ffn => self.ffn += f,
            FlopKind::Scorer => self.scorer += f,
        }
    }

    pub fn add_attention(&mut self, head_dim: usize, score_area: f64) {
        self.attention += 4.0 * head_dim as f64 * score_area;
    }

    pub fn merge(&mut self, other: &FlopCounter) {
        self.projection += other.projection;
        self.attention += other.attention;
        self.ffn += other.ffn;
        self.scorer += other.scorer;
    }

    /// The term set of the closed forms: projections, attention, FFN.
    pub fn total(&self) -> f64 {
        self.projection + self.attention + self.ffn
    }
}

/// Reduce per-host counters in host-index order.
pub fn measured_flops(per_host: &[FlopCounter]) -> f64 {
    let mut acc = FlopCounter::default();
    for c in per_host {
        acc.merge(c);
    }
    acc.total()
}

/// Tokens processed per second of prefill plus decoding.
pub fn speed_metric(tokens_in: u64, tokens_out: u64, prefill_s: f64, decode_s: f64) -> Result<f64> {
    let total = prefill_s + decode_s;
    if total.is_nan() || total <= 0.0 {
        return Err(contract(format!("speed metric needs positive time, got {total}")));
    }
    Ok((tokens_in + tokens_out) as f64 / total)
}

/// Per-run summary emitted by the harness. Field order is the report order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub strategy: String,
    pub n: usize,
    #[serde(rename = "H")]
    pub hosts: usize,
    pub l_a: usize,
    pub l_p: usize,
    pub scorer: String,
    pub formula_flops: f64,
    pub measured_flops: f64,
    pub comm_elements: u64,
    pub prefill_s: f64,
    pub decode_s: f64,
    pub speed: f64,
    pub checksum: String,
    pub max_abs_err: Option<f32>,
    pub anchor_rows: usize,
    pub selected_digest: String,
    pub needle_passed: Option<bool>,
    pub generated: String,
}

impl CostReport {
    /// Copy with wall-clock derived fields zeroed, for determinism checks.
    pub fn without_timing(&self) -> CostReport {
        CostReport {
            prefill_s: 0.0,
            decode_s: 0.0,
            speed: 0.0,
            ..self.clone()
        }
    }
}
