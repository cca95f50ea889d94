//! Sequence-parallel prefill pipelines and distributed decoding.
//!
//! Every strategy prefills the document part of the input over a
//! [`HostGroup`] and leaves one KV cache shard per host. Decoding is shared:
//! each host attends the new tokens against its own shard, partial results
//! are merged by log-sum-exp, and the FFN runs replicated on every host.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::compressor::{
    compress_block, oracle_score, random_score, retaining_head_score, select_top, CompressedBlock, ImportanceScores,
    Scorer,
};
use crate::costmodel::FlopCounter;
use crate::error::{config, contract, Result};
use crate::layout::{block_ranges, build_apb_mask, build_host_layouts, HostLayout, SplitInput};
use crate::model::{
    attend_head_range, attend_heads, concat_heads, finish_layer, project_qkv, reference_prefill, KVCache, LayerCache,
    ModelWeights, Qkv,
};
use crate::simnet::{CommTrace, HostGroup, Schedule};
use crate::tensor::{merge_partial_attention, MaskSpec, Matrix, PartialAttention};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StrategyKind {
    Full,
    Ring,
    Ulysses,
    Star,
    Apb,
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StrategyKind::Full => "full",
            StrategyKind::Ring => "ring",
            StrategyKind::Ulysses => "ulysses",
            StrategyKind::Star => "star",
            StrategyKind::Apb => "apb",
        })
    }
}

impl FromStr for StrategyKind {
    type Err = crate::error::ApbError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(StrategyKind::Full),
            "ring" => Ok(StrategyKind::Ring),
            "ulysses" => Ok(StrategyKind::Ulysses),
            "star" => Ok(StrategyKind::Star),
            "apb" => Ok(StrategyKind::Apb),
            other => Err(config(format!(
                "unknown strategy {other:?} (full|ring|ulysses|star|apb)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub hosts: usize,
    pub anchor_len: usize,
    pub passing_len: usize,
    pub embed_query: bool,
    pub use_anchor: bool,
    pub use_passing: bool,
    pub scorer: Scorer,
    pub seed: u64,
    /// Document token range forced into every selection by the oracle scorer.
    pub needle: Option<Range<usize>>,
    pub schedule: Schedule,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind, hosts: usize) -> Self {
        Self {
            kind,
            hosts,
            anchor_len: 0,
            passing_len: 0,
            embed_query: false,
            use_anchor: false,
            use_passing: false,
            scorer: Scorer::Retain,
            seed: 0,
            needle: None,
            schedule: Schedule::Forward,
        }
    }

    /// Full APB: anchor with embedded query, passing blocks, retaining heads.
    pub fn apb(hosts: usize, anchor_len: usize, passing_len: usize) -> Self {
        Self {
            anchor_len,
            passing_len,
            embed_query: true,
            use_anchor: true,
            use_passing: true,
            ..Self::new(StrategyKind::Apb, hosts)
        }
    }

    /// Star attention: anchor as long as a block, no query, no passing.
    pub fn star(hosts: usize, doc_len: usize) -> Result<Self> {
        let block = block_ranges(doc_len, hosts)?[0].len();
        Ok(Self {
            anchor_len: block,
            use_anchor: true,
            ..Self::new(StrategyKind::Star, hosts)
        })
    }

    pub fn with_ablation(mut self, row: &AblationRow) -> Self {
        self.use_anchor = row.anchor;
        self.use_passing = row.passing;
        self.scorer = row.scorer;
        self.embed_query = row.embed_query;
        self
    }

    pub fn validate(&self, doc_len: usize) -> Result<()> {
        if self.hosts == 0 {
            return Err(config("hosts must be at least 1"));
        }
        if self.hosts > doc_len {
            return Err(config(format!("{} hosts for a {doc_len}-token document", self.hosts)));
        }
        match self.kind {
            StrategyKind::Full if self.hosts != 1 => Err(config("full attention runs on exactly 1 host")),
            StrategyKind::Star => {
                let block = block_ranges(doc_len, self.hosts)?[0].len();
                if self.passing_len != 0 || self.use_passing || self.embed_query || self.anchor_len != block {
                    return Err(config("star attention requires l_p=0, l_a=l_b and no query embedding"));
                }
                Ok(())
            }
            StrategyKind::Apb if self.use_anchor && self.anchor_len > doc_len => Err(config(
                format!("anchor length {} exceeds document length {doc_len}", self.anchor_len),
            )),
            _ => Ok(()),
        }
    }
}

/// One configuration of the component ablation lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationRow {
    pub no: usize,
    pub anchor: bool,
    pub passing: bool,
    pub scorer: Scorer,
    pub embed_query: bool,
}

const fn row(no: usize, anchor: bool, passing: bool, scorer: Scorer, embed_query: bool) -> AblationRow {
    AblationRow {
        no,
        anchor,
        passing,
        scorer,
        embed_query,
    }
}

pub const ABLATION_ROWS: [AblationRow; 9] = [
    row(0, true, true, Scorer::Retain, true),
    row(1, true, true, Scorer::Retain, false),
    row(2, true, true, Scorer::Random, true),
    row(3, true, true, Scorer::Random, false),
    row(4, true, false, Scorer::Random, true),
    row(5, true, false, Scorer::Random, false),
    row(6, false, true, Scorer::Retain, false),
    row(7, false, true, Scorer::Random, false),
    row(8, false, false, Scorer::Random, false),
];

/// Outcome of a distributed prefill.
#[derive(Clone, Debug)]
pub struct PrefillResult {
    pub kind: StrategyKind,
    /// Final hidden states of each host's document block.
    pub block_hidden: Vec<Matrix>,
    /// Final hidden states of each host's anchor (empty where none).
    pub anchor_hidden: Vec<Matrix>,
    /// Document range held by each host.
    pub block_ranges: Vec<Range<usize>>,
    /// Block KV per host; anchor KV is never cached.
    pub caches: Vec<KVCache>,
    pub first_token: u32,
    pub flops: Vec<FlopCounter>,
    pub trace: CommTrace,
    /// `[layer][host]` document indices each host selected for passing.
    pub selections: Vec<Vec<Vec<usize>>>,
}

impl PrefillResult {
    pub fn hosts(&self) -> usize {
        self.caches.len()
    }

    /// Block hidden states of all hosts in document order.
    pub fn hidden(&self) -> Matrix {
        let cols = self.block_hidden[0].cols();
        Matrix::vstack(&self.block_hidden, cols).expect("uniform hidden width")
    }

    pub fn anchor_rows(&self) -> usize {
        self.anchor_hidden.iter().map(Matrix::rows).sum()
    }

    /// Total cached rows per layer across hosts.
    pub fn cached_rows(&self) -> Vec<usize> {
        let layers = self.caches[0].layers.len();
        (0..layers)
            .map(|l| self.caches.iter().map(|c| c.layers[l].len()).sum())
            .collect()
    }

    /// Document indices in host `host`'s passing block at `layer`.
    pub fn passing_sources(&self, layer: usize, host: usize) -> Vec<usize> {
        self.selections
            .get(layer)
            .map(|hosts| hosts[..host].concat())
            .unwrap_or_default()
    }

    pub fn measured_flops(&self) -> f64 {
        crate::costmodel::measured_flops(&self.flops)
    }

    /// SHA-256 over the first token, block hidden states and caches.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.first_token.to_le_bytes());
        let mut put = |m: &Matrix| {
            for x in m.data() {
                h.update(x.to_le_bytes());
            }
        };
        for m in &self.block_hidden {
            put(m);
        }
        for cache in &self.caches {
            for layer in &cache.layers {
                layer.k.iter().chain(&layer.v).for_each(&mut put);
            }
        }
        hex(&h.finalize()[..16])
    }

    /// SHA-256 over every selected index, for comparing selection behavior.
    pub fn selection_digest(&self) -> String {
        let mut h = Sha256::new();
        for (layer, hosts) in self.selections.iter().enumerate() {
            for (host, sel) in hosts.iter().enumerate() {
                h.update((layer as u64).to_le_bytes());
                h.update((host as u64).to_le_bytes());
                for &i in sel {
                    h.update((i as u64).to_le_bytes());
                }
            }
        }
        hex(&h.finalize()[..8])
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn empty_heads(count: usize, head_dim: usize) -> Vec<Matrix> {
    vec![Matrix::zeros(0, head_dim); count]
}

/// Stack per-KV-head matrices of several sources, head by head.
fn stack_heads(sources: &[Vec<Matrix>], heads: usize, head_dim: usize) -> Result<Vec<Matrix>> {
    (0..heads)
        .map(|h| Matrix::vstack(sources.iter().map(|s| &s[h]), head_dim))
        .collect()
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn scorer_seed(seed: u64, layer: usize, host: usize) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ layer as u64) ^ host as u64)
}

/// Per-host state of the APB pipeline.
#[derive(Debug)]
pub struct ApbHost {
    pub layout: HostLayout,
    pub anchor_hidden: Matrix,
    pub block_hidden: Matrix,
    pub flops: FlopCounter,
    pub cache: KVCache,
    qkv: Option<Qkv>,
    passing: Option<(Vec<Matrix>, Vec<Matrix>)>,
}

impl ApbHost {
    pub fn new(layout: HostLayout, weights: &ModelWeights) -> Result<Self> {
        Ok(Self {
            anchor_hidden: weights.embed(&layout.anchor)?,
            block_hidden: weights.embed(&layout.block)?,
            layout,
            flops: FlopCounter::default(),
            cache: KVCache::default(),
            qkv: None,
            passing: None,
        })
    }
}

fn score_block(
    host: &mut ApbHost,
    block: &Qkv,
    layer: usize,
    weights: &ModelWeights,
    cfg: &StrategyConfig,
) -> Result<ImportanceScores> {
    let seed = scorer_seed(cfg.seed, layer, host.layout.host);
    let len = host.layout.block_len();
    Ok(match cfg.scorer {
        Scorer::Retain => retaining_head_score(
            weights.config(),
            &block.q,
            &block.k,
            &block.v,
            weights.retaining.as_ref(),
            layer,
            &mut host.flops,
        )?,
        Scorer::Random => random_score(seed, len),
        Scorer::Oracle => oracle_score(seed, len, host.layout.block_start, cfg.needle.clone()),
    })
}

/// One APB layer on every host: project, compress, all-gather the
/// compressed blocks, attend over `[anchor | passing | block]`, and run the
/// FFN on anchor and block rows. Returns each host's selected document
/// indices (empty when passing is off).
pub fn apb_prefill_layer(
    group: &mut HostGroup,
    hosts: &mut [ApbHost],
    layer: usize,
    weights: &ModelWeights,
    cfg: &StrategyConfig,
) -> Result<Vec<Vec<usize>>> {
    let c = weights.config();
    let compressed: Vec<Option<CompressedBlock>> = group.run_hosts(hosts, |_, host| {
        let x = Matrix::vstack([&host.anchor_hidden, &host.block_hidden], c.hidden)?;
        let qkv = project_qkv(&x, layer, weights, &host.layout.positions(), &mut host.flops)?;
        let block = qkv.slice_tokens(host.layout.anchor_len(), qkv.tokens());
        let out = if cfg.use_passing {
            let scores = score_block(host, &block, layer, weights, cfg)?;
            let indices = select_top(&scores, cfg.passing_len);
            Some(compress_block(&block.k, &block.v, &host.layout.block_positions, &indices)?)
        } else {
            None
        };
        host.qkv = Some(qkv);
        Ok(out)
    })?;

    let mut selections = vec![Vec::new(); hosts.len()];
    if cfg.use_passing {
        let blocks: Vec<CompressedBlock> = compressed.into_iter().flatten().collect();
        for ((sel, block), host) in selections.iter_mut().zip(&blocks).zip(hosts.iter()) {
            *sel = block.indices.iter().map(|i| host.layout.block_start + i).collect();
        }
        let (ks, vs): (Vec<Vec<Matrix>>, Vec<Vec<Matrix>>) = blocks.into_iter().map(|b| (b.k, b.v)).unzip();
        let k_lists = group.all_gather(ks)?;
        let v_lists = group.all_gather(vs)?;
        for (i, (host, (kl, vl))) in hosts.iter_mut().zip(k_lists.into_iter().zip(v_lists)).enumerate() {
            // Only hosts before this one contribute to its passing block.
            host.passing = Some((
                stack_heads(&kl[..i], c.kv_heads, c.head_dim)?,
                stack_heads(&vl[..i], c.kv_heads, c.head_dim)?,
            ));
        }
    }

    group.run_hosts(hosts, |_, host| {
        let qkv = host.qkv.take().ok_or_else(|| contract("APB layer ran without projections"))?;
        let (pk, pv) = host
            .passing
            .take()
            .unwrap_or_else(|| (empty_heads(c.kv_heads, c.head_dim), empty_heads(c.kv_heads, c.head_dim)));
        let (a, b) = (host.layout.anchor_len(), host.layout.block_len());
        let p = pk[0].rows();
        let join = |own: &[Matrix], passing: &[Matrix]| -> Result<Vec<Matrix>> {
            own.iter()
                .zip(passing)
                .map(|(m, pm)| Matrix::vstack([&m.slice_rows(0, a), pm, &m.slice_rows(a, a + b)], c.head_dim))
                .collect()
        };
        let keys = join(&qkv.k, &pk)?;
        let values = join(&qkv.v, &pv)?;
        let mask = build_apb_mask(a, p, b);
        let parts = attend_heads(c, &qkv.q, &keys, &values, &mask, &mut host.flops)?;
        let outs: Vec<Matrix> = parts.into_iter().map(|pa| pa.out).collect();
        let x = Matrix::vstack([&host.anchor_hidden, &host.block_hidden], c.hidden)?;
        let y = finish_layer(&x, &concat_heads(&outs), layer, weights, &mut host.flops)?;
        host.anchor_hidden = y.slice_rows(0, a);
        host.block_hidden = y.slice_rows(a, a + b);
        let block = qkv.slice_tokens(a, a + b);
        host.cache
            .layers
            .push(LayerCache::new(block.k, block.v, host.layout.block_positions.clone())?);
        Ok(())
    })?;
    Ok(selections)
}

/// APB prefill of `input.document` (the query rides in the anchors).
pub fn apb_prefill(input: &SplitInput, weights: &ModelWeights, cfg: &StrategyConfig) -> Result<PrefillResult> {
    cfg.validate(input.document.len())?;
    let layouts = build_host_layouts(input, cfg.hosts, cfg.anchor_len, cfg.embed_query, cfg.use_anchor)?;
    let mut group = HostGroup::new(cfg.hosts, cfg.schedule)?;
    let mut hosts = layouts
        .into_iter()
        .map(|l| ApbHost::new(l, weights))
        .collect::<Result<Vec<_>>>()?;
    let mut selections = Vec::with_capacity(weights.config().layers);
    for layer in 0..weights.config().layers {
        let sel = apb_prefill_layer(&mut group, &mut hosts, layer, weights, cfg)?;
        if cfg.use_passing {
            selections.push(sel);
        }
    }
    let last = &hosts[hosts.len() - 1].block_hidden;
    let first_token = weights.argmax_token(last.row(last.rows() - 1));
    Ok(PrefillResult {
        kind: cfg.kind,
        block_ranges: hosts.iter().map(|h| h.layout.block_range()).collect(),
        block_hidden: hosts.iter().map(|h| h.block_hidden.clone()).collect(),
        anchor_hidden: hosts.iter().map(|h| h.anchor_hidden.clone()).collect(),
        flops: hosts.iter().map(|h| h.flops).collect(),
        caches: hosts.into_iter().map(|h| h.cache).collect(),
        first_token,
        trace: group.into_trace(),
        selections,
    })
}

/// Star attention: the APB pipeline with a block-sized anchor, no query
/// embedding and no passing blocks.
pub fn star_attention_prefill(
    input: &SplitInput,
    weights: &ModelWeights,
    hosts: usize,
    schedule: Schedule,
) -> Result<PrefillResult> {
    let cfg = StrategyConfig {
        schedule,
        ..StrategyConfig::star(hosts, input.document.len())?
    };
    apb_prefill(input, weights, &cfg)
}

/// Single-host exact prefill wrapped as a one-host result.
pub fn full_prefill(input: &SplitInput, weights: &ModelWeights) -> Result<PrefillResult> {
    let r = reference_prefill(&input.document, weights)?;
    let d = weights.config().hidden;
    Ok(PrefillResult {
        kind: StrategyKind::Full,
        block_hidden: vec![r.hidden],
        anchor_hidden: vec![Matrix::zeros(0, d)],
        block_ranges: std::iter::once(0..input.document.len()).collect(),
        caches: vec![r.cache],
        first_token: r.first_token,
        flops: vec![r.flops],
        trace: CommTrace::default(),
        selections: Vec::new(),
    })
}

/// Per-host state of the exact sequence-sharded strategies.
struct ShardHost {
    range: Range<usize>,
    hidden: Matrix,
    positions: Vec<usize>,
    flops: FlopCounter,
    cache: KVCache,
    qkv: Option<Qkv>,
    parts: Vec<(usize, Vec<PartialAttention>)>,
    held: Option<(Vec<Matrix>, Vec<Matrix>)>,
    inbox: Vec<Vec<Matrix>>,
}

fn shard_hosts(document: &[u32], hosts: usize, weights: &ModelWeights) -> Result<Vec<ShardHost>> {
    block_ranges(document.len(), hosts)?
        .into_iter()
        .map(|range| {
            Ok(ShardHost {
                hidden: weights.embed(&document[range.clone()])?,
                positions: range.clone().collect(),
                range,
                flops: FlopCounter::default(),
                cache: KVCache::default(),
                qkv: None,
                parts: Vec::new(),
                held: None,
                inbox: Vec::new(),
            })
        })
        .collect()
}

fn finish_shards(kind: StrategyKind, hosts: Vec<ShardHost>, group: HostGroup, weights: &ModelWeights) -> PrefillResult {
    let d = weights.config().hidden;
    let last = &hosts[hosts.len() - 1].hidden;
    let first_token = weights.argmax_token(last.row(last.rows() - 1));
    PrefillResult {
        kind,
        block_ranges: hosts.iter().map(|h| h.range.clone()).collect(),
        block_hidden: hosts.iter().map(|h| h.hidden.clone()).collect(),
        anchor_hidden: vec![Matrix::zeros(0, d); hosts.len()],
        flops: hosts.iter().map(|h| h.flops).collect(),
        caches: hosts.into_iter().map(|h| h.cache).collect(),
        first_token,
        trace: group.into_trace(),
        selections: Vec::new(),
    }
}

/// Ring attention: K/V shards travel around the ring for `H−1` steps; each
/// host merges its partial attentions over the shards at or before it.
pub fn ring_attention_prefill(
    document: &[u32],
    weights: &ModelWeights,
    hosts: usize,
    schedule: Schedule,
) -> Result<PrefillResult> {
    let c = weights.config();
    let mut group = HostGroup::new(hosts, schedule)?;
    let mut states = shard_hosts(document, hosts, weights)?;
    for layer in 0..c.layers {
        group.run_hosts(&mut states, |i, host| {
            let qkv = project_qkv(&host.hidden, layer, weights, &host.positions, &mut host.flops)?;
            let diag = attend_heads(c, &qkv.q, &qkv.k, &qkv.v, &MaskSpec::causal(qkv.tokens()), &mut host.flops)?;
            host.parts = vec![(i, diag)];
            host.held = Some((qkv.k.clone(), qkv.v.clone()));
            host.qkv = Some(qkv);
            Ok(())
        })?;
        for step in 0..hosts - 1 {
            let held: Vec<_> = states.iter_mut().map(|h| h.held.take().expect("held shard")).collect();
            let received = group.ring_pass(held, step)?;
            for (h, kv) in states.iter_mut().zip(received) {
                h.held = Some(kv);
            }
            group.run_hosts(&mut states, |i, host| {
                let source = (i + hosts - step - 1) % hosts;
                if source < i {
                    let (k, v) = host.held.as_ref().expect("held shard");
                    let q = &host.qkv.as_ref().expect("projections").q;
                    let parts = attend_heads(c, q, k, v, &MaskSpec::full(k[0].rows()), &mut host.flops)?;
                    host.parts.push((source, parts));
                }
                Ok(())
            })?;
        }
        group.run_hosts(&mut states, |_, host| {
            let qkv = host.qkv.take().expect("projections");
            let mut parts = std::mem::take(&mut host.parts);
            parts.sort_by_key(|(source, _)| *source);
            let outs = (0..c.heads)
                .map(|head| {
                    let per_source: Vec<PartialAttention> = parts.iter().map(|(_, p)| p[head].clone()).collect();
                    merge_partial_attention(&per_source).map(|m| m.out)
                })
                .collect::<Result<Vec<_>>>()?;
            host.hidden = finish_layer(&host.hidden, &concat_heads(&outs), layer, weights, &mut host.flops)?;
            host.held = None;
            host.cache
                .layers
                .push(LayerCache::new(qkv.k, qkv.v, host.positions.clone())?);
            Ok(())
        })?;
    }
    Ok(finish_shards(StrategyKind::Ring, states, group, weights))
}

/// Query heads and the KV heads they read, owned by Ulysses host `j`.
fn ulysses_heads(c: &crate::model::ModelConfig, hosts: usize, j: usize) -> (Range<usize>, Range<usize>) {
    let per = c.heads / hosts;
    let q = j * per..(j + 1) * per;
    let kv = q.start / c.group..(q.end - 1) / c.group + 1;
    (q, kv)
}

/// Ulysses: all-to-all from sequence shards to head shards for Q, K and V,
/// full causal attention per head shard, all-to-all back.
pub fn ulysses_prefill(
    document: &[u32],
    weights: &ModelWeights,
    hosts: usize,
    schedule: Schedule,
) -> Result<PrefillResult> {
    let c = weights.config();
    if hosts > c.heads || !c.heads.is_multiple_of(hosts) {
        return Err(config(format!(
            "ulysses needs the head count {} divisible by {hosts} hosts",
            c.heads
        )));
    }
    let n = document.len();
    let mut group = HostGroup::new(hosts, schedule)?;
    let mut states = shard_hosts(document, hosts, weights)?;
    let pick = |ms: &[Matrix], r: Range<usize>| ms[r].to_vec();
    for layer in 0..c.layers {
        let outgoing = group.run_hosts(&mut states, |_, host| {
            let qkv = project_qkv(&host.hidden, layer, weights, &host.positions, &mut host.flops)?;
            let mut q_out = Vec::with_capacity(hosts);
            let mut k_out = Vec::with_capacity(hosts);
            let mut v_out = Vec::with_capacity(hosts);
            for j in 0..hosts {
                let (qh, kvh) = ulysses_heads(c, hosts, j);
                q_out.push(pick(&qkv.q, qh));
                k_out.push(pick(&qkv.k, kvh.clone()));
                v_out.push(pick(&qkv.v, kvh));
            }
            host.qkv = Some(qkv);
            Ok((q_out, k_out, v_out))
        })?;
        let mut q_in = Vec::with_capacity(hosts);
        let mut k_in = Vec::with_capacity(hosts);
        let mut v_in = Vec::with_capacity(hosts);
        for (q, k, v) in outgoing {
            q_in.push(q);
            k_in.push(k);
            v_in.push(v);
        }
        let q_in = group.all_to_all(q_in)?;
        let k_in = group.all_to_all(k_in)?;
        let v_in = group.all_to_all(v_in)?;
        for (((h, q), k), v) in states.iter_mut().zip(q_in).zip(k_in).zip(v_in) {
            h.inbox = vec![
                stack_heads(&q, q[0].len(), c.head_dim)?,
                stack_heads(&k, k[0].len(), c.head_dim)?,
                stack_heads(&v, v[0].len(), c.head_dim)?,
            ];
        }
        let ranges: Vec<Range<usize>> = states.iter().map(|h| h.range.clone()).collect();
        let back = group.run_hosts(&mut states, |j, host| {
            let (qh, kvh) = ulysses_heads(c, hosts, j);
            let inbox = std::mem::take(&mut host.inbox);
            let parts = attend_head_range(
                c,
                qh.start,
                &inbox[0],
                &inbox[1],
                &inbox[2],
                kvh.start,
                &MaskSpec::causal(n),
                &mut host.flops,
            )?;
            Ok(ranges
                .iter()
                .map(|r| parts.iter().map(|p| p.out.slice_rows(r.start, r.end)).collect::<Vec<_>>())
                .collect::<Vec<_>>())
        })?;
        let returned = group.all_to_all(back)?;
        for (h, heads) in states.iter_mut().zip(returned) {
            h.inbox = vec![heads.concat()];
        }
        group.run_hosts(&mut states, |_, host| {
            let outs = std::mem::take(&mut host.inbox).remove(0);
            let qkv = host.qkv.take().expect("projections");
            host.hidden = finish_layer(&host.hidden, &concat_heads(&outs), layer, weights, &mut host.flops)?;
            host.cache
                .layers
                .push(LayerCache::new(qkv.k, qkv.v, host.positions.clone())?);
            Ok(())
        })?;
    }
    Ok(finish_shards(StrategyKind::Ulysses, states, group, weights))
}

/// Prefill `input.document` with the strategy named in `cfg`.
pub fn run_prefill(input: &SplitInput, weights: &ModelWeights, cfg: &StrategyConfig) -> Result<PrefillResult> {
    cfg.validate(input.document.len())?;
    match cfg.kind {
        StrategyKind::Full => full_prefill(input, weights),
        StrategyKind::Ring => ring_attention_prefill(&input.document, weights, cfg.hosts, cfg.schedule),
        StrategyKind::Ulysses => ulysses_prefill(&input.document, weights, cfg.hosts, cfg.schedule),
        StrategyKind::Star => star_attention_prefill(input, weights, cfg.hosts, cfg.schedule),
        StrategyKind::Apb => apb_prefill(input, weights, cfg),
    }
}

/// Split a single-host cache into contiguous per-host shards.
pub fn distribute_cache(cache: &KVCache, hosts: usize) -> Result<Vec<KVCache>> {
    let ranges = block_ranges(cache.len(), hosts)?;
    ranges
        .into_iter()
        .map(|r| {
            let layers = cache
                .layers
                .iter()
                .map(|l| {
                    let cut = |ms: &[Matrix]| ms.iter().map(|m| m.slice_rows(r.start, r.end)).collect();
                    LayerCache::new(cut(&l.k), cut(&l.v), l.positions[r.clone()].to_vec())
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(KVCache { layers })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct DecodeStep {
    /// Final hidden states of the new tokens, per host.
    pub hidden: Vec<Matrix>,
    /// Greedy prediction after the last new token, per host.
    pub next_tokens: Vec<u32>,
    pub flops: Vec<FlopCounter>,
}

struct DecodeHost<'a> {
    cache: &'a mut KVCache,
    hidden: Matrix,
    flops: FlopCounter,
    new_kv: Option<(Vec<Matrix>, Vec<Matrix>)>,
    gathered: Vec<Vec<PartialAttention>>,
}

/// Feed `tokens` through every layer with exact attention over the
/// distributed caches. The last host appends the new tokens' K/V.
///
/// New tokens take positions after the last cached position of the last
/// host.
pub fn accu_decode_step(
    group: &mut HostGroup,
    weights: &ModelWeights,
    caches: &mut [KVCache],
    tokens: &[u32],
) -> Result<DecodeStep> {
    if tokens.is_empty() {
        return Err(contract("decode step with no tokens"));
    }
    if caches.len() != group.hosts() {
        return Err(contract(format!("{} caches for {} hosts", caches.len(), group.hosts())));
    }
    let c = weights.config();
    let last = caches.len() - 1;
    let start = caches[last].layers.first().map_or(0, LayerCache::next_position);
    let positions: Vec<usize> = (start..start + tokens.len()).collect();
    let x = weights.embed(tokens)?;
    let mut states: Vec<DecodeHost> = caches
        .iter_mut()
        .map(|cache| DecodeHost {
            cache,
            hidden: x.clone(),
            flops: FlopCounter::default(),
            new_kv: None,
            gathered: Vec::new(),
        })
        .collect();

    for layer in 0..c.layers {
        let partials = group.run_hosts(&mut states, |i, host| {
            let qkv = project_qkv(&host.hidden, layer, weights, &positions, &mut host.flops)?;
            let cached = &host.cache.layers[layer];
            let parts = if i == last {
                let keys = stack_heads(&[cached.k.clone(), qkv.k.clone()], c.kv_heads, c.head_dim)?;
                let values = stack_heads(&[cached.v.clone(), qkv.v.clone()], c.kv_heads, c.head_dim)?;
                let mask = MaskSpec::causal_with_prefix(cached.len(), tokens.len());
                attend_heads(c, &qkv.q, &keys, &values, &mask, &mut host.flops)?
            } else {
                let mask = MaskSpec::full(cached.len());
                attend_heads(c, &qkv.q, &cached.k, &cached.v, &mask, &mut host.flops)?
            };
            host.new_kv = (i == last).then_some((qkv.k, qkv.v));
            Ok(parts)
        })?;
        let delivered = group.broadcast_gather(partials)?;
        for (h, list) in states.iter_mut().zip(delivered) {
            h.gathered = list;
        }
        group.run_hosts(&mut states, |_, host| {
            let gathered = std::mem::take(&mut host.gathered);
            let outs = (0..c.heads)
                .map(|head| {
                    let per_host: Vec<PartialAttention> = gathered.iter().map(|p| p[head].clone()).collect();
                    merge_partial_attention(&per_host).map(|m| m.out)
                })
                .collect::<Result<Vec<_>>>()?;
            host.hidden = finish_layer(&host.hidden, &concat_heads(&outs), layer, weights, &mut host.flops)?;
            if let Some((k, v)) = host.new_kv.take() {
                host.cache.layers[layer].append(&k, &v, &positions)?;
            }
            Ok(())
        })?;
    }

    let next_tokens = states
        .iter()
        .map(|h| weights.argmax_token(h.hidden.row(h.hidden.rows() - 1)))
        .collect();
    Ok(DecodeStep {
        next_tokens,
        flops: states.iter().map(|h| h.flops).collect(),
        hidden: states.into_iter().map(|h| h.hidden).collect(),
    })
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub prefill: PrefillResult,
    /// Tokens generated, identical on every host.
    pub tokens: Vec<u32>,
    pub decode_flops: Vec<FlopCounter>,
    pub decode_trace: CommTrace,
}

/// Greedy generation: prefill the document, feed the whole query in the
/// first decode step, then one token per step until `max_new_tokens` or
/// `stop_token`.
pub fn generate(
    input: &SplitInput,
    weights: &ModelWeights,
    cfg: &StrategyConfig,
    max_new_tokens: usize,
    stop_token: Option<u32>,
) -> Result<Generation> {
    let prefill = run_prefill(input, weights, cfg)?;
    generate_from(prefill, &input.query, weights, cfg.schedule, max_new_tokens, stop_token)
}

/// Decode loop over an existing prefill.
pub fn generate_from(
    prefill: PrefillResult,
    query: &[u32],
    weights: &ModelWeights,
    schedule: Schedule,
    max_new_tokens: usize,
    stop_token: Option<u32>,
) -> Result<Generation> {
    if max_new_tokens == 0 {
        return Err(contract("max_new_tokens must be at least 1"));
    }
    let mut group = HostGroup::new(prefill.hosts(), schedule)?;
    let mut caches = prefill.caches.clone();
    let mut tokens = Vec::with_capacity(max_new_tokens);
    let mut decode_flops = vec![FlopCounter::default(); prefill.hosts()];
    let mut x = if query.is_empty() {
        tokens.push(prefill.first_token);
        vec![prefill.first_token]
    } else {
        query.to_vec()
    };
    while tokens.len() < max_new_tokens && stop_token.is_none_or(|s| tokens.last() != Some(&s)) {
        let step = accu_decode_step(&mut group, weights, &mut caches, &x)?;
        if step.next_tokens.iter().any(|&t| t != step.next_tokens[0]) {
            return Err(contract("hosts disagree on the next token"));
        }
        for (acc, f) in decode_flops.iter_mut().zip(&step.flops) {
            acc.merge(f);
        }
        let next = step.next_tokens[0];
        tokens.push(next);
        x = vec![next];
    }
    Ok(Generation {
        prefill,
        tokens,
        decode_flops,
        decode_trace: group.into_trace(),
    })
}
