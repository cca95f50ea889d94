//! Toy decoder-only transformer: grouped-query attention with rotary
//! positions, a gated SiLU FFN, residual connections and no normalization
//! layers. Every parallel strategy is built from the kernels in this module,
//! and [`reference_prefill`] is the single-host exact baseline.

use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::compressor::RetainingHeadWeights;
use crate::costmodel::{FlopCounter, FlopKind};
use crate::error::{config, contract, ApbError, Result};
use crate::tensor::{rope_apply, tiled_attention, MaskSpec, Matrix, PartialAttention};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"APBW";
pub const WEIGHTS_VERSION: u32 = 1;
/// Standard deviation of seeded weight initialization.
pub const INIT_STD: f32 = 0.02;
pub const DEFAULT_RETAINING_INTERMEDIATE: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub intermediate: usize,
    pub vocab: usize,
    pub rope_theta: f64,
    /// Query heads per KV head.
    pub group: usize,
}

impl ModelConfig {
    pub fn new(
        layers: usize,
        hidden: usize,
        heads: usize,
        kv_heads: usize,
        intermediate: usize,
        vocab: usize,
        rope_theta: f64,
    ) -> Result<Self> {
        if [layers, hidden, heads, kv_heads, intermediate, vocab].contains(&0) {
            return Err(config("model dimensions must all be at least 1"));
        }
        if !heads.is_multiple_of(kv_heads) {
            return Err(config(format!("heads {heads} not divisible by kv_heads {kv_heads}")));
        }
        if !hidden.is_multiple_of(heads) {
            return Err(config(format!("hidden {hidden} not divisible by heads {heads}")));
        }
        let head_dim = hidden / heads;
        if !head_dim.is_multiple_of(2) {
            return Err(config(format!("head dim {head_dim} must be even for rotary positions")));
        }
        if rope_theta.is_nan() || rope_theta <= 0.0 {
            return Err(config("rope_theta must be positive"));
        }
        Ok(Self {
            layers,
            hidden,
            heads,
            kv_heads,
            head_dim,
            intermediate,
            vocab,
            rope_theta,
            group: heads / kv_heads,
        })
    }

    /// L=2, d=64, 4 heads over 2 KV heads, I=128, vocab 256.
    pub fn toy() -> Self {
        Self::new(2, 64, 4, 2, 128, 256, 10000.0).expect("toy config is valid")
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    pub fn scale(&self) -> f32 {
        1.0 / (self.head_dim as f32).sqrt()
    }

    fn validate(&self) -> Result<()> {
        let rebuilt = Self::new(
            self.layers,
            self.hidden,
            self.heads,
            self.kv_heads,
            self.intermediate,
            self.vocab,
            self.rope_theta,
        )?;
        if rebuilt != *self {
            return Err(config("head_dim or group inconsistent with hidden/heads/kv_heads"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub gate: Matrix,
    pub up: Matrix,
    pub down: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub retaining: Option<RetainingHeadWeights>,
}

impl ModelWeights {
    pub fn new(
        config: ModelConfig,
        embedding: Matrix,
        layers: Vec<LayerWeights>,
        retaining: Option<RetainingHeadWeights>,
    ) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let expect = |m: &Matrix, r: usize, cols: usize, what: &str| -> Result<()> {
            if m.rows() != r || m.cols() != cols {
                return Err(config_shape(what, m, r, cols));
            }
            Ok(())
        };
        expect(&embedding, c.vocab, c.hidden, "embedding")?;
        if layers.len() != c.layers {
            return Err(crate::error::config(format!("{} layers given, config says {}", layers.len(), c.layers)));
        }
        for lw in &layers {
            expect(&lw.wq, c.hidden, c.hidden, "W_Q")?;
            expect(&lw.wk, c.hidden, c.kv_dim(), "W_K")?;
            expect(&lw.wv, c.hidden, c.kv_dim(), "W_V")?;
            expect(&lw.wo, c.hidden, c.hidden, "W_O")?;
            expect(&lw.gate, c.hidden, c.intermediate, "FFN gate")?;
            expect(&lw.up, c.hidden, c.intermediate, "FFN up")?;
            expect(&lw.down, c.intermediate, c.hidden, "FFN down")?;
        }
        if let Some(r) = &retaining {
            r.check_shapes(c)?;
        }
        Ok(Self {
            config,
            embedding,
            layers,
            retaining,
        })
    }

    /// Gaussian(0, 0.02) weights drawn from a ChaCha8 stream seeded with
    /// `seed`, including retaining heads with the default intermediate size.
    pub fn seeded(config: ModelConfig, seed: u64) -> Self {
        Self::seeded_with_retaining(config, seed, DEFAULT_RETAINING_INTERMEDIATE)
    }

    pub fn seeded_with_retaining(config: ModelConfig, seed: u64, retaining_intermediate: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
        let mut draw = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| normal.sample(&mut rng));
        let c = &config;
        let embedding = draw(c.vocab, c.hidden);
        let layers = (0..c.layers)
            .map(|_| LayerWeights {
                wq: draw(c.hidden, c.hidden),
                wk: draw(c.hidden, c.kv_dim()),
                wv: draw(c.hidden, c.kv_dim()),
                wo: draw(c.hidden, c.hidden),
                gate: draw(c.hidden, c.intermediate),
                up: draw(c.hidden, c.intermediate),
                down: draw(c.intermediate, c.hidden),
            })
            .collect();
        let retaining = (retaining_intermediate > 0)
            .then(|| RetainingHeadWeights::from_draw(c, retaining_intermediate, &mut draw));
        Self {
            config,
            embedding,
            layers,
            retaining,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embed(&self, tokens: &[u32]) -> Result<Matrix> {
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.config.vocab) {
            return Err(contract(format!("token id {bad} >= vocab {}", self.config.vocab)));
        }
        self.embedding.gather_rows(&ids)
    }

    /// Greedy next token from one hidden row, using the tied embedding as
    /// the LM head. Ties resolve to the lowest id.
    pub fn argmax_token(&self, hidden_row: &[f32]) -> u32 {
        let mut best = (0usize, f32::NEG_INFINITY);
        for t in 0..self.config.vocab {
            let logit: f32 = self.embedding.row(t).iter().zip(hidden_row).map(|(a, b)| a * b).sum();
            if logit > best.1 {
                best = (t, logit);
            }
        }
        best.0 as u32
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut buf = Vec::new();
        buf.extend_from_slice(WEIGHTS_MAGIC);
        buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        for v in [c.layers, c.hidden, c.heads, c.kv_heads, c.head_dim, c.intermediate, c.vocab] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend_from_slice(&c.rope_theta.to_le_bytes());
        buf.extend_from_slice(&(c.group as u32).to_le_bytes());
        let put = |m: &Matrix, buf: &mut Vec<u8>| {
            for x in m.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        };
        put(&self.embedding, &mut buf);
        for lw in &self.layers {
            for m in [&lw.wq, &lw.wk, &lw.wv, &lw.wo, &lw.gate, &lw.up, &lw.down] {
                put(m, &mut buf);
            }
        }
        match &self.retaining {
            None => buf.extend_from_slice(&0u32.to_le_bytes()),
            Some(r) => {
                buf.extend_from_slice(&(r.intermediate() as u32).to_le_bytes());
                for layer in r.layers() {
                    put(&layer.w1, &mut buf);
                    put(&layer.w2, &mut buf);
                }
            }
        }
        let len = buf.len() as u64;
        buf.extend_from_slice(&len.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != WEIGHTS_MAGIC {
            return Err(ApbError::Format("bad magic, expected APBW".into()));
        }
        let version = r.u32()?;
        if version != WEIGHTS_VERSION {
            return Err(ApbError::Format(format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 7];
        for d in dims.iter_mut() {
            *d = r.u32()? as usize;
        }
        let [layers, hidden, heads, kv_heads, head_dim, intermediate, vocab] = dims;
        let rope_theta = r.f64()?;
        let group = r.u32()? as usize;
        let config = ModelConfig {
            layers,
            hidden,
            heads,
            kv_heads,
            head_dim,
            intermediate,
            vocab,
            rope_theta,
            group,
        };
        config.validate()?;
        let c = &config;
        let embedding = r.matrix(c.vocab, c.hidden)?;
        let mut layer_weights = Vec::with_capacity(c.layers);
        for _ in 0..c.layers {
            layer_weights.push(LayerWeights {
                wq: r.matrix(c.hidden, c.hidden)?,
                wk: r.matrix(c.hidden, c.kv_dim())?,
                wv: r.matrix(c.hidden, c.kv_dim())?,
                wo: r.matrix(c.hidden, c.hidden)?,
                gate: r.matrix(c.hidden, c.intermediate)?,
                up: r.matrix(c.hidden, c.intermediate)?,
                down: r.matrix(c.intermediate, c.hidden)?,
            });
        }
        let retaining_intermediate = r.u32()? as usize;
        let retaining = if retaining_intermediate == 0 {
            None
        } else {
            let mut pairs = Vec::with_capacity(c.layers);
            for _ in 0..c.layers {
                let w1 = r.matrix(c.kv_heads * 3 * c.head_dim, retaining_intermediate)?;
                let w2 = r.matrix(c.kv_heads, retaining_intermediate)?;
                pairs.push((w1, w2));
            }
            Some(RetainingHeadWeights::new(c, pairs)?)
        };
        let body_len = r.pos as u64;
        let declared = r.u64()?;
        if declared != body_len {
            return Err(ApbError::Format(format!(
                "length check failed: trailer says {declared}, body is {body_len} bytes"
            )));
        }
        if r.pos != bytes.len() {
            return Err(ApbError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Self::new(config, embedding, layer_weights, retaining)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| ApbError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let io = |source| ApbError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(io)?;
        Self::from_bytes(&bytes)
    }
}

fn config_shape(what: &str, m: &Matrix, r: usize, c: usize) -> ApbError {
    config(format!("{what} is {}x{}, expected {r}x{c}", m.rows(), m.cols()))
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ApbError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let raw = self.take(rows * cols * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Matrix::new(rows, cols, data).map_err(|e| ApbError::Format(e.to_string()))
    }
}

/// Per-head projections of a token sequence. Query heads are `heads`
/// matrices of `tokens × head_dim`; keys and values have `kv_heads`.
#[derive(Clone, Debug, PartialEq)]
pub struct Qkv {
    pub q: Vec<Matrix>,
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl Qkv {
    pub fn tokens(&self) -> usize {
        self.q[0].rows()
    }

    /// Token rows `start..end` of every head.
    pub fn slice_tokens(&self, start: usize, end: usize) -> Qkv {
        let cut = |ms: &[Matrix]| ms.iter().map(|m| m.slice_rows(start, end)).collect();
        Qkv {
            q: cut(&self.q),
            k: cut(&self.k),
            v: cut(&self.v),
        }
    }
}

fn split_heads(m: &Matrix, heads: usize, head_dim: usize) -> Vec<Matrix> {
    (0..heads)
        .map(|h| m.slice_cols(h * head_dim, (h + 1) * head_dim))
        .collect()
}

pub fn concat_heads(heads: &[Matrix]) -> Matrix {
    let rows = heads[0].rows();
    let hd = heads[0].cols();
    Matrix::from_fn(rows, hd * heads.len(), |r, c| heads[c / hd].get(r, c % hd))
}

/// Q/K/V projections with rotary positions applied to Q and K.
pub fn project_qkv(
    hidden: &Matrix,
    layer: usize,
    weights: &ModelWeights,
    positions: &[usize],
    counter: &mut FlopCounter,
) -> Result<Qkv> {
    let c = weights.config();
    if hidden.cols() != c.hidden {
        return Err(contract(format!("hidden has {} cols, model dim {}", hidden.cols(), c.hidden)));
    }
    if positions.len() != hidden.rows() {
        return Err(contract(format!(
            "{} positions for {} tokens",
            positions.len(),
            hidden.rows()
        )));
    }
    let lw = &weights.layers[layer];
    let n = hidden.rows();
    let q = hidden.matmul(&lw.wq)?;
    let k = hidden.matmul(&lw.wk)?;
    let v = hidden.matmul(&lw.wv)?;
    counter.add_matmul(FlopKind::Projection, n, c.hidden, c.hidden);
    counter.add_matmul(FlopKind::Projection, n, c.hidden, c.kv_dim());
    counter.add_matmul(FlopKind::Projection, n, c.hidden, c.kv_dim());
    let rot = |heads: Vec<Matrix>| -> Result<Vec<Matrix>> {
        heads
            .iter()
            .map(|h| rope_apply(h, positions, c.rope_theta))
            .collect()
    };
    Ok(Qkv {
        q: rot(split_heads(&q, c.heads, c.head_dim))?,
        k: rot(split_heads(&k, c.kv_heads, c.head_dim))?,
        v: split_heads(&v, c.kv_heads, c.head_dim),
    })
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// `down(silu(gate(x)) ⊙ up(x))`.
pub fn ffn_forward(x: &Matrix, layer: usize, weights: &ModelWeights, counter: &mut FlopCounter) -> Result<Matrix> {
    let c = weights.config();
    if x.cols() != c.hidden {
        return Err(contract(format!("FFN input has {} cols, model dim {}", x.cols(), c.hidden)));
    }
    let lw = &weights.layers[layer];
    let gate = x.matmul(&lw.gate)?;
    let up = x.matmul(&lw.up)?;
    let act = Matrix::from_fn(gate.rows(), gate.cols(), |r, col| silu(gate.get(r, col)) * up.get(r, col));
    let out = act.matmul(&lw.down)?;
    for _ in 0..3 {
        counter.add_matmul(FlopKind::Ffn, x.rows(), c.hidden, c.intermediate);
    }
    Ok(out)
}

/// Multi-head attention of `q_heads` against per-KV-head keys/values under
/// one mask; query head `h` reads KV head `h / group`.
pub fn attend_heads(
    config: &ModelConfig,
    q_heads: &[Matrix],
    k_heads: &[Matrix],
    v_heads: &[Matrix],
    mask: &MaskSpec,
    counter: &mut FlopCounter,
) -> Result<Vec<PartialAttention>> {
    attend_head_range(config, 0, q_heads, k_heads, v_heads, 0, mask, counter)
}

/// Like [`attend_heads`] for a contiguous subset of heads: `q_heads[i]` is
/// global query head `first_q + i`, `k_heads[j]` is global KV head
/// `first_kv + j`.
#[allow(clippy::too_many_arguments)]
pub fn attend_head_range(
    config: &ModelConfig,
    first_q: usize,
    q_heads: &[Matrix],
    k_heads: &[Matrix],
    v_heads: &[Matrix],
    first_kv: usize,
    mask: &MaskSpec,
    counter: &mut FlopCounter,
) -> Result<Vec<PartialAttention>> {
    q_heads
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let kv = (first_q + i) / config.group - first_kv;
            let pa = tiled_attention(q, &k_heads[kv], &v_heads[kv], mask, config.scale())?;
            counter.add_attention(config.head_dim, mask.score_area(q.rows()));
            Ok(pa)
        })
        .collect()
}

/// Output projection, attention residual, FFN and FFN residual.
pub fn finish_layer(
    residual: &Matrix,
    attn: &Matrix,
    layer: usize,
    weights: &ModelWeights,
    counter: &mut FlopCounter,
) -> Result<Matrix> {
    let c = weights.config();
    let projected = attn.matmul(&weights.layers[layer].wo)?;
    counter.add_matmul(FlopKind::Projection, attn.rows(), c.hidden, c.hidden);
    let h = residual.add(&projected)?;
    let f = ffn_forward(&h, layer, weights, counter)?;
    h.add(&f)
}

/// Cached keys and values of one layer, per KV head, with their positions.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache {
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub positions: Vec<usize>,
}

impl LayerCache {
    pub fn new(k: Vec<Matrix>, v: Vec<Matrix>, positions: Vec<usize>) -> Result<Self> {
        if k.len() != v.len() || k.iter().zip(&v).any(|(a, b)| a.rows() != b.rows() || a.rows() != positions.len()) {
            return Err(contract("layer cache K/V/positions lengths differ"));
        }
        Ok(Self { k, v, positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Position following the last cached token.
    pub fn next_position(&self) -> usize {
        self.positions.last().map_or(0, |p| p + 1)
    }

    pub fn append(&mut self, k: &[Matrix], v: &[Matrix], positions: &[usize]) -> Result<()> {
        if k.len() != self.k.len() || v.len() != self.v.len() {
            return Err(contract("appended KV head count differs"));
        }
        for (dst, src) in self.k.iter_mut().chain(self.v.iter_mut()).zip(k.iter().chain(v)) {
            if src.rows() != positions.len() {
                return Err(contract("appended KV rows differ from positions"));
            }
            *dst = Matrix::vstack([&*dst, src], src.cols())?;
        }
        self.positions.extend_from_slice(positions);
        Ok(())
    }

    pub fn elements(&self) -> usize {
        self.k.iter().chain(&self.v).map(Matrix::len).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KVCache {
    pub layers: Vec<LayerCache>,
}

impl KVCache {
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct ReferenceOutput {
    pub hidden: Matrix,
    pub cache: KVCache,
    pub first_token: u32,
    pub flops: FlopCounter,
}

/// Exact causal prefill of `tokens` on one host at positions `0..n`.
pub fn reference_prefill(tokens: &[u32], weights: &ModelWeights) -> Result<ReferenceOutput> {
    if tokens.is_empty() {
        return Err(contract("reference_prefill on empty input"));
    }
    let c = weights.config();
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let mut hidden = weights.embed(tokens)?;
    let mut flops = FlopCounter::default();
    let mut cache = KVCache::default();
    let mask = MaskSpec::causal(tokens.len());
    for layer in 0..c.layers {
        let qkv = project_qkv(&hidden, layer, weights, &positions, &mut flops)?;
        let parts = attend_heads(c, &qkv.q, &qkv.k, &qkv.v, &mask, &mut flops)?;
        let outs: Vec<Matrix> = parts.into_iter().map(|p| p.out).collect();
        hidden = finish_layer(&hidden, &concat_heads(&outs), layer, weights, &mut flops)?;
        cache.layers.push(LayerCache::new(qkv.k, qkv.v, positions.clone())?);
    }
    let first_token = weights.argmax_token(hidden.row(hidden.rows() - 1));
    Ok(ReferenceOutput {
        hidden,
        cache,
        first_token,
        flops,
    })
}
