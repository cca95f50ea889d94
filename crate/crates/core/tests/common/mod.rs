//! Independent dense f64 recomputation used as the test oracle. Nothing here
//! calls into the library's attention, projection or layout code; only the
//! weights and the selected passing indices are shared.

#![allow(dead_code)]

use apb_core::model::{ModelConfig, ModelWeights};
use apb_core::tensor::Matrix;

pub type M = Vec<Vec<f64>>;

pub fn to_m(m: &Matrix) -> M {
    (0..m.rows()).map(|r| m.row(r).iter().map(|&x| x as f64).collect()).collect()
}

pub fn max_diff(a: &Matrix, b: &M) -> f64 {
    assert_eq!(a.rows(), b.len(), "row count");
    let mut worst = 0.0f64;
    for (r, row) in b.iter().enumerate() {
        for (x, y) in a.row(r).iter().zip(row) {
            worst = worst.max((*x as f64 - y).abs());
        }
    }
    worst
}

fn mm(a: &M, w: &Matrix) -> M {
    a.iter()
        .map(|row| {
            (0..w.cols())
                .map(|j| row.iter().enumerate().map(|(k, x)| x * w.get(k, j) as f64).sum())
                .collect()
        })
        .collect()
}

/// Rotate interleaved pairs of every head in `x` (rows × heads·hd).
fn rotate(x: &mut M, positions: &[usize], c: &ModelConfig) {
    let hd = c.head_dim;
    for (row, &pos) in x.iter_mut().zip(positions) {
        for head in row.chunks_mut(hd) {
            for i in 0..hd / 2 {
                let angle = pos as f64 * c.rope_theta.powf(-(2.0 * i as f64) / hd as f64);
                let (s, co) = angle.sin_cos();
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * co - b * s;
                head[2 * i + 1] = a * s + b * co;
            }
        }
    }
}

pub struct Projected {
    pub q: M,
    pub k: M,
    pub v: M,
}

pub fn project(x: &M, w: &ModelWeights, layer: usize, positions: &[usize]) -> Projected {
    let c = w.config();
    let lw = &w.layers[layer];
    let mut q = mm(x, &lw.wq);
    let mut k = mm(x, &lw.wk);
    let v = mm(x, &lw.wv);
    rotate(&mut q, positions, c);
    rotate(&mut k, positions, c);
    Projected { q, k, v }
}

/// Dense masked softmax attention with grouped KV heads.
pub fn attend(q: &M, k: &M, v: &M, c: &ModelConfig, visible: impl Fn(usize, usize) -> bool) -> M {
    let hd = c.head_dim;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![vec![0.0; c.hidden]; q.len()];
    for h in 0..c.heads {
        let kvh = h / c.group;
        for r in 0..q.len() {
            let qs = &q[r][h * hd..(h + 1) * hd];
            let scores: Vec<Option<f64>> = (0..k.len())
                .map(|j| {
                    visible(r, j).then(|| {
                        qs.iter().zip(&k[j][kvh * hd..(kvh + 1) * hd]).map(|(a, b)| a * b).sum::<f64>() * scale
                    })
                })
                .collect();
            let max = scores.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| (s - max).exp())).collect();
            let total: f64 = weights.iter().sum();
            for (j, wj) in weights.iter().enumerate() {
                for t in 0..hd {
                    out[r][h * hd + t] += wj / total * v[j][kvh * hd + t];
                }
            }
        }
    }
    out
}

fn add(a: &M, b: &M) -> M {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Output projection, residual, SiLU-gated FFN and second residual.
pub fn finish(x: &M, attn: &M, w: &ModelWeights, layer: usize) -> M {
    let lw = &w.layers[layer];
    let h1 = add(x, &mm(attn, &lw.wo));
    let gate = mm(&h1, &lw.gate);
    let up = mm(&h1, &lw.up);
    let act: M = gate
        .iter()
        .zip(&up)
        .map(|(g, u)| g.iter().zip(u).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect())
        .collect();
    add(&h1, &mm(&act, &lw.down))
}

pub fn embed(tokens: &[u32], w: &ModelWeights) -> M {
    tokens
        .iter()
        .map(|&t| w.embedding.row(t as usize).iter().map(|&x| x as f64).collect())
        .collect()
}

/// Plain causal forward pass over `tokens` at positions `0..n`.
pub fn causal_forward(tokens: &[u32], w: &ModelWeights) -> M {
    let mut x = embed(tokens, w);
    let positions: Vec<usize> = (0..tokens.len()).collect();
    for layer in 0..w.config().layers {
        let p = project(&x, w, layer, &positions);
        let attn = attend(&p.q, &p.k, &p.v, w.config(), |r, j| j <= r);
        x = finish(&x, &attn, w, layer);
    }
    x
}

/// Host `h` (0-based) layout under the anchor rules: host 0 has none.
pub struct OracleHost {
    pub anchor: Vec<u32>,
    pub block: Vec<u32>,
    pub block_start: usize,
}

pub fn oracle_hosts(
    document: &[u32],
    query: &[u32],
    hosts: usize,
    anchor_len: usize,
    embed_query: bool,
    use_anchor: bool,
) -> Vec<OracleHost> {
    let (base, extra) = (document.len() / hosts, document.len() % hosts);
    let mut start = 0;
    (0..hosts)
        .map(|h| {
            let len = base + usize::from(h < extra);
            let mut anchor = Vec::new();
            if use_anchor && h > 0 {
                if embed_query {
                    anchor.extend_from_slice(query);
                }
                anchor.extend_from_slice(&document[..anchor_len]);
            }
            let host = OracleHost {
                anchor,
                block: document[start..start + len].to_vec(),
                block_start: start,
            };
            start += len;
            host
        })
        .collect()
}

/// Dense APB forward. `selections[layer][host]` lists the document indices
/// each host contributes to later hosts' passing blocks. Returns each
/// host's final block hidden states.
pub fn apb_forward(hosts: &[OracleHost], selections: &[Vec<Vec<usize>>], w: &ModelWeights) -> Vec<M> {
    let c = w.config();
    let mut xs: Vec<M> = hosts
        .iter()
        .map(|h| embed(&[h.anchor.as_slice(), &h.block].concat(), w))
        .collect();
    for layer in 0..c.layers {
        let projected: Vec<Projected> = hosts
            .iter()
            .zip(&xs)
            .map(|(h, x)| {
                let positions: Vec<usize> = (0..h.anchor.len() + h.block.len()).collect();
                project(x, w, layer, &positions)
            })
            .collect();
        let mut next = Vec::with_capacity(hosts.len());
        for (i, host) in hosts.iter().enumerate() {
            let a = host.anchor.len();
            let p = &projected[i];
            let (mut keys, mut values) = (p.k[..a].to_vec(), p.v[..a].to_vec());
            for (j, src) in hosts.iter().enumerate().take(i) {
                for &doc_idx in selections.get(layer).map(|s| s[j].as_slice()).unwrap_or(&[]) {
                    let row = src.anchor.len() + doc_idx - src.block_start;
                    keys.push(projected[j].k[row].clone());
                    values.push(projected[j].v[row].clone());
                }
            }
            let passing = keys.len() - a;
            keys.extend_from_slice(&p.k[a..]);
            values.extend_from_slice(&p.v[a..]);
            let attn = attend(&p.q, &keys, &values, c, |r, j| {
                if r < a {
                    j <= r
                } else {
                    j < a + passing || j - a - passing <= r - a
                }
            });
            next.push(finish(&xs[i], &attn, w, layer));
        }
        xs = next;
    }
    hosts
        .iter()
        .zip(xs)
        .map(|(h, x)| x[h.anchor.len()..].to_vec())
        .collect()
}
