//! Per-host KV block compression: score every cached token, keep the
//! top-`l_p` rows.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::costmodel::{FlopCounter, FlopKind};
use crate::error::{config, contract, ApbError, Result};
use crate::model::ModelConfig;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scorer {
    /// Retaining-head MLP.
    Retain,
    /// Seeded uniform scores.
    Random,
    /// Needle tokens score +inf, everything else is random.
    Oracle,
}

impl fmt::Display for Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scorer::Retain => "retain",
            Scorer::Random => "random",
            Scorer::Oracle => "oracle",
        })
    }
}

impl FromStr for Scorer {
    type Err = ApbError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retain" => Ok(Scorer::Retain),
            "random" => Ok(Scorer::Random),
            "oracle" => Ok(Scorer::Oracle),
            other => Err(config(format!("unknown scorer {other:?} (retain|random|oracle)"))),
        }
    }
}

/// Retaining-head MLP of one layer. `w1` stacks one `3·head_dim ×
/// intermediate` block per KV head; row `h` of `w2` is head `h`'s output
/// projection.
#[derive(Clone, Debug, PartialEq)]
pub struct RetainingLayer {
    pub w1: Matrix,
    pub w2: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetainingHeadWeights {
    intermediate: usize,
    layers: Vec<RetainingLayer>,
}

impl RetainingHeadWeights {
    pub fn new(config: &ModelConfig, pairs: Vec<(Matrix, Matrix)>) -> Result<Self> {
        let intermediate = pairs.first().map_or(0, |(w1, _)| w1.cols());
        let w = Self {
            intermediate,
            layers: pairs.into_iter().map(|(w1, w2)| RetainingLayer { w1, w2 }).collect(),
        };
        w.check_shapes(config)?;
        Ok(w)
    }

    pub(crate) fn from_draw(
        config: &ModelConfig,
        intermediate: usize,
        draw: &mut impl FnMut(usize, usize) -> Matrix,
    ) -> Self {
        let layers = (0..config.layers)
            .map(|_| RetainingLayer {
                w1: draw(config.kv_heads * 3 * config.head_dim, intermediate),
                w2: draw(config.kv_heads, intermediate),
            })
            .collect();
        Self { intermediate, layers }
    }

    pub fn check_shapes(&self, c: &ModelConfig) -> Result<()> {
        if self.layers.len() != c.layers || self.intermediate == 0 {
            return Err(config("retaining heads must cover every layer with intermediate >= 1"));
        }
        for l in &self.layers {
            if l.w1.rows() != c.kv_heads * 3 * c.head_dim
                || l.w1.cols() != self.intermediate
                || l.w2.rows() != c.kv_heads
                || l.w2.cols() != self.intermediate
            {
                return Err(config("retaining head weight shapes do not match the model"));
            }
        }
        Ok(())
    }

    pub fn intermediate(&self) -> usize {
        self.intermediate
    }

    pub fn layers(&self) -> &[RetainingLayer] {
        &self.layers
    }
}

/// One importance score per token of a host's block.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceScores(pub Vec<f32>);

impl ImportanceScores {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Score block tokens with the layer's retaining heads.
///
/// Each KV head sees per-token features `[mean of its query heads, K, V]`
/// and produces `w2 · silu(W1ᵀ · features)`; a token's score is the maximum
/// over KV heads.
pub fn retaining_head_score(
    config: &ModelConfig,
    q: &[Matrix],
    k: &[Matrix],
    v: &[Matrix],
    weights: Option<&RetainingHeadWeights>,
    layer: usize,
    counter: &mut FlopCounter,
) -> Result<ImportanceScores> {
    let weights = weights
        .and_then(|w| w.layers.get(layer))
        .ok_or(ApbError::ScorerWeightsUnavailable { layer })?;
    let tokens = k.first().map_or(0, Matrix::rows);
    let hd = config.head_dim;
    let inter = weights.w1.cols();
    let mut scores = vec![f32::NEG_INFINITY; tokens];
    let mut features = Matrix::zeros(tokens, 3 * hd);
    for head in 0..config.kv_heads {
        let group = &q[head * config.group..(head + 1) * config.group];
        for t in 0..tokens {
            let row = features.row_mut(t);
            for (j, slot) in row[..hd].iter_mut().enumerate() {
                *slot = group.iter().map(|m| m.get(t, j)).sum::<f32>() / config.group as f32;
            }
            row[hd..2 * hd].copy_from_slice(k[head].row(t));
            row[2 * hd..].copy_from_slice(v[head].row(t));
        }
        let w1 = weights.w1.slice_rows(head * 3 * hd, (head + 1) * 3 * hd);
        let hidden = features.matmul(&w1)?;
        counter.add_matmul(FlopKind::Scorer, tokens, 3 * hd, inter);
        counter.add_matmul(FlopKind::Scorer, tokens, inter, 1);
        let w2 = weights.w2.row(head);
        for (t, s) in scores.iter_mut().enumerate() {
            let out: f32 = hidden.row(t).iter().zip(w2).map(|(&x, &w)| silu(x) * w).sum();
            *s = s.max(out);
        }
    }
    Ok(ImportanceScores(scores))
}

/// Seeded uniform scores in `[0, 1)`.
pub fn random_score(seed: u64, block_len: usize) -> ImportanceScores {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImportanceScores((0..block_len).map(|_| rng.random::<f32>()).collect())
}

/// Random scores with every token in the global `needle` range forced to
/// `+inf`. `block_start` is the block's offset in the document.
pub fn oracle_score(
    seed: u64,
    block_len: usize,
    block_start: usize,
    needle: Option<std::ops::Range<usize>>,
) -> ImportanceScores {
    let mut scores = random_score(seed, block_len);
    if let Some(needle) = needle {
        for (i, s) in scores.0.iter_mut().enumerate() {
            if needle.contains(&(block_start + i)) {
                *s = f32::INFINITY;
            }
        }
    }
    scores
}

/// Indices of the `min(l_p, len)` highest scores, ties toward the lower
/// index, returned in ascending order.
pub fn select_top(scores: &ImportanceScores, passing_len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores.0[b].total_cmp(&scores.0[a]).then(a.cmp(&b)));
    order.truncate(passing_len);
    order.sort_unstable();
    order
}

/// Gathered K/V rows of a block, per KV head, with their original positions.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedBlock {
    pub indices: Vec<usize>,
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub positions: Vec<usize>,
}

pub fn compress_block(k: &[Matrix], v: &[Matrix], positions: &[usize], indices: &[usize]) -> Result<CompressedBlock> {
    if indices.windows(2).any(|w| w[0] >= w[1]) {
        return Err(contract("compress_block indices must be strictly increasing"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= positions.len()) {
        return Err(contract(format!("compress index {bad} out of range {}", positions.len())));
    }
    let gather = |ms: &[Matrix]| -> Result<Vec<Matrix>> { ms.iter().map(|m| m.gather_rows(indices)).collect() };
    Ok(CompressedBlock {
        indices: indices.to_vec(),
        k: gather(k)?,
        v: gather(v)?,
        positions: indices.iter().map(|&i| positions[i]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{tiled_attention, MaskSpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn scores(v: &[f32]) -> ImportanceScores {
        ImportanceScores(v.to_vec())
    }

    #[test]
    fn top_two_of_three() {
        assert_eq!(select_top(&scores(&[3.0, 1.0, 2.0]), 2), vec![0, 2]);
    }

    #[test]
    fn top_more_than_len_keeps_all() {
        assert_eq!(select_top(&scores(&[3.0, 1.0, 2.0]), 7), vec![0, 1, 2]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(select_top(&scores(&[0.9, 0.9, 0.1]), 1), vec![0]);
    }

    #[test]
    fn random_scores_are_seeded() {
        assert_eq!(random_score(4, 30), random_score(4, 30));
        assert_ne!(random_score(4, 30), random_score(5, 30));
        assert!(random_score(4, 0).is_empty());
    }

    #[test]
    fn random_selection_is_uniform() {
        let (len, keep, trials) = (20usize, 5usize, 2000u64);
        let mut hits = vec![0u32; len];
        for seed in 0..trials {
            for i in select_top(&random_score(seed, len), keep) {
                hits[i] += 1;
            }
        }
        let want = keep as f64 / len as f64;
        for h in hits {
            assert!((h as f64 / trials as f64 - want).abs() < 0.05);
        }
    }

    #[test]
    fn oracle_forces_needle() {
        let s = oracle_score(1, 10, 100, Some(103..106));
        assert_eq!(select_top(&s, 3), vec![3, 4, 5]);
    }

    fn hand_config() -> ModelConfig {
        ModelConfig::new(1, 2, 1, 1, 1, 2, 1e4).unwrap()
    }

    #[test]
    fn zero_weights_tie_everything() {
        let c = hand_config();
        let w = RetainingHeadWeights::new(&c, vec![(Matrix::zeros(6, 2), Matrix::zeros(1, 2))]).unwrap();
        let m = Matrix::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = retaining_head_score(&c, &[m.clone()], &[m.clone()], &[m], Some(&w), 0, &mut FlopCounter::default())
            .unwrap();
        assert!(s.0.iter().all(|&x| x == 0.0));
        assert_eq!(select_top(&s, 2), vec![0, 1]);
    }

    #[test]
    fn hand_evaluated_mlp() {
        let c = hand_config();
        // features = [q0, q1, k0, k1, v0, v1] = [1, 0, 0.5, -1, 2, 0]
        // W1 columns: u0 = [1,0,0,0,0,0] → 1; u1 = [0,0,1,1,0.5,0] → -0.5 + 1 = 0.5
        let mut w1 = Matrix::zeros(6, 2);
        w1.row_mut(0)[0] = 1.0;
        w1.row_mut(2)[1] = 1.0;
        w1.row_mut(3)[1] = 1.0;
        w1.row_mut(4)[1] = 0.5;
        let w2 = Matrix::new(1, 2, vec![2.0, -1.0]).unwrap();
        let w = RetainingHeadWeights::new(&c, vec![(w1, w2)]).unwrap();
        let q = Matrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        let k = Matrix::new(1, 2, vec![0.5, -1.0]).unwrap();
        let v = Matrix::new(1, 2, vec![2.0, 0.0]).unwrap();
        let s = retaining_head_score(&c, &[q], &[k], &[v], Some(&w), 0, &mut FlopCounter::default()).unwrap();
        let silu = |x: f64| x / (1.0 + (-x).exp());
        let want = 2.0 * silu(1.0) - silu(0.5);
        assert!((s.0[0] as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn missing_weights_signal() {
        let c = hand_config();
        let m = Matrix::zeros(1, 2);
        let r = retaining_head_score(&c, &[m.clone()], &[m.clone()], &[m], None, 0, &mut FlopCounter::default());
        assert!(matches!(r, Err(ApbError::ScorerWeightsUnavailable { layer: 0 })));
    }

    #[test]
    fn retaining_scores_reproducible() {
        let c = ModelConfig::toy();
        let w = crate::model::ModelWeights::seeded_with_retaining(c.clone(), 3, 16);
        let m = Matrix::from_fn(5, c.head_dim, |r, col| (r * 7 + col) as f32 * 0.01);
        let qs = vec![m.clone(); c.heads];
        let ks = vec![m.clone(); c.kv_heads];
        let run = || {
            retaining_head_score(&c, &qs, &ks, &ks, w.retaining.as_ref(), 1, &mut FlopCounter::default()).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gather_rows_verbatim() {
        let k = Matrix::from_fn(4, 2, |r, c| (r * 10 + c) as f32);
        let v = Matrix::from_fn(4, 2, |r, c| -((r * 10 + c) as f32));
        let cb = compress_block(&[k.clone()], &[v.clone()], &[5, 6, 7, 8], &[1, 3]).unwrap();
        assert_eq!(cb.k[0].row(0), k.row(1));
        assert_eq!(cb.k[0].row(1), k.row(3));
        assert_eq!(cb.v[0].row(1), v.row(3));
        assert_eq!(cb.positions, vec![6, 8]);
        let all = compress_block(&[k.clone()], &[v], &[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap();
        assert_eq!(all.k[0], k);
        assert!(compress_block(&[k.clone()], &[k.clone()], &[0, 1, 2, 3], &[4]).is_err());
        assert!(compress_block(&[k.clone()], &[k], &[0, 1, 2, 3], &[2, 1]).is_err());
    }

    #[test]
    fn attention_over_gather_equals_masked_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut rand_m = |r, c| Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let (q, k, v) = (rand_m(2, 4), rand_m(6, 4), rand_m(6, 4));
        let keep = [0usize, 2, 5];
        let cb = compress_block(&[k.clone()], &[v.clone()], &[0, 1, 2, 3, 4, 5], &keep).unwrap();
        let got = tiled_attention(&q, &cb.k[0], &cb.v[0], &MaskSpec::full(3), 0.5).unwrap();
        // Oracle: dense softmax over all six keys with non-selected keys masked.
        for r in 0..2 {
            let visible: Vec<bool> = (0..6).map(|j| keep.contains(&j)).collect();
            let s: Vec<f32> = (0..6)
                .map(|j| q.row(r).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f32>() * 0.5)
                .collect();
            let p = crate::tensor::softmax_row(&s, &visible).unwrap();
            for c in 0..4 {
                let want: f32 = (0..6).map(|j| p[j] * v.get(j, c)).sum();
                assert!((got.out.get(r, c) - want).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]
        #[test]
        fn select_top_matches_full_sort(
            vals in prop::collection::vec(0u8..6, 0..30),
            keep in 0usize..35,
        ) {
            let s = ImportanceScores(vals.iter().map(|&v| v as f32).collect());
            let mut order: Vec<(f32, usize)> = s.0.iter().copied().zip(0..).collect();
            // Stable sort on descending score keeps lower indices first among ties.
            order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let mut want: Vec<usize> = order.iter().take(keep).map(|p| p.1).collect();
            want.sort();
            prop_assert_eq!(select_top(&s, keep), want);
        }
    }
}
