//! Dense f32 kernels: row softmax, rotary embedding, streaming masked
//! attention with log-sum-exp output, and log-sum-exp merging of partial
//! attention results.

use crate::error::{contract, config, ApbError, Result};

/// Default number of keys processed per streaming tile.
pub const DEFAULT_KEY_TILE: usize = 64;

/// Row-major dense f32 matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(contract(format!(
                "matrix data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(contract(format!("non-finite matrix entry at {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// `self (m×k) · other (k×n)`, accumulated in f32 in index order.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(contract(format!(
                "matmul shape mismatch: {}x{} · {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let lhs = self.row(r);
            let dst = out.row_mut(r);
            for (kk, &a) in lhs.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (d, &b) in dst.iter_mut().zip(other.row(kk)) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn vstack<'a>(parts: impl IntoIterator<Item = &'a Matrix>, cols: usize) -> Result<Matrix> {
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(contract(format!("vstack column mismatch: {} vs {cols}", p.cols)));
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Columns `start..end` as a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_fn(self.rows, end - start, |r, c| self.get(r, start + c))
    }

    pub fn gather_rows(&self, indices: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(contract(format!("row index {i} out of range {}", self.rows)));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(contract("add shape mismatch"));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Attention output rows plus the log-sum-exp of each row's visible scores.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialAttention {
    pub out: Matrix,
    pub lse: Vec<f32>,
}

impl PartialAttention {
    pub fn rows(&self) -> usize {
        self.out.rows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Anchor rows see the anchor causally; block rows see anchor, passing,
    /// and the block causally.
    Apb,
    /// Rows see the whole prefix (`passing_len` keys) and the block causally.
    Causal,
    /// Every row sees every key.
    Full,
}

/// Block-structured boolean mask over keys laid out as
/// `[anchor | passing | block]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub anchor_len: usize,
    pub passing_len: usize,
    pub block_len: usize,
    pub mode: MaskMode,
}

impl MaskSpec {
    pub fn apb(anchor_len: usize, passing_len: usize, block_len: usize) -> Self {
        Self {
            anchor_len,
            passing_len,
            block_len,
            mode: MaskMode::Apb,
        }
    }

    pub fn causal(n: usize) -> Self {
        Self::causal_with_prefix(0, n)
    }

    /// `n` query rows over `prefix` fully visible keys followed by `n`
    /// causally visible keys.
    pub fn causal_with_prefix(prefix: usize, n: usize) -> Self {
        Self {
            anchor_len: 0,
            passing_len: prefix,
            block_len: n,
            mode: MaskMode::Causal,
        }
    }

    pub fn full(keys: usize) -> Self {
        Self {
            anchor_len: 0,
            passing_len: 0,
            block_len: keys,
            mode: MaskMode::Full,
        }
    }

    pub fn key_count(&self) -> usize {
        self.anchor_len + self.passing_len + self.block_len
    }

    /// Required query count, or `None` when any count is accepted.
    pub fn query_count(&self) -> Option<usize> {
        match self.mode {
            MaskMode::Full => None,
            _ => Some(self.anchor_len + self.block_len),
        }
    }

    /// Every row's visible keys form the prefix `0..visible_keys(row)`.
    pub fn visible_keys(&self, row: usize) -> usize {
        match self.mode {
            MaskMode::Full => self.key_count(),
            MaskMode::Apb | MaskMode::Causal => {
                if row < self.anchor_len {
                    row + 1
                } else {
                    self.anchor_len + self.passing_len + (row - self.anchor_len) + 1
                }
            }
        }
    }

    pub fn is_visible(&self, row: usize, key: usize) -> bool {
        key < self.visible_keys(row)
    }

    pub fn to_dense(&self, rows: usize) -> Vec<Vec<bool>> {
        (0..rows)
            .map(|r| (0..self.key_count()).map(|k| self.is_visible(r, k)).collect())
            .collect()
    }

    /// Score entries charged to this mask, with every causal triangle of side
    /// `m` counted as `m²/2`.
    pub fn score_area(&self, rows: usize) -> f64 {
        let (a, p, b) = (
            self.anchor_len as f64,
            self.passing_len as f64,
            self.block_len as f64,
        );
        match self.mode {
            MaskMode::Full => rows as f64 * self.key_count() as f64,
            MaskMode::Apb | MaskMode::Causal => 0.5 * a * a + b * (a + p) + 0.5 * b * b,
        }
    }
}

/// Masked softmax of one score row; masked entries (`visible[j] == false`)
/// come out as exactly zero.
pub fn softmax_row(scores: &[f32], visible: &[bool]) -> Result<Vec<f32>> {
    if scores.len() != visible.len() {
        return Err(contract("softmax_row: scores and mask lengths differ"));
    }
    let max = scores
        .iter()
        .zip(visible)
        .filter(|(_, &v)| v)
        .map(|(&s, _)| s as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(ApbError::EmptyAttentionRow { row: 0 });
    }
    let exps: Vec<f64> = scores
        .iter()
        .zip(visible)
        .map(|(&s, &v)| if v { (s as f64 - max).exp() } else { 0.0 })
        .collect();
    let denom: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| (e / denom) as f32).collect())
}

/// Rotary position embedding over interleaved pairs `(2i, 2i+1)` of each
/// row, with angle `position / theta^(2i/head_dim)`.
pub fn rope_apply(x: &Matrix, positions: &[usize], theta_base: f64) -> Result<Matrix> {
    let hd = x.cols();
    if !hd.is_multiple_of(2) {
        return Err(config(format!("rotary embedding needs an even head dim, got {hd}")));
    }
    if positions.len() != x.rows() {
        return Err(contract(format!(
            "rope: {} positions for {} rows",
            positions.len(),
            x.rows()
        )));
    }
    let mut out = x.clone();
    for (r, &pos) in positions.iter().enumerate() {
        if pos == 0 {
            continue;
        }
        let row = out.row_mut(r);
        for i in 0..hd / 2 {
            let freq = theta_base.powf(-(2.0 * i as f64) / hd as f64);
            let (sin, cos) = (pos as f64 * freq).sin_cos();
            let (a, b) = (row[2 * i] as f64, row[2 * i + 1] as f64);
            row[2 * i] = (a * cos - b * sin) as f32;
            row[2 * i + 1] = (a * sin + b * cos) as f32;
        }
    }
    Ok(out)
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Masked scaled dot-product attention, streamed over keys in tiles of
/// [`DEFAULT_KEY_TILE`].
pub fn tiled_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &MaskSpec,
    scale: f32,
) -> Result<PartialAttention> {
    tiled_attention_with_tile(q, k, v, mask, scale, DEFAULT_KEY_TILE)
}

pub fn tiled_attention_with_tile(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &MaskSpec,
    scale: f32,
    tile: usize,
) -> Result<PartialAttention> {
    if k.rows() != v.rows() {
        return Err(contract(format!("K has {} rows, V has {}", k.rows(), v.rows())));
    }
    if q.cols() != k.cols() {
        return Err(contract(format!("Q dim {} != K dim {}", q.cols(), k.cols())));
    }
    if mask.key_count() != k.rows() {
        return Err(contract(format!(
            "mask covers {} keys, K has {}",
            mask.key_count(),
            k.rows()
        )));
    }
    if let Some(qc) = mask.query_count() {
        if qc != q.rows() {
            return Err(contract(format!("mask expects {qc} query rows, Q has {}", q.rows())));
        }
    }
    if tile == 0 {
        return Err(contract("key tile size must be positive"));
    }

    let dv = v.cols();
    let mut out = Matrix::zeros(q.rows(), dv);
    let mut lse = Vec::with_capacity(q.rows());
    let mut acc = vec![0f64; dv];
    let mut scores = Vec::with_capacity(tile.min(k.rows()));

    for r in 0..q.rows() {
        let limit = mask.visible_keys(r);
        if limit == 0 {
            return Err(ApbError::EmptyAttentionRow { row: r });
        }
        let qr = q.row(r);
        let mut running_max = f64::NEG_INFINITY;
        let mut denom = 0f64;
        acc.iter_mut().for_each(|a| *a = 0.0);

        for start in (0..limit).step_by(tile) {
            let end = start.saturating_add(tile).min(limit);
            scores.clear();
            scores.extend((start..end).map(|j| (dot(qr, k.row(j)) * scale) as f64));
            let tile_max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let new_max = running_max.max(tile_max);
            let correction = (running_max - new_max).exp();
            denom *= correction;
            acc.iter_mut().for_each(|a| *a *= correction);
            for (j, &s) in (start..end).zip(&scores) {
                let p = (s - new_max).exp();
                denom += p;
                for (a, &x) in acc.iter_mut().zip(v.row(j)) {
                    *a += p * x as f64;
                }
            }
            running_max = new_max;
        }

        for (o, a) in out.row_mut(r).iter_mut().zip(&acc) {
            *o = (a / denom) as f32;
        }
        lse.push((running_max + denom.ln()) as f32);
    }
    Ok(PartialAttention { out, lse })
}

/// Combine partial attentions over disjoint key sets, in the given order,
/// into the attention over their union.
pub fn merge_partial_attention(parts: &[PartialAttention]) -> Result<PartialAttention> {
    let first = parts
        .first()
        .ok_or_else(|| contract("merge of zero partial attentions"))?;
    let (rows, cols) = (first.out.rows(), first.out.cols());
    for p in parts {
        if p.out.rows() != rows || p.out.cols() != cols || p.lse.len() != rows {
            return Err(contract("merge_partial_attention: mismatched part shapes"));
        }
    }

    let mut out = Matrix::zeros(rows, cols);
    let mut lse = Vec::with_capacity(rows);
    let mut acc = vec![0f64; cols];
    for r in 0..rows {
        let max = parts
            .iter()
            .map(|p| p.lse[r] as f64)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(ApbError::EmptyAttentionRow { row: r });
        }
        let total: f64 = parts.iter().map(|p| (p.lse[r] as f64 - max).exp()).sum();
        let global = max + total.ln();
        acc.iter_mut().for_each(|a| *a = 0.0);
        for p in parts {
            let w = (p.lse[r] as f64 - global).exp();
            for (a, &x) in acc.iter_mut().zip(p.out.row(r)) {
                *a += w * x as f64;
            }
        }
        for (o, a) in out.row_mut(r).iter_mut().zip(&acc) {
            *o = *a as f32;
        }
        lse.push(global as f32);
    }
    Ok(PartialAttention { out, lse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Naive dense attention: full score matrix, mask, softmax, weighted sum.
    fn naive_attention(q: &Matrix, k: &Matrix, v: &Matrix, mask: &MaskSpec, scale: f32) -> (Matrix, Vec<f64>) {
        let dense = mask.to_dense(q.rows());
        let mut out = Matrix::zeros(q.rows(), v.cols());
        let mut lses = Vec::new();
        for i in 0..q.rows() {
            let scores: Vec<f64> = (0..k.rows())
                .map(|j| {
                    (0..q.cols()).map(|c| q.get(i, c) as f64 * k.get(j, c) as f64).sum::<f64>()
                        * scale as f64
                })
                .collect();
            let z: f64 = (0..k.rows()).filter(|&j| dense[i][j]).map(|j| scores[j].exp()).sum();
            for j in 0..k.rows() {
                if dense[i][j] {
                    let p = scores[j].exp() / z;
                    for c in 0..v.cols() {
                        out.row_mut(i)[c] += (p * v.get(j, c) as f64) as f32;
                    }
                }
            }
            lses.push(z.ln());
        }
        (out, lses)
    }

    #[test]
    fn softmax_symmetric_pair() {
        assert_eq!(softmax_row(&[0.0, 0.0], &[true, true]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_single_entry() {
        assert_eq!(softmax_row(&[3.7], &[true]).unwrap(), vec![1.0]);
    }

    #[test]
    fn softmax_matches_direct_exp_sum() {
        let got = softmax_row(&[1.0, 2.0, 3.0], &[true; 3]).unwrap();
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (g, x) in got.iter().zip([1f64, 2.0, 3.0]) {
            assert!((*g as f64 - x.exp() / z).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_masked_entries_are_zero() {
        let got = softmax_row(&[5.0, 1.0, 9.0], &[true, true, false]).unwrap();
        assert_eq!(got[2], 0.0);
        assert!((got[0] + got[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_all_masked_is_error() {
        assert!(matches!(
            softmax_row(&[1.0, 2.0], &[false, false]),
            Err(ApbError::EmptyAttentionRow { .. })
        ));
    }

    #[test]
    fn rope_zero_position_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_matrix(&mut rng, 1, 8);
        assert_eq!(rope_apply(&x, &[0], 10000.0).unwrap(), x);
    }

    #[test]
    fn rope_odd_head_dim_rejected() {
        let x = Matrix::zeros(1, 3);
        assert!(matches!(rope_apply(&x, &[1], 10000.0), Err(ApbError::Config(_))));
    }

    #[test]
    fn rope_matches_complex_rotation_and_is_relative() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hd = 8;
        let q = random_matrix(&mut rng, 1, hd);
        let k = random_matrix(&mut rng, 1, hd);
        let theta = 10000.0;
        // Complex-number oracle: pair i is z = a + ib multiplied by e^{i·pos·freq}.
        let rotate = |x: &Matrix, pos: usize| -> Vec<f64> {
            let mut out = vec![0.0; hd];
            for i in 0..hd / 2 {
                let freq = 1.0 / (theta as f64).powf(2.0 * i as f64 / hd as f64);
                let (re, im) = (x.get(0, 2 * i) as f64, x.get(0, 2 * i + 1) as f64);
                let (wr, wi) = ((pos as f64 * freq).cos(), (pos as f64 * freq).sin());
                out[2 * i] = re * wr - im * wi;
                out[2 * i + 1] = re * wi + im * wr;
            }
            out
        };
        for pos in [1usize, 7, 100] {
            let got = rope_apply(&q, &[pos], theta).unwrap();
            for (g, e) in got.row(0).iter().zip(rotate(&q, pos)) {
                assert!((*g as f64 - e).abs() < 1e-6);
            }
        }
        let dot_at = |pq: usize, pk: usize| -> f64 {
            let a = rope_apply(&q, &[pq], theta).unwrap();
            let b = rope_apply(&k, &[pk], theta).unwrap();
            a.row(0).iter().zip(b.row(0)).map(|(x, y)| *x as f64 * *y as f64).sum()
        };
        assert!((dot_at(5, 2) - dot_at(13, 10)).abs() < 1e-5);
        assert!((dot_at(40, 40) - dot_at(0, 0)).abs() < 1e-5);
    }

    #[test]
    fn single_key_attention() {
        let q = Matrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        let k = Matrix::new(1, 2, vec![0.5, -1.0]).unwrap();
        let v = Matrix::new(1, 2, vec![3.0, 4.0]).unwrap();
        let pa = tiled_attention(&q, &k, &v, &MaskSpec::full(1), 0.5).unwrap();
        assert_eq!(pa.out, v);
        assert!((pa.lse[0] - (1.0 * 0.5 + 2.0 * -1.0) * 0.5).abs() < 1e-7);
    }

    #[test]
    fn causal_attention_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (q, k, v) = (
            random_matrix(&mut rng, 8, 4),
            random_matrix(&mut rng, 8, 4),
            random_matrix(&mut rng, 8, 4),
        );
        let mask = MaskSpec::causal(8);
        let got = tiled_attention_with_tile(&q, &k, &v, &mask, 0.5, 3).unwrap();
        let (want, lse) = naive_attention(&q, &k, &v, &mask, 0.5);
        assert!(got.out.max_abs_diff(&want) < 1e-6);
        for (g, w) in got.lse.iter().zip(lse) {
            assert!((*g as f64 - w).abs() < 1e-6);
        }
    }

    #[test]
    fn apb_mask_attention_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mask = MaskSpec::apb(3, 2, 5);
        let (q, k, v) = (
            random_matrix(&mut rng, 8, 6),
            random_matrix(&mut rng, 10, 6),
            random_matrix(&mut rng, 10, 6),
        );
        let got = tiled_attention(&q, &k, &v, &mask, 0.3).unwrap();
        let (want, _) = naive_attention(&q, &k, &v, &mask, 0.3);
        assert!(got.out.max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn tile_one_equals_tile_all() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20;
        let (q, k, v) = (
            random_matrix(&mut rng, n, 4),
            random_matrix(&mut rng, n, 4),
            random_matrix(&mut rng, n, 4),
        );
        let mask = MaskSpec::causal(n);
        let a = tiled_attention_with_tile(&q, &k, &v, &mask, 1.0, 1).unwrap();
        let b = tiled_attention_with_tile(&q, &k, &v, &mask, 1.0, n).unwrap();
        assert!(a.out.max_abs_diff(&b.out) < 1e-6);
    }

    #[test]
    fn attention_rejects_inconsistent_mask() {
        let m = Matrix::zeros(2, 2);
        assert!(matches!(
            tiled_attention(&m, &m, &m, &MaskSpec::causal(3), 1.0),
            Err(ApbError::Contract(_))
        ));
    }

    #[test]
    fn merge_single_part_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (q, k, v) = (
            random_matrix(&mut rng, 3, 4),
            random_matrix(&mut rng, 5, 4),
            random_matrix(&mut rng, 5, 4),
        );
        let pa = tiled_attention(&q, &k, &v, &MaskSpec::full(5), 1.0).unwrap();
        let merged = merge_partial_attention(std::slice::from_ref(&pa)).unwrap();
        assert_eq!(merged.out, pa.out);
    }

    #[test]
    fn merge_of_disjoint_halves_equals_global_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (q, k, v) = (
            random_matrix(&mut rng, 3, 4),
            random_matrix(&mut rng, 8, 4),
            random_matrix(&mut rng, 8, 4),
        );
        let lo = tiled_attention(&q, &k.slice_rows(0, 4), &v.slice_rows(0, 4), &MaskSpec::full(4), 0.7).unwrap();
        let hi = tiled_attention(&q, &k.slice_rows(4, 8), &v.slice_rows(4, 8), &MaskSpec::full(4), 0.7).unwrap();
        let merged = merge_partial_attention(&[lo, hi]).unwrap();
        let (want, _) = naive_attention(&q, &k, &v, &MaskSpec::full(8), 0.7);
        assert!(merged.out.max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn merge_of_identical_parts_keeps_values() {
        let pa = PartialAttention {
            out: Matrix::new(1, 2, vec![0.25, -2.0]).unwrap(),
            lse: vec![1.5],
        };
        let merged = merge_partial_attention(&[pa.clone(), pa.clone()]).unwrap();
        assert!(merged.out.max_abs_diff(&pa.out) < 1e-7);
        assert!((merged.lse[0] - (1.5 + 2f32.ln())).abs() < 1e-6);
    }

    #[test]
    fn merge_rejects_mismatched_shapes() {
        let a = PartialAttention {
            out: Matrix::zeros(1, 2),
            lse: vec![0.0],
        };
        let b = PartialAttention {
            out: Matrix::zeros(2, 2),
            lse: vec![0.0, 0.0],
        };
        assert!(matches!(merge_partial_attention(&[a, b]), Err(ApbError::Contract(_))));
    }

    #[test]
    fn score_area_halves_causal_triangles() {
        assert_eq!(MaskSpec::causal(4).score_area(4), 8.0);
        assert_eq!(MaskSpec::apb(2, 1, 2).score_area(4), 2.0 + 6.0 + 2.0);
        assert_eq!(MaskSpec::full(5).score_area(3), 15.0);
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(
            scores in prop::collection::vec(-50f32..50.0, 1..40),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut mask: Vec<bool> = scores.iter().map(|_| rng.random_bool(0.7)).collect();
            mask[0] = true;
            let p = softmax_row(&scores, &mask).unwrap();
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            let s: f64 = p.iter().map(|&x| x as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }

        #[test]
        fn rope_preserves_pair_norms(
            vals in prop::collection::vec(-10f32..10.0, 8),
            pos in 0usize..100_000,
        ) {
            let x = Matrix::new(1, 8, vals).unwrap();
            let y = rope_apply(&x, &[pos], 10000.0).unwrap();
            for i in 0..4 {
                let n0 = (x.get(0, 2*i) as f64).hypot(x.get(0, 2*i+1) as f64);
                let n1 = (y.get(0, 2*i) as f64).hypot(y.get(0, 2*i+1) as f64);
                prop_assert!((n0 - n1).abs() < 1e-6 * n0.max(1.0));
            }
        }

        #[test]
        fn tiling_invariance(seed in any::<u64>(), n in 1usize..40, a in 0usize..5, p in 0usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = MaskSpec::apb(a, p, n);
            let q = random_matrix(&mut rng, a + n, 4);
            let k = random_matrix(&mut rng, a + p + n, 4);
            let v = random_matrix(&mut rng, a + p + n, 4);
            let reference = tiled_attention_with_tile(&q, &k, &v, &mask, 0.5, usize::MAX).unwrap();
            for tile in [1, 4, 16] {
                let got = tiled_attention_with_tile(&q, &k, &v, &mask, 0.5, tile).unwrap();
                prop_assert!(got.out.max_abs_diff(&reference.out) < 1e-6);
                let again = tiled_attention_with_tile(&q, &k, &v, &mask, 0.5, tile).unwrap();
                prop_assert_eq!(got, again);
            }
        }

        #[test]
        fn merge_is_associative(seed in any::<u64>(), rows in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_matrix(&mut rng, rows, 4);
            let parts: Vec<PartialAttention> = (0..3).map(|_| {
                let k = random_matrix(&mut rng, 3, 4);
                let v = random_matrix(&mut rng, 3, 4);
                tiled_attention(&q, &k, &v, &MaskSpec::full(3), 1.0).unwrap()
            }).collect();
            let ab = merge_partial_attention(&parts[..2]).unwrap();
            let nested = merge_partial_attention(&[ab, parts[2].clone()]).unwrap();
            let flat = merge_partial_attention(&parts).unwrap();
            prop_assert!(nested.out.max_abs_diff(&flat.out) < 1e-6);
        }
    }
}
