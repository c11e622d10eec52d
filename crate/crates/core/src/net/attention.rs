//! Scaled dot-product attention over externally supplied keys and values.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Multi-head attention `softmax(Q Kᵀ / √d) V` where the keys and values may
/// come from another forward pass. Inputs are `tokens × (heads · head_dim)`.
pub fn attention_with_kv(
    queries: ArrayView2<f32>,
    keys: ArrayView2<f32>,
    values: ArrayView2<f32>,
    heads: usize,
) -> Result<Array2<f32>> {
    Ok(attention_with_probs(queries, keys, values, heads)?.0)
}

/// Same as [`attention_with_kv`] but also returns each head's row-stochastic
/// probability matrix (needed by the backward pass).
pub(crate) fn attention_with_probs(
    queries: ArrayView2<f32>,
    keys: ArrayView2<f32>,
    values: ArrayView2<f32>,
    heads: usize,
) -> Result<(Array2<f32>, Vec<Array2<f32>>)> {
    let width = queries.ncols();
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::invalid(format!(
            "attention width {width} is not divisible by {heads} heads"
        )));
    }
    if keys.ncols() != width || values.ncols() != width {
        return Err(Error::invalid(format!(
            "head-count mismatch: query width {width}, key width {}, value width {}",
            keys.ncols(),
            values.ncols()
        )));
    }
    if keys.nrows() != values.nrows() || keys.nrows() == 0 {
        return Err(Error::invalid(
            "keys and values must share a non-empty token axis",
        ));
    }
    let head_dim = width / heads;
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut out = Array2::<f32>::zeros((queries.nrows(), width));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * head_dim..(h + 1) * head_dim];
        let mut scores = queries.slice(cols).dot(&keys.slice(cols).t());
        scores.mapv_inplace(|v| v * scale);
        softmax_rows(&mut scores);
        out.slice_mut(cols).assign(&scores.dot(&values.slice(cols)));
        probs.push(scores);
    }
    Ok((out, probs))
}

pub(crate) fn softmax_rows(scores: &mut Array2<f32>) {
    for mut row in scores.axis_iter_mut(Axis(0)) {
        let max = row.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|v| v / sum);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Dense reference: loops only, no shared code with the implementation.
    fn dense_oracle(q: &[[f64; 2]], k: &[[f64; 2]], v: &[[f64; 2]]) -> Vec<[f64; 2]> {
        let scale = 1.0 / (2.0f64).sqrt();
        q.iter()
            .map(|qi| {
                let logits: Vec<f64> = k
                    .iter()
                    .map(|kj| (qi[0] * kj[0] + qi[1] * kj[1]) * scale)
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                let mut o = [0.0; 2];
                for (l, vj) in logits.iter().zip(v) {
                    o[0] += l.exp() / z * vj[0];
                    o[1] += l.exp() / z * vj[1];
                }
                o
            })
            .collect()
    }

    #[test]
    fn single_token_returns_value_row() {
        let q = array![[3.0f32, -7.0]];
        let k = array![[0.5f32, 0.25]];
        let v = array![[1.5f32, -2.0]];
        let out = attention_with_kv(q.view(), k.view(), v.view(), 1).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn orthogonal_keys_match_dense_oracle() {
        let q = [[1.0, 0.5], [-0.3, 2.0]];
        let k = [[1.0, 0.0], [0.0, 1.0]];
        let v = [[2.0, -1.0], [0.5, 3.0]];
        let expected = dense_oracle(&q, &k, &v);
        let to_arr = |m: &[[f64; 2]]| Array2::from_shape_fn((m.len(), 2), |(i, j)| m[i][j] as f32);
        let out =
            attention_with_kv(to_arr(&q).view(), to_arr(&k).view(), to_arr(&v).view(), 1).unwrap();
        for (i, row) in expected.iter().enumerate() {
            for j in 0..2 {
                assert!((f64::from(out[[i, j]]) - row[j]).abs() < 1e-6, "({i},{j})");
            }
        }
    }

    #[test]
    fn heads_are_independent() {
        // two heads of width 1: each head is its own single-channel attention
        let q = array![[1.0f32, -1.0], [0.0, 2.0]];
        let k = array![[0.3f32, 1.0], [-0.2, 0.1]];
        let v = array![[1.0f32, 5.0], [2.0, -5.0]];
        let both = attention_with_kv(q.view(), k.view(), v.view(), 2).unwrap();
        for h in 0..2 {
            let col = s![.., h..h + 1];
            let single = attention_with_kv(q.slice(col), k.slice(col), v.slice(col), 1).unwrap();
            assert_eq!(both.slice(col), single);
        }
    }

    #[test]
    fn rejects_mismatched_widths() {
        let q = Array2::<f32>::zeros((2, 4));
        let kv = Array2::<f32>::zeros((2, 6));
        assert!(attention_with_kv(q.view(), kv.view(), kv.view(), 2).is_err());
        assert!(attention_with_kv(q.view(), q.view(), q.view(), 3).is_err());
    }
}
