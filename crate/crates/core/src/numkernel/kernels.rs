//! Slice-level forward and backward kernels used by the tape.

use crate::error::{Error, Result};
use crate::numkernel::mask::AttnMask;
use crate::scalar::Scalar;

pub const RMS_EPS: f64 = 1e-6;

/// Row-wise RMS normalisation. Returns the per-row `1 / rms` factors.
pub fn rmsnorm<S: Scalar>(x: &[S], gain: &[S], cols: usize, out: &mut [S]) -> Vec<S> {
    let eps = S::from_f64_lossy(RMS_EPS);
    let n = S::from_usize(cols).unwrap();
    x.chunks(cols)
        .zip(out.chunks_mut(cols))
        .map(|(xr, yr)| {
            let ms = xr.iter().map(|&v| v * v).sum::<S>() / n;
            let inv = S::one() / (ms + eps).sqrt();
            for ((y, &v), &g) in yr.iter_mut().zip(xr).zip(gain) {
                *y = v * inv * g;
            }
            inv
        })
        .collect()
}

/// Gradients of [`rmsnorm`]; accumulates into `dx` and `dgain`.
pub fn rmsnorm_backward<S: Scalar>(
    x: &[S],
    gain: &[S],
    inv_rms: &[S],
    dy: &[S],
    cols: usize,
    dx: Option<&mut [S]>,
    dgain: Option<&mut [S]>,
) {
    let n = S::from_usize(cols).unwrap();
    if let Some(dgain) = dgain {
        for ((xr, dyr), &inv) in x.chunks(cols).zip(dy.chunks(cols)).zip(inv_rms) {
            for ((dg, &v), &d) in dgain.iter_mut().zip(xr).zip(dyr) {
                *dg += d * v * inv;
            }
        }
    }
    if let Some(dx) = dx {
        for (((xr, dyr), dxr), &inv) in x
            .chunks(cols)
            .zip(dy.chunks(cols))
            .zip(dx.chunks_mut(cols))
            .zip(inv_rms)
        {
            // dot = mean(x̂ ⊙ g ⊙ dy)
            let dot = xr
                .iter()
                .zip(dyr)
                .zip(gain)
                .map(|((&v, &d), &g)| v * inv * g * d)
                .sum::<S>()
                / n;
            for (((o, &v), &d), &g) in dxr.iter_mut().zip(xr).zip(dyr).zip(gain) {
                *o += inv * (g * d - v * inv * dot);
            }
        }
    }
}

/// Rotary embedding over interleaved pairs within each head. `sign = -1`
/// applies the inverse rotation, which is also the backward pass.
pub fn rope<S: Scalar>(x: &mut [S], positions: &[usize], n_heads: usize, theta: f64, sign: f64) {
    let cols = x.len() / positions.len().max(1);
    let head_dim = cols / n_heads;
    let half = head_dim / 2;
    let mut cs = vec![(S::zero(), S::zero()); half];
    for (row, &pos) in x.chunks_mut(cols).zip(positions) {
        for (i, c) in cs.iter_mut().enumerate() {
            let freq = theta.powf(-2.0 * i as f64 / head_dim as f64);
            let angle = sign * pos as f64 * freq;
            *c = (
                S::from_f64_lossy(angle.cos()),
                S::from_f64_lossy(angle.sin()),
            );
        }
        for head in row.chunks_mut(head_dim) {
            for (i, &(cos, sin)) in cs.iter().enumerate() {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * cos - b * sin;
                head[2 * i + 1] = a * sin + b * cos;
            }
        }
    }
}

pub fn softmax_rows<S: Scalar>(x: &mut [S], cols: usize) {
    for row in x.chunks_mut(cols) {
        softmax_in_place(row);
    }
}

pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// Read-only view over the row-concatenation of several row-major blocks.
pub struct RowParts<'a, S> {
    parts: Vec<&'a [S]>,
    starts: Vec<usize>,
    width: usize,
    len: usize,
}

impl<'a, S: Copy> RowParts<'a, S> {
    pub fn new(parts: Vec<&'a [S]>, width: usize) -> Self {
        let mut starts = Vec::with_capacity(parts.len());
        let mut len = 0;
        for p in &parts {
            starts.push(len);
            len += p.len() / width;
        }
        RowParts {
            parts,
            starts,
            width,
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    fn locate(&self, j: usize) -> (usize, usize) {
        let mut p = self.starts.len() - 1;
        while self.starts[p] > j {
            p -= 1;
        }
        (p, j - self.starts[p])
    }

    #[inline]
    pub fn row(&self, j: usize) -> &'a [S] {
        let (p, r) = self.locate(j);
        &self.parts[p][r * self.width..(r + 1) * self.width]
    }
}

/// Mutable counterpart of [`RowParts`] for accumulating key/value gradients.
pub struct RowPartsMut<'a, S> {
    parts: Vec<&'a mut [S]>,
    starts: Vec<usize>,
    width: usize,
}

impl<'a, S> RowPartsMut<'a, S> {
    pub fn new(parts: Vec<&'a mut [S]>, width: usize) -> Self {
        let mut starts = Vec::with_capacity(parts.len());
        let mut len = 0;
        for p in &parts {
            starts.push(len);
            len += p.len() / width;
        }
        RowPartsMut {
            parts,
            starts,
            width,
        }
    }

    #[inline]
    pub fn row_mut(&mut self, j: usize) -> &mut [S] {
        let mut p = self.starts.len() - 1;
        while self.starts[p] > j {
            p -= 1;
        }
        let r = j - self.starts[p];
        &mut self.parts[p][r * self.width..(r + 1) * self.width]
    }
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Multi-head scaled dot-product attention restricted to the mask's allowed
/// cells. Returns the output rows and the attention probabilities in
/// (head, query, allowed key) order.
pub fn attention_forward<S: Scalar>(
    q: &[S],
    keys: &RowParts<'_, S>,
    values: &RowParts<'_, S>,
    mask: &AttnMask,
    n_heads: usize,
    keep_probs: bool,
) -> Result<(Vec<S>, Vec<S>)> {
    let width = keys.width;
    let nq = q.len() / width;
    if mask.n_queries() != nq || mask.n_keys() != keys.len() || values.len() != keys.len() {
        return Err(Error::dim(format!(
            "attention mask {}x{} vs {} queries and {} keys",
            mask.n_queries(),
            mask.n_keys(),
            nq,
            keys.len()
        )));
    }
    let head_dim = width / n_heads;
    let scale = S::one() / S::from_usize(head_dim).unwrap().sqrt();
    let mut out = vec![S::zero(); q.len()];
    let mut probs = Vec::with_capacity(if keep_probs {
        n_heads * mask.total_allowed()
    } else {
        0
    });
    let mut scores: Vec<S> = Vec::new();
    for h in 0..n_heads {
        let hs = h * head_dim..(h + 1) * head_dim;
        for i in 0..nq {
            let spans = mask.row_spans(i);
            if spans.is_empty() {
                return Err(Error::Numeric(format!(
                    "attention query {i} has no visible keys"
                )));
            }
            let qi = &q[i * width..(i + 1) * width][hs.clone()];
            scores.clear();
            let mut max = S::neg_infinity();
            for &(a, b) in spans {
                for j in a..b {
                    let s = dot(qi, &keys.row(j)[hs.clone()]) * scale;
                    max = max.max(s);
                    scores.push(s);
                }
            }
            let mut sum = S::zero();
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            let oi = &mut out[i * width..(i + 1) * width][hs.clone()];
            let mut idx = 0;
            for &(a, b) in spans {
                for j in a..b {
                    let p = scores[idx] / sum;
                    scores[idx] = p;
                    idx += 1;
                    for (o, &v) in oi.iter_mut().zip(&values.row(j)[hs.clone()]) {
                        *o += p * v;
                    }
                }
            }
            if keep_probs {
                probs.extend_from_slice(&scores);
            }
        }
    }
    Ok((out, probs))
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward<S: Scalar>(
    q: &[S],
    keys: &RowParts<'_, S>,
    values: &RowParts<'_, S>,
    mask: &AttnMask,
    n_heads: usize,
    probs: &[S],
    dout: &[S],
    dq: &mut [S],
    dk: &mut RowPartsMut<'_, S>,
    dv: &mut RowPartsMut<'_, S>,
) {
    let width = keys.width;
    let nq = q.len() / width;
    let head_dim = width / n_heads;
    let scale = S::one() / S::from_usize(head_dim).unwrap().sqrt();
    let mut dp: Vec<S> = Vec::new();
    let mut cursor = 0;
    for h in 0..n_heads {
        let hs = h * head_dim..(h + 1) * head_dim;
        for i in 0..nq {
            let spans = mask.row_spans(i);
            let n_allowed = mask.allowed_in_row(i);
            let p = &probs[cursor..cursor + n_allowed];
            cursor += n_allowed;
            let doi = &dout[i * width..(i + 1) * width][hs.clone()];
            let qi = &q[i * width..(i + 1) * width][hs.clone()];
            dp.clear();
            for &(a, b) in spans {
                for j in a..b {
                    dp.push(dot(doi, &values.row(j)[hs.clone()]));
                }
            }
            let s = p.iter().zip(&dp).map(|(&pj, &dj)| pj * dj).sum::<S>();
            let mut idx = 0;
            for &(a, b) in spans {
                for j in a..b {
                    let pj = p[idx];
                    let ds = pj * (dp[idx] - s) * scale;
                    idx += 1;
                    let kj = &keys.row(j)[hs.clone()];
                    let dqi = &mut dq[i * width..(i + 1) * width][hs.clone()];
                    for (d, &k) in dqi.iter_mut().zip(kj) {
                        *d += ds * k;
                    }
                    for (d, &qv) in dk.row_mut(j)[hs.clone()].iter_mut().zip(qi) {
                        *d += ds * qv;
                    }
                    for (d, &g) in dv.row_mut(j)[hs.clone()].iter_mut().zip(doi) {
                        *d += pj * g;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut x = [0.0f32; 4];
        softmax_in_place(&mut x);
        assert_eq!(x, [0.25; 4]);
    }

    #[test]
    fn rmsnorm_rows_have_unit_rms() {
        let x: Vec<f64> = (0..12).map(|i| (i as f64 - 5.0) * 0.7).collect();
        let mut y = vec![0.0; 12];
        rmsnorm(&x, &[1.0; 4], 4, &mut y);
        for row in y.chunks(4) {
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / 4.0).sqrt();
            assert!((rms - 1.0).abs() < 1e-4, "rms {rms}");
        }
    }

    #[test]
    fn rope_inverse_restores_input() {
        let orig: Vec<f64> = (0..16).map(|i| (i as f64).cos()).collect();
        let mut x = orig.clone();
        rope(&mut x, &[3, 11], 2, 10_000.0, 1.0);
        assert!(x.iter().zip(&orig).any(|(a, b)| (a - b).abs() > 1e-3));
        rope(&mut x, &[3, 11], 2, 10_000.0, -1.0);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_preserves_relative_offsets() {
        // <rope(q, m), rope(k, n)> depends only on m - n.
        let q: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let k: Vec<f64> = (0..8).map(|i| (i as f64 * 0.91).cos()).collect();
        let score = |m: usize, n: usize| {
            let (mut a, mut b) = (q.clone(), k.clone());
            rope(&mut a, &[m], 1, 10_000.0, 1.0);
            rope(&mut b, &[n], 1, 10_000.0, 1.0);
            dot(&a, &b)
        };
        assert!((score(7, 3) - score(14, 10)).abs() < 1e-10);
    }

    #[test]
    fn self_only_mask_returns_own_value_row() {
        // Two queries, two keys; each query may only see its own key, so the
        // single surviving weight is exp(s)/exp(s) = 1 and the output is v_i.
        let q = [1.0f64, 2.0, -1.0, 0.5];
        let k = [0.3f64, 0.1, 2.0, -1.0];
        let v = [5.0f64, 6.0, 7.0, 8.0];
        let mut b = AttnMask::builder(2);
        b.push_row(&[0..1]);
        b.push_row(&[1..2]);
        let mask = b.finish();
        let keys = RowParts::new(vec![&k[..]], 2);
        let vals = RowParts::new(vec![&v[..]], 2);
        let (out, probs) = attention_forward(&q, &keys, &vals, &mask, 1, true).unwrap();
        assert_eq!(out, vec![5.0, 6.0, 7.0, 8.0]);
        assert_eq!(probs, vec![1.0, 1.0]);
    }

    #[test]
    fn split_key_parts_match_contiguous_keys() {
        let q: Vec<f64> = (0..12).map(|i| (i as f64 * 0.3).sin()).collect();
        let k: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).cos()).collect();
        let v: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        let mask = AttnMask::full(3, 5);
        let whole = attention_forward(
            &q,
            &RowParts::new(vec![&k[..]], 4),
            &RowParts::new(vec![&v[..]], 4),
            &mask,
            2,
            false,
        )
        .unwrap()
        .0;
        let split = attention_forward(
            &q,
            &RowParts::new(vec![&k[..8], &k[8..]], 4),
            &RowParts::new(vec![&v[..8], &v[8..]], 4),
            &mask,
            2,
            false,
        )
        .unwrap()
        .0;
        assert_eq!(whole, split);
    }
}
