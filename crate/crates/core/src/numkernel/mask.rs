//! Sparse attention masks stored as per-query lists of allowed key ranges.
//!
//! A mask is semantically an additive `(queries, keys)` matrix with `0` on
//! allowed cells and `-inf` elsewhere; [`AttnMask::to_additive`] and
//! [`AttnMask::from_additive`] convert between the two forms.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    n_keys: usize,
    offsets: Vec<usize>,
    spans: Vec<(usize, usize)>,
}

impl AttnMask {
    pub fn builder(n_keys: usize) -> MaskBuilder {
        MaskBuilder {
            mask: AttnMask {
                n_keys,
                offsets: vec![0],
                spans: Vec::new(),
            },
        }
    }

    /// Causal mask for `n` new queries that follow `n_prev` already cached keys.
    /// Query `i` sees keys `0..=n_prev + i`.
    pub fn causal(n_prev: usize, n: usize) -> Self {
        let mut b = Self::builder(n_prev + n);
        for i in 0..n {
            b.push_row(&[0..n_prev + i + 1]);
        }
        b.finish()
    }

    /// Every query sees every key.
    pub fn full(n_queries: usize, n_keys: usize) -> Self {
        let mut b = Self::builder(n_keys);
        for _ in 0..n_queries {
            b.push_row(&[0..n_keys]);
        }
        b.finish()
    }

    pub fn n_queries(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_keys(&self) -> usize {
        self.n_keys
    }

    pub fn row_spans(&self, q: usize) -> &[(usize, usize)] {
        &self.spans[self.offsets[q]..self.offsets[q + 1]]
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.row_spans(q).iter().any(|&(a, b)| a <= k && k < b)
    }

    pub fn allowed_in_row(&self, q: usize) -> usize {
        self.row_spans(q).iter().map(|&(a, b)| b - a).sum()
    }

    pub fn total_allowed(&self) -> usize {
        (0..self.n_queries()).map(|q| self.allowed_in_row(q)).sum()
    }

    pub fn to_additive<S: Scalar>(&self) -> Tensor<S> {
        let (nq, nk) = (self.n_queries(), self.n_keys);
        let mut t = Tensor::from_fn(vec![nq, nk], |_| S::neg_infinity());
        for q in 0..nq {
            for &(a, b) in self.row_spans(q) {
                for v in &mut t.row_mut(q)[a..b] {
                    *v = S::zero();
                }
            }
        }
        t
    }

    /// Accepts only `0` (allowed) and `-inf` (masked) entries.
    pub fn from_additive<S: Scalar>(mask: &Tensor<S>) -> Result<Self> {
        if mask.shape().len() != 2 {
            return Err(Error::dim(format!(
                "additive mask must be 2-D, got {:?}",
                mask.shape()
            )));
        }
        let mut b = Self::builder(mask.cols());
        for q in 0..mask.rows() {
            let mut spans = Vec::new();
            let mut start = None;
            for (k, &v) in mask.row(q).iter().enumerate() {
                let allowed = if v == S::zero() {
                    true
                } else if v == S::neg_infinity() {
                    false
                } else {
                    return Err(Error::contract(format!(
                        "mask entry ({q},{k}) is neither 0 nor -inf"
                    )));
                };
                match (allowed, start) {
                    (true, None) => start = Some(k),
                    (false, Some(s)) => {
                        spans.push(s..k);
                        start = None;
                    }
                    _ => {}
                }
            }
            if let Some(s) = start {
                spans.push(s..mask.cols());
            }
            b.push_row(&spans);
        }
        Ok(b.finish())
    }
}

pub struct MaskBuilder {
    mask: AttnMask,
}

impl MaskBuilder {
    /// Adds one query row. Ranges are sorted and merged; empty ranges dropped.
    pub fn push_row(&mut self, ranges: &[Range<usize>]) {
        let mut rs: Vec<(usize, usize)> = ranges
            .iter()
            .filter(|r| r.start < r.end)
            .map(|r| (r.start, r.end.min(self.mask.n_keys)))
            .collect();
        rs.sort_unstable();
        let mut merged: Vec<(usize, usize)> = Vec::with_capacity(rs.len());
        for (a, b) in rs {
            match merged.last_mut() {
                Some(last) if a <= last.1 => last.1 = last.1.max(b),
                _ => merged.push((a, b)),
            }
        }
        self.mask.spans.extend(merged);
        self.mask.offsets.push(self.mask.spans.len());
    }

    pub fn finish(self) -> AttnMask {
        self.mask
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_rows() {
        let m = AttnMask::causal(2, 3);
        assert_eq!(m.n_keys(), 5);
        assert_eq!(m.allowed_in_row(0), 3);
        assert!(m.allows(2, 4));
        assert!(!m.allows(0, 3));
    }

    #[test]
    fn additive_round_trip() {
        let mut b = AttnMask::builder(6);
        b.push_row(&[0..2, 4..6]);
        b.push_row(&[3..4, 1..3]);
        b.push_row(&[]);
        let m = b.finish();
        let add: Tensor<f32> = m.to_additive();
        assert_eq!(
            add.row(0),
            &[0.0, 0.0, f32::NEG_INFINITY, f32::NEG_INFINITY, 0.0, 0.0]
        );
        assert_eq!(m.row_spans(1), &[(1, 4)]);
        assert_eq!(AttnMask::from_additive(&add).unwrap(), m);
    }

    #[test]
    fn rejects_non_binary_additive_entries() {
        let t = Tensor::<f32>::new(vec![1, 2], vec![0.0, -1.0]).unwrap();
        assert!(AttnMask::from_additive(&t).is_err());
    }
}
