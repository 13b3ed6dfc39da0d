//! Wall-clock measurement: warmup runs are discarded, the median of the rest
//! is reported.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timer {
    /// Measured runs kept after warmup.
    pub kept: usize,
    /// Fraction of all runs discarded as warmup.
    pub warmup_fraction: f64,
}

impl Default for Timer {
    fn default() -> Self {
        Timer {
            kept: 5,
            warmup_fraction: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub median_ms: f64,
    pub kept_ms: Vec<f64>,
    pub warmup_runs: usize,
}

impl Timer {
    /// Total runs so that `kept` remain once the warmup share is dropped.
    pub fn total_runs(&self) -> usize {
        let kept = self.kept.max(1);
        ((kept as f64 / (1.0 - self.warmup_fraction)).ceil() as usize).max(kept)
    }

    pub fn measure(&self, mut f: impl FnMut() -> Result<()>) -> Result<Timing> {
        Ok(self.measure_each(1, |_| f())?.remove(0))
    }

    /// Times `f(0) .. f(n-1)` round-robin, so drift in machine speed lands on
    /// every case alike and ratios between them stay stable.
    pub fn measure_each(
        &self,
        n: usize,
        mut f: impl FnMut(usize) -> Result<()>,
    ) -> Result<Vec<Timing>> {
        let total = self.total_runs();
        let warmup = total - self.kept.max(1);
        let mut kept_ms = vec![Vec::with_capacity(total - warmup); n];
        for i in 0..total {
            for (j, kept) in kept_ms.iter_mut().enumerate() {
                let t = Instant::now();
                f(j)?;
                if i >= warmup {
                    kept.push(t.elapsed().as_secs_f64() * 1e3);
                }
            }
        }
        Ok(kept_ms
            .into_iter()
            .map(|kept_ms| Timing {
                median_ms: median(&kept_ms),
                kept_ms,
                warmup_runs: warmup,
            })
            .collect())
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_share_and_median() {
        let t = Timer::default();
        assert_eq!(t.total_runs(), 8);
        let mut calls = 0;
        let r = t.measure(|| {
            calls += 1;
            Ok(())
        });
        let r = r.unwrap();
        assert_eq!(calls, 8);
        assert_eq!(r.warmup_runs, 3);
        assert_eq!(r.kept_ms.len(), 5);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn cases_alternate_within_each_round() {
        let mut order = Vec::new();
        let r = Timer::default()
            .measure_each(2, |j| {
                order.push(j);
                Ok(())
            })
            .unwrap();
        assert_eq!(order, [0, 1].repeat(8));
        assert!(r.iter().all(|t| t.kept_ms.len() == 5));
    }
}
