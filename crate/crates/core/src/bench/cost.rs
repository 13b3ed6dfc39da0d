//! Analytic latency model of speculative decoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-cycle costs and acceptance of one configuration. Times share one unit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Drafting cost per cycle, context fusion included.
    pub t_draft: f64,
    pub t_verify: f64,
    /// Mean tokens committed per cycle.
    pub tau: f64,
    /// Tokens proposed per cycle.
    pub gamma: f64,
    /// One autoregressive target step.
    pub t_step: f64,
    /// One block-drafter forward.
    pub t_parallel: f64,
    /// Baseline latency per token.
    pub l_target: f64,
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 1.0 && self.tau <= self.gamma + 1.0) {
            return Err(Error::config(format!(
                "tau {} outside [1, gamma + 1]",
                self.tau
            )));
        }
        let times = [
            self.t_draft,
            self.t_verify,
            self.t_step,
            self.t_parallel,
            self.l_target,
        ];
        if times.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
            return Err(Error::config("all times must be positive and finite"));
        }
        Ok(())
    }

    /// `L = (T_draft + T_verify) / tau`.
    pub fn latency_per_token(&self) -> Result<f64> {
        if !(self.tau > 0.0) {
            return Err(Error::config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        Ok((self.t_draft + self.t_verify) / self.tau)
    }

    /// `eta = L_target / L`.
    pub fn speedup(&self) -> Result<f64> {
        Ok(self.l_target / self.latency_per_token()?)
    }
}

/// Sequential drafting: `gamma · t_step`.
pub fn ar_draft_cost(gamma: usize, t_step: f64) -> Result<f64> {
    if gamma == 0 {
        return Err(Error::config("gamma must be at least 1"));
    }
    Ok(gamma as f64 * t_step)
}

/// Block drafting costs one forward regardless of the block size.
pub fn diff_draft_cost(t_parallel: f64) -> f64 {
    t_parallel
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(t_draft: f64, t_verify: f64, tau: f64, l_target: f64) -> CostModel {
        CostModel {
            t_draft,
            t_verify,
            tau,
            gamma: 15.0,
            t_step: 1.0,
            t_parallel: 1.0,
            l_target,
        }
    }

    #[test]
    fn substitution_cases() {
        assert_eq!(cm(2.0, 4.0, 3.0, 3.0).latency_per_token().unwrap(), 2.0);
        assert_eq!(cm(0.0, 4.0, 1.0, 3.0).latency_per_token().unwrap(), 4.0);
        assert_eq!(cm(2.0, 4.0, 3.0, 3.0).speedup().unwrap(), 1.5);
        assert_eq!(cm(1.0, 2.0, 1.0, 3.0).speedup().unwrap(), 1.0);
        assert!(cm(1.0, 1.0, 0.0, 1.0).latency_per_token().is_err());
        assert_eq!(ar_draft_cost(8, 0.5).unwrap(), 4.0);
        assert_eq!(ar_draft_cost(1, 0.7).unwrap(), 0.7);
    }

    #[test]
    fn doubling_tau_halves_latency() {
        let a = cm(2.0, 4.0, 3.0, 1.0).latency_per_token().unwrap();
        let b = cm(2.0, 4.0, 6.0, 1.0).latency_per_token().unwrap();
        assert!((a - 2.0 * b).abs() < 1e-12);
    }
}
