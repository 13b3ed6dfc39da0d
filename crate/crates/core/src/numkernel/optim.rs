//! AdamW with global-norm gradient clipping and a warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamVisitor, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm threshold; `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 6e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clip_scale: f64,
}

pub struct AdamW<S> {
    pub config: AdamWConfig,
    step_count: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Global L2 norm of all trainable gradients.
    pub fn grad_norm(model: &(impl ParamVisitor<S> + ?Sized)) -> f64 {
        let mut sq = 0.0;
        model.visit_params(&mut |_, p| {
            if let Some(g) = &p.grad {
                sq += g.sum_squares();
            }
        });
        sq.sqrt()
    }

    /// Applies one update at learning rate `lr` and clears the gradients.
    pub fn step(
        &mut self,
        model: &mut (impl ParamVisitor<S> + ?Sized),
        lr: f64,
    ) -> Result<StepStats> {
        let mut missing = None;
        model.visit_params(&mut |name, p| {
            if p.requires_grad && p.grad.is_none() && missing.is_none() {
                missing = Some(name.to_string());
            }
        });
        if let Some(name) = missing {
            return Err(Error::contract(format!("parameter {name} has no gradient")));
        }

        let grad_norm = Self::grad_norm(model);
        if !grad_norm.is_finite() {
            return Err(Error::Numeric("non-finite gradient norm".into()));
        }
        let clip_scale = match self.config.grad_clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };

        self.step_count += 1;
        let t = self.step_count as i32;
        let cfg = &self.config;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let to = S::from_f64_lossy;
        let (sb1, sb2, sclip, seps) = (to(b1), to(b2), to(clip_scale), to(cfg.eps));
        let (slr, sdecay, sbc1, sbc2) = (to(lr), to(1.0 - lr * cfg.weight_decay), to(bc1), to(bc2));

        let first = self.m.is_empty();
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        let mut result = Ok(());
        model.visit_params_mut(&mut |name, p| {
            if !p.requires_grad {
                return;
            }
            let Some(g) = p.grad.take() else { return };
            if first {
                ms.push(Tensor::zeros(p.value.shape().to_vec()));
                vs.push(Tensor::zeros(p.value.shape().to_vec()));
            }
            if idx >= ms.len() || ms[idx].shape() != p.value.shape() {
                result = Err(Error::contract(format!(
                    "optimizer state does not match parameter {name}"
                )));
                return;
            }
            let (m, v) = (ms[idx].data_mut(), vs[idx].data_mut());
            for (((w, &gr), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gc = gr * sclip;
                *mi = sb1 * *mi + (S::one() - sb1) * gc;
                *vi = sb2 * *vi + (S::one() - sb2) * gc * gc;
                let mhat = *mi / sbc1;
                let vhat = *vi / sbc2;
                *w = *w * sdecay - slr * mhat / (vhat.sqrt() + seps);
            }
            idx += 1;
        });
        result?;
        Ok(StepStats {
            grad_norm,
            clip_scale,
        })
    }
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, warmup_ratio: f64, total_steps: u64) -> Self {
        let warmup_steps = (warmup_ratio * total_steps as f64).ceil() as u64;
        CosineSchedule {
            base_lr,
            warmup_steps,
            total_steps: total_steps.max(1),
        }
    }

    /// Learning rate for the zero-based `step`.
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Param;

    struct One(Param<f64>);

    impl ParamVisitor<f64> for One {
        fn visit_params(&self, f: &mut dyn FnMut(&str, &Param<f64>)) {
            f("w", &self.0)
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            f("w", &mut self.0)
        }
    }

    fn one(w: f64, g: Option<f64>) -> One {
        let mut p = Param::new(Tensor::new(vec![1], vec![w]).unwrap());
        p.grad = g.map(|g| Tensor::new(vec![1], vec![g]).unwrap());
        One(p)
    }

    #[test]
    fn decay_only_when_gradient_is_zero() {
        let mut m = one(2.0, Some(0.0));
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.01,
            grad_clip_norm: None,
            ..Default::default()
        });
        opt.step(&mut m, 0.1).unwrap();
        assert!((m.0.value.data()[0] - 2.0 * (1.0 - 0.001)).abs() < 1e-15);
        assert!(m.0.grad.is_none());
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let (w, g, lr, eps) = (0.5, -3.0, 0.01, 1e-8);
        let mut m = one(w, Some(g));
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            eps,
            grad_clip_norm: None,
            ..Default::default()
        });
        opt.step(&mut m, lr).unwrap();
        let want = w - lr * g / (g.abs() + eps);
        assert!((m.0.value.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn clipping_scales_gradients_before_moments() {
        let mut m = one(0.0, Some(10.0));
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            grad_clip_norm: Some(1.0),
            ..Default::default()
        });
        let stats = opt.step(&mut m, 0.1).unwrap();
        assert_eq!(stats.grad_norm, 10.0);
        assert!((stats.clip_scale - 0.1).abs() < 1e-15);
        // First moment holds (1 - beta1) * clipped gradient.
        assert!((opt.m[0].data()[0] - 0.1 * 1.0).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut m = one(1.0, None);
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(matches!(opt.step(&mut m, 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = CosineSchedule::new(1.0, 0.04, 100);
        assert_eq!(s.warmup_steps, 4);
        assert!((s.lr(0) - 0.25).abs() < 1e-12);
        assert!((s.lr(3) - 1.0).abs() < 1e-12);
        assert!((s.lr(4) - 1.0).abs() < 1e-12);
        assert!(s.lr(50) < 1.0 && s.lr(50) > s.lr(90));
        assert!(s.lr(100) < 1e-12);
    }
}
