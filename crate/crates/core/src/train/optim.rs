//! Learning-rate schedule and the AdamW update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            warmup_ratio: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return Err(Error::Config(format!(
                "warmup ratio must lie strictly between 0 and 1, got {}",
                self.warmup_ratio
            )));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self, total: usize) -> usize {
        (self.warmup_ratio * total as f64).ceil() as usize
    }
}

/// Linear ramp from 0 to the peak over the warmup steps, then linear decay
/// to 0 at `total`.
pub fn lr_schedule(step: usize, total: usize, cfg: &OptimConfig) -> Result<f64> {
    if step > total {
        return Err(Error::Contract(format!(
            "schedule step {step} beyond total {total}"
        )));
    }
    let warmup = cfg.warmup_steps(total);
    Ok(if step < warmup {
        cfg.lr * step as f64 / warmup as f64
    } else if total == warmup {
        cfg.lr
    } else {
        cfg.lr * (total - step) as f64 / (total - warmup) as f64
    })
}

/// Per-parameter first and second moments plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: OptimConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: OptimConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        AdamW {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update from the gradients held in `store`. Frozen rows are left
    /// untouched. A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for (_, p) in store.iter() {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in parameter `{}`",
                    p.name
                )));
            }
        }
        self.step += 1;
        let OptimConfig {
            beta1: b1,
            beta2: b2,
            eps,
            weight_decay: wd,
            ..
        } = self.cfg;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let cols = if p.value.ndim() == 2 { p.value.cols() } else { p.value.len() };
            let frozen = &p.frozen_rows;
            let value = p.value.data_mut();
            for (i, ((theta, &g), (m, v))) in value
                .iter_mut()
                .zip(&p.grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
                .enumerate()
            {
                if !frozen.is_empty() && frozen.contains(&(i / cols)) {
                    continue;
                }
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *theta -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *theta);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_examples() {
        let cfg = OptimConfig::default();
        assert_eq!(lr_schedule(0, 100, &cfg).unwrap(), 0.0);
        assert_eq!(lr_schedule(10, 100, &cfg).unwrap(), 1e-3);
        let lr = lr_schedule(55, 100, &cfg).unwrap();
        assert!((lr - 1e-3 * 45.0 / 90.0).abs() < 1e-12 && (lr - 5e-4).abs() < 1e-12);
        assert_eq!(lr_schedule(100, 100, &cfg).unwrap(), 0.0);
        assert!(matches!(lr_schedule(101, 100, &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn schedule_peaks_exactly_at_warmup_boundary() {
        let cfg = OptimConfig::default();
        for total in [1, 7, 50, 333] {
            let lrs: Vec<f64> = (0..=total).map(|s| lr_schedule(s, total, &cfg).unwrap()).collect();
            let max = lrs.iter().copied().fold(0.0, f64::max);
            assert_eq!(max, cfg.lr);
            assert_eq!(lrs[cfg.warmup_steps(total)], cfg.lr);
        }
    }

    fn scalar_store(theta: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.insert("theta", Tensor::vector(vec![theta])).unwrap();
        s.get_mut(id).grad[0] = grad;
        s
    }

    #[test]
    fn single_step_matches_hand_arithmetic() {
        let mut s = scalar_store(1.0, 1.0);
        let mut opt = AdamW::new(&s, OptimConfig::default());
        opt.step(&mut s, 0.1).unwrap();
        let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8)) - 0.1 * 0.01 * 1.0;
        assert!((s.by_name("theta").unwrap().value.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn two_steps_follow_the_moment_recursion() {
        let (g, lr) = (0.3, 0.05);
        let cfg = OptimConfig::default();
        let mut s = scalar_store(0.7, g);
        let mut opt = AdamW::new(&s, cfg);
        opt.step(&mut s, lr).unwrap();
        opt.step(&mut s, lr).unwrap();

        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let m1 = (1.0 - b1) * g;
        let v1 = (1.0 - b2) * g * g;
        let m2 = b1 * m1 + (1.0 - b1) * g;
        let v2 = b2 * v1 + (1.0 - b2) * g * g;
        assert!((opt.m[0][0] - m2).abs() < 1e-15 && (opt.v[0][0] - v2).abs() < 1e-15);
        let mut theta = 0.7;
        for (t, m, v) in [(1, m1, v1), (2, m2, v2)] {
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * theta);
        }
        assert!((s.by_name("theta").unwrap().value.data()[0] - theta).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_reduces_to_decay_and_zero_decay_to_adam() {
        let mut s = scalar_store(2.0, 0.0);
        let mut opt = AdamW::new(&s, OptimConfig::default());
        opt.step(&mut s, 0.1).unwrap();
        assert!((s.by_name("theta").unwrap().value.data()[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);

        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut s = scalar_store(1.0, 0.0);
        let mut opt = AdamW::new(&s, cfg);
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.by_name("theta").unwrap().value.data()[0], 1.0);
    }

    #[test]
    fn frozen_rows_and_nan_guard() {
        let mut s = ParamStore::new();
        let id = s.insert("emb", Tensor::from_rows(&[&[0.0, 0.0], &[1.0, 1.0]])).unwrap();
        s.freeze_row(id, 0);
        s.get_mut(id).grad.copy_from_slice(&[1.0, 1.0, 1.0, 1.0]);
        let mut opt = AdamW::new(&s, OptimConfig::default());
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.value(id).row(0), &[0.0, 0.0]);
        assert!(s.value(id).row(1)[0] < 1.0);

        s.get_mut(id).grad[3] = f64::NAN;
        let before = s.value(id).clone();
        let err = opt.step(&mut s, 0.1).unwrap_err();
        assert!(matches!(&err, Error::Numerical(m) if m.contains("emb")));
        assert_eq!(s.value(id), &before);
    }
}
