use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adam with decoupled weight decay and a constant learning rate.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore<f32>) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamW { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update; `grads` are in store order.
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &[Vec<f32>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::invalid("gradient count does not match parameters"));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((t, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if g.len() != t.numel() {
                return Err(Error::invalid("gradient size does not match parameter"));
            }
            for (((p, &g), m), v) in t.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g as f64;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let upd = (*m / bc1) / ((*v / bc2).sqrt() + c.eps) + c.weight_decay * *p as f64;
                *p = (*p as f64 - c.lr * upd) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = ParamStore::<f32>::new();
        p.insert("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap()).unwrap();
        let cfg = AdamWConfig { weight_decay: 0.0, lr: 0.1, ..Default::default() };
        let mut opt = AdamW::new(cfg, &p);
        opt.update(&mut p, &[vec![0.5, -2.0]]).unwrap();
        let d = p.get("w").unwrap().data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = ParamStore::<f32>::new();
        p.insert("w", Tensor::new(&[1], vec![2.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() }, &p);
        opt.update(&mut p, &[vec![0.0]]).unwrap();
        assert!((p.get("w").unwrap().data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = ParamStore::<f32>::new();
        p.insert("w", Tensor::new(&[3], vec![3.0, -2.0, 0.5]).unwrap()).unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.05, weight_decay: 0.0, ..Default::default() }, &p);
        for _ in 0..500 {
            let g: Vec<f32> = p.get("w").unwrap().data().iter().map(|w| 2.0 * w).collect();
            opt.update(&mut p, &[g]).unwrap();
        }
        assert!(p.get("w").unwrap().data().iter().all(|w| w.abs() < 1e-2));
    }
}
