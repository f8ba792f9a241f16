use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{Error, Result};

/// Linear-beta schedule scaled by `1000 / T` so that short schedules still
/// end near pure noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        let scale = 1000.0 / steps as f64;
        let (lo, hi) = (1e-4 * scale, 0.02 * scale);
        let betas: Vec<f64> = (0..steps)
            .map(|i| if steps == 1 { lo } else { lo + (hi - lo) * i as f64 / (steps - 1) as f64 })
            .map(|b: f64| b.min(0.999))
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule { betas, alphas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("diffusion step {t} outside [0, {})", self.steps())))
    }

    /// `sqrt(abar_t) * s + sqrt(1 - abar_t) * eps`, elementwise.
    pub fn add_noise<E: Real>(&self, s: &[E], t: usize, eps: &[E]) -> Result<Vec<E>> {
        add_noise_with(self.alpha_bar(t)?, s, eps)
    }

    /// Descending timesteps for `num_steps` respaced steps, from `T - 1` to 0.
    pub fn respaced(&self, num_steps: usize) -> Result<Vec<usize>> {
        let t = self.steps();
        if num_steps == 0 || num_steps > t {
            return Err(Error::invalid(format!("num_steps must be in [1, {t}], got {num_steps}")));
        }
        if num_steps == 1 {
            return Ok(vec![t - 1]);
        }
        Ok((0..num_steps).rev().map(|j| (t - 1) * j / (num_steps - 1)).collect())
    }
}

/// Forward-process marginal for an explicit `alpha_bar`.
pub fn add_noise_with<E: Real>(alpha_bar: f64, s: &[E], eps: &[E]) -> Result<Vec<E>> {
    if s.len() != eps.len() {
        return Err(Error::shape("add_noise", format!("{} values vs {} noise values", s.len(), eps.len())));
    }
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::invalid(format!("alpha_bar {alpha_bar} outside [0, 1]")));
    }
    let a = E::from_f64_lossy(alpha_bar.sqrt());
    let b = E::from_f64_lossy((1.0 - alpha_bar).sqrt());
    Ok(s.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
}
