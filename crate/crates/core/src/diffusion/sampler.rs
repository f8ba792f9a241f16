use rand::Rng;
use rand_distr::StandardNormal;

use super::schedule::NoiseSchedule;
use crate::cdit::{LatentState, Model, ModelInput, Prediction};
use crate::conditioning::Condition;
use crate::error::{Error, Result};

/// Standard normal noise as `f32`.
pub fn gaussian<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f32> {
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect()
}

/// Clean-target estimate from a network output at step `t`.
fn predicted_x0(prediction: Prediction, out: &[f32], x_t: &[f32], alpha_bar: f64) -> Vec<f32> {
    match prediction {
        Prediction::X => out.to_vec(),
        Prediction::Eps => {
            let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
            x_t.iter().zip(out).map(|(&x, &e)| ((x as f64 - b * e as f64) / a) as f32).collect()
        }
    }
}

/// Ancestral sampling over `num_steps` respaced steps, starting from pure
/// noise. `context` is `[B, m*n, d_latent]` flattened; one row per condition.
/// Each step replaces the model's clean-target estimate into the posterior
/// mean of the previous respaced step; the last step returns the estimate.
pub fn sample<R: Rng + ?Sized>(
    model: &Model,
    schedule: &NoiseSchedule,
    context: &[f32],
    conds: &[Condition],
    num_steps: usize,
    rng: &mut R,
) -> Result<Vec<LatentState>> {
    let cfg = &model.config;
    if schedule.steps() != cfg.diffusion_steps {
        return Err(Error::invalid("schedule length differs from the model's diffusion steps"));
    }
    let ts = schedule.respaced(num_steps)?;
    let (b, n, dl) = (conds.len(), cfg.tokens(), cfg.latent_dim());
    if context.len() != b * cfg.context * n * dl {
        return Err(Error::shape("sample", format!("context of {} values for {b} rows", context.len())));
    }
    let len = b * n * dl;
    let mut x = gaussian(len, rng);
    for (i, &t) in ts.iter().enumerate() {
        let input = ModelInput { noisy: x.clone(), context: context.to_vec(), conds: conds.to_vec(), ts: vec![t; b] };
        let out: Vec<f32> = model.predict(&input)?.into_iter().flat_map(|l| l.data).collect();
        let ab = schedule.alpha_bars[t];
        let x0 = predicted_x0(cfg.prediction, &out, &x, ab);
        match ts.get(i + 1) {
            None => x = x0,
            Some(&tp) => {
                let abp = schedule.alpha_bars[tp];
                let beta = 1.0 - ab / abp;
                let c0 = abp.sqrt() * beta / (1.0 - ab);
                let ct = (1.0 - beta).sqrt() * (1.0 - abp) / (1.0 - ab);
                let sd = (beta * (1.0 - abp) / (1.0 - ab)).sqrt();
                let z = gaussian(len, rng);
                x = (0..len).map(|j| (c0 * x0[j] as f64 + ct * x[j] as f64 + sd * z[j] as f64) as f32).collect();
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "sample" });
        }
    }
    x.chunks(n * dl).map(|c| LatentState::new(n, dl, c.to_vec())).collect()
}
