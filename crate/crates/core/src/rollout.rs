//! Autoregressive rollouts: each step samples the next latent state from a
//! sliding window of the last `m` states, real or predicted.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::cdit::{decode, stack_context, LatentState, Model};
use crate::conditioning::Condition;
use crate::diffusion::{sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::evalkit::{mean_std, psnr};
use crate::planner::PerceptualScorer;
use crate::rng;
use crate::world::{Frame, NavAction};

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub actions: Vec<NavAction>,
    pub states: Vec<LatentState>,
    /// Seed of the sampler stream used at each step.
    pub seeds: Vec<u64>,
}

impl Trajectory {
    /// Decoded frames clamped to `[0, 1]`.
    pub fn frames(&self, model: &Model) -> Result<Vec<Frame>> {
        self.states.iter().map(|s| Ok(decode(s, &model.config)?.clamped())).collect()
    }
}

/// Step seed for step `i` of a rollout seeded with `seed`.
pub fn step_seed(seed: u64, i: usize) -> u64 {
    rng::indexed(seed, i as u64)
}

pub fn rollout(model: &Model, schedule: &NoiseSchedule, context: &[LatentState], actions: &[NavAction], num_steps: usize, seed: u64) -> Result<Trajectory> {
    rollout_with_hook(model, schedule, context, actions, num_steps, seed, |_, _| {})
}

/// Like [`rollout`], calling `hook(i, window)` with the states that condition
/// step `i` (oldest first, before padding).
pub fn rollout_with_hook(
    model: &Model,
    schedule: &NoiseSchedule,
    context: &[LatentState],
    actions: &[NavAction],
    num_steps: usize,
    seed: u64,
    mut hook: impl FnMut(usize, &[LatentState]),
) -> Result<Trajectory> {
    if context.is_empty() || actions.is_empty() {
        return Err(Error::invalid("rollout needs a non-empty context and action sequence"));
    }
    let m = model.config.context;
    let mut history: Vec<LatentState> = context[context.len().saturating_sub(m)..].to_vec();
    let start = history.len();
    let mut seeds = Vec::with_capacity(actions.len());
    for (i, a) in actions.iter().enumerate() {
        let window = &history[history.len().saturating_sub(m)..];
        hook(i, window);
        let ctx = stack_context(window, &model.config)?;
        let s = step_seed(seed, i);
        let mut r = rng::from_seed(s);
        let next = sample(model, schedule, &ctx, &[Condition::from_action(a)], num_steps, &mut r)?.pop().expect("one row");
        seeds.push(s);
        history.push(next);
    }
    Ok(Trajectory { actions: actions.to_vec(), states: history.split_off(start), seeds })
}

/// Independent rollouts evaluated in parallel; identical to calling
/// [`rollout`] on each.
pub fn rollout_many(
    model: &Model,
    schedule: &NoiseSchedule,
    jobs: &[(Vec<LatentState>, Vec<NavAction>, u64)],
    num_steps: usize,
) -> Result<Vec<Trajectory>> {
    jobs.par_iter().map(|(ctx, acts, seed)| rollout(model, schedule, ctx, acts, num_steps, *seed)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonRow {
    pub horizon: f64,
    pub step: usize,
    pub psnr: f64,
    pub feature_distance: f64,
}

/// Metrics at each horizon (seconds). `predicted[i]` and `truth[i]` are the
/// frames `i + 1` steps after the context at `fps`.
pub fn evaluate_prediction(predicted: &[Frame], truth: &[Frame], horizons: &[f64], fps: f64, scorer: &PerceptualScorer) -> Result<Vec<HorizonRow>> {
    horizons
        .iter()
        .map(|&h| {
            let steps = (h * fps).round();
            if !(steps >= 1.0) {
                return Err(Error::invalid(format!("horizon {h}s is shorter than one step")));
            }
            let i = steps as usize - 1;
            if i >= predicted.len() || i >= truth.len() {
                return Err(Error::invalid(format!("horizon {h}s needs {} frames, have {}", i + 1, predicted.len().min(truth.len()))));
            }
            let (p, t) = (&predicted[i], &truth[i]);
            if !p.same_dims(t) {
                return Err(Error::shape("evaluate_prediction", "frame dimensions differ"));
            }
            let fd = scorer.feature_distance(&scorer.features(p)?, &scorer.features(t)?)?;
            Ok(HorizonRow { horizon: h, step: i + 1, psnr: psnr(&p.data, &t.data, 1.0)?, feature_distance: fd })
        })
        .collect()
}

/// Per-horizon mean and population std over episodes.
pub fn summarize_horizons(per_episode: &[Vec<HorizonRow>]) -> Result<Vec<(f64, (f64, f64), (f64, f64))>> {
    let first = per_episode.first().ok_or_else(|| Error::invalid("no episodes to summarize"))?;
    (0..first.len())
        .map(|j| {
            let p: Vec<f64> = per_episode.iter().map(|rows| rows[j].psnr).collect();
            let f: Vec<f64> = per_episode.iter().map(|rows| rows[j].feature_distance).collect();
            Ok((first[j].horizon, mean_std(&p)?, mean_std(&f)?))
        })
        .collect()
}

/// `horizon_s,step,psnr,feature_distance`
pub fn horizon_csv(rows: &[HorizonRow], config_hash: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(h) = config_hash {
        writeln!(out, "# config_hash: {h}").unwrap();
    }
    out.push_str("horizon_s,step,psnr,feature_distance\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.horizon, r.step, r.psnr, r.feature_distance).unwrap();
    }
    out
}
