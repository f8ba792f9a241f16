use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::goals::{sample_goals, ShiftRange};
use super::optim::{AdamW, AdamWConfig};
use super::sampler::{gaussian, sample};
use super::schedule::NoiseSchedule;
use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::cdit::{encode, forward, stack_context, LatentState, Model, ModelConfig, ModelInput, Prediction};
use crate::conditioning::Condition;
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::rng;
use crate::world::{Dataset, NavAction};

/// An episode in latent space with its per-step actions.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentEpisode {
    pub id: usize,
    pub frames: Vec<LatentState>,
    pub actions: Vec<NavAction>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingData {
    pub episodes: Vec<LatentEpisode>,
}

impl TrainingData {
    pub fn from_dataset(ds: &Dataset, config: &ModelConfig) -> Result<Self> {
        let actions = ds.actions()?;
        let episodes = ds
            .episodes
            .iter()
            .zip(actions)
            .map(|(ep, actions)| {
                let frames = ep.frames.iter().map(|f| encode(f, config)).collect::<Result<Vec<_>>>()?;
                Ok(LatentEpisode { id: ep.id, frames, actions })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingData { episodes })
    }

    /// Moves the last `ceil(fraction * len)` episodes into a held-out set.
    pub fn split(mut self, fraction: f64) -> (TrainingData, TrainingData) {
        let n = self.episodes.len();
        let held = ((fraction * n as f64).ceil() as usize).min(n.saturating_sub(1));
        let val = self.episodes.split_off(n - held);
        (self, TrainingData { episodes: val })
    }

    /// Up to `m` frames ending at `tau` (oldest first).
    pub fn context(&self, episode: usize, tau: usize, m: usize) -> &[LatentState] {
        let f = &self.episodes[episode].frames;
        &f[(tau + 1).saturating_sub(m)..=tau]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Source states per batch; each contributes `goals` rows.
    pub sources_per_batch: usize,
    pub goals: usize,
    pub max_shift: usize,
    pub allow_backward: bool,
    pub optimizer: AdamWConfig,
    pub eval_every: usize,
    pub val_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            sources_per_batch: 2,
            goals: 4,
            max_shift: 4,
            allow_backward: false,
            optimizer: AdamWConfig::default(),
            eval_every: 250,
            val_samples: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn shifts(&self) -> ShiftRange {
        ShiftRange { max_steps: self.max_shift, allow_backward: self.allow_backward }
    }
}

/// `B = sources * goals` rows; rows of one source share their context.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub context: Vec<f32>,
    pub targets: Vec<f32>,
    pub conds: Vec<Condition>,
    pub goals: usize,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.conds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conds.is_empty()
    }
}

/// `(episode, tau)` pairs with at least `goals` valid shifts.
pub fn source_positions(data: &TrainingData, goals: usize, range: &ShiftRange) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (e, ep) in data.episodes.iter().enumerate() {
        for tau in 0..ep.frames.len() {
            if range.candidates(tau, ep.frames.len()).len() >= goals {
                out.push((e, tau));
            }
        }
    }
    out
}

pub fn build_batch<R: Rng + ?Sized>(
    data: &TrainingData,
    positions: &[(usize, usize)],
    config: &ModelConfig,
    tc: &TrainConfig,
    rng: &mut R,
) -> Result<TrainBatch> {
    if positions.is_empty() {
        return Err(Error::invalid("no episode is long enough for the requested goals"));
    }
    let mut batch = TrainBatch { context: Vec::new(), targets: Vec::new(), conds: Vec::new(), goals: tc.goals };
    for _ in 0..tc.sources_per_batch {
        let (e, tau) = positions[rng.random_range(0..positions.len())];
        let ep = &data.episodes[e];
        let ctx = stack_context(data.context(e, tau, config.context), config)?;
        for goal in sample_goals(&ep.actions, tau, tc.goals, &tc.shifts(), rng)? {
            batch.context.extend_from_slice(&ctx);
            batch.targets.extend_from_slice(&ep.frames[goal.target].data);
            batch.conds.push(Condition::from_action(&goal.action));
        }
    }
    Ok(batch)
}

/// Noised targets and the regression target for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedBatch {
    pub noisy: Vec<f32>,
    pub ts: Vec<usize>,
    pub regress: Vec<f32>,
}

/// Draws `t` uniformly per row and Gaussian noise per element.
pub fn noise_batch<R: Rng + ?Sized>(batch: &TrainBatch, schedule: &NoiseSchedule, prediction: Prediction, rng: &mut R) -> Result<NoisedBatch> {
    let b = batch.len();
    let row = batch.targets.len() / b.max(1);
    let ts: Vec<usize> = (0..b).map(|_| rng.random_range(0..schedule.steps())).collect();
    let eps = gaussian(batch.targets.len(), rng);
    let mut noisy = Vec::with_capacity(batch.targets.len());
    for (i, &t) in ts.iter().enumerate() {
        noisy.extend(schedule.add_noise(&batch.targets[i * row..(i + 1) * row], t, &eps[i * row..(i + 1) * row])?);
    }
    let regress = match prediction {
        Prediction::X => batch.targets.clone(),
        Prediction::Eps => eps,
    };
    Ok(NoisedBatch { noisy, ts, regress })
}

/// Mean squared error (averaged over all token values) between the model
/// output and the regression target.
pub fn training_loss<'t, E: Real, R: Rng + ?Sized>(
    config: &ModelConfig,
    params: &Bound<'t, E>,
    tape: &'t Tape<E>,
    batch: &TrainBatch,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Var<'t, E>> {
    let nb = noise_batch(batch, schedule, config.prediction, rng)?;
    let input = ModelInput { noisy: nb.noisy, context: batch.context.clone(), conds: batch.conds.clone(), ts: nb.ts };
    let (noisy, ctx) = input.record(config, tape)?;
    let out = forward(config, params, tape, &noisy, &ctx, &input.conds, &input.ts)?;
    let target = tape.constant(Tensor::new(out.value().shape(), nb.regress.iter().map(|&v| E::from_f64_lossy(v as f64)).collect())?)?;
    out.mse(&target)
}

/// Held-out next-frame pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSet {
    pub context: Vec<f32>,
    pub targets: Vec<f32>,
    pub last_frames: Vec<f32>,
    pub conds: Vec<Condition>,
}

impl ValidationSet {
    /// Up to `max_samples` evenly spaced `(episode, tau)` positions, each
    /// paired with the following frame and its one-step action.
    pub fn build(data: &TrainingData, config: &ModelConfig, max_samples: usize) -> Result<Self> {
        let pos: Vec<(usize, usize)> = data
            .episodes
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.frames.len().saturating_sub(1)).map(move |t| (e, t)))
            .collect();
        let take = max_samples.min(pos.len());
        let mut set = ValidationSet { context: Vec::new(), targets: Vec::new(), last_frames: Vec::new(), conds: Vec::new() };
        for i in 0..take {
            let (e, tau) = pos[i * pos.len() / take];
            let ep = &data.episodes[e];
            set.context.extend(stack_context(data.context(e, tau, config.context), config)?);
            set.targets.extend_from_slice(&ep.frames[tau + 1].data);
            set.last_frames.extend_from_slice(&ep.frames[tau].data);
            set.conds.push(Condition::from_action(&ep.actions[tau]));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.conds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conds.is_empty()
    }
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

/// One-step x-MSE of single-step samples and of copying the last context
/// frame. Noise comes from a fixed stream so repeated calls are comparable.
pub fn validate(model: &Model, schedule: &NoiseSchedule, set: &ValidationSet, seed: u64) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    let cfg = &model.config;
    let ctx_row = cfg.context * cfg.tokens() * cfg.latent_dim();
    let mut r = rng::stream(seed, "validation");
    let mut preds = Vec::with_capacity(set.targets.len());
    for start in (0..set.len()).step_by(16) {
        let end = (start + 16).min(set.len());
        let out = sample(model, schedule, &set.context[start * ctx_row..end * ctx_row], &set.conds[start..end], 1, &mut r)?;
        preds.extend(out.into_iter().flat_map(|l| l.data));
    }
    Ok((mse(&preds, &set.targets), mse(&set.last_frames, &set.targets)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    pub val_mse: Option<f64>,
    pub baseline_mse: Option<f64>,
}

/// Trains in place. Row `s` holds the loss of the batch at step `s`; its
/// validation fields (when present) are measured after that step's update.
pub fn train(
    model: &mut Model,
    train_data: &TrainingData,
    val_data: &TrainingData,
    tc: &TrainConfig,
    mut on_row: impl FnMut(&LossRow),
) -> Result<Vec<LossRow>> {
    let cfg = model.config;
    let schedule = NoiseSchedule::linear(cfg.diffusion_steps)?;
    let positions = source_positions(train_data, tc.goals, &tc.shifts());
    let val = if val_data.episodes.is_empty() { None } else { Some(ValidationSet::build(val_data, &cfg, tc.val_samples)?) };
    let mut opt = AdamW::new(tc.optimizer, &model.params);
    let mut batch_rng = rng::stream(tc.seed, "batches");
    let mut noise_rng = rng::stream(tc.seed, "noise");
    let mut rows = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let batch = build_batch(train_data, &positions, &cfg, tc, &mut batch_rng)?;
        let diverged = |e| match e {
            Error::NonFinite { op } => Error::Diverged { step, detail: format!("non-finite value in {op}") },
            e => e,
        };
        let tape = Tape::<f32>::new();
        let bound = model.params.bind(&tape).map_err(diverged)?;
        let loss = training_loss(&cfg, &bound, &tape, &batch, &schedule, &mut noise_rng).map_err(diverged)?;
        let value = loss.item() as f64;
        if !value.is_finite() {
            return Err(Error::Diverged { step, detail: format!("loss {value}") });
        }
        let mut grads = tape.backward(&loss).map_err(diverged)?;
        let g = bound.collect_grads(&mut grads);
        drop(bound);
        drop(tape);
        if g.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step, detail: "non-finite gradient".into() });
        }
        opt.update(&mut model.params, &g)?;
        let mut row = LossRow { step, loss: value, val_mse: None, baseline_mse: None };
        let due = tc.eval_every > 0 && ((step + 1) % tc.eval_every == 0 || step + 1 == tc.steps);
        if let (true, Some(v)) = (due, &val) {
            let (m, b) = validate(model, &schedule, v, tc.seed)?;
            row.val_mse = Some(m);
            row.baseline_mse = Some(b);
        }
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// `step,loss,val_mse,baseline_mse` with blank validation fields on rows
/// without an evaluation. An optional `# config_hash:` line goes first.
pub fn loss_csv(rows: &[LossRow], config_hash: Option<&str>) -> String {
    let mut out = Vec::new();
    if let Some(h) = config_hash {
        writeln!(out, "# config_hash: {h}").unwrap();
    }
    writeln!(out, "step,loss,val_mse,baseline_mse").unwrap();
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
    for r in rows {
        writeln!(out, "{},{:.9e},{},{}", r.step, r.loss, opt(r.val_mse), opt(r.baseline_mse)).unwrap();
    }
    String::from_utf8(out).expect("ascii")
}

pub fn write_loss_csv(path: &Path, rows: &[LossRow], config_hash: Option<&str>) -> Result<()> {
    crate::world::write_file_atomic(path, loss_csv(rows, config_hash).as_bytes())
}
