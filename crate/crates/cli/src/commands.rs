use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, ensure, Context};
use serde::{Deserialize, Serialize};

use nwm::autodiff::Tape;
use nwm::cdit::{count_flops, encode, forward, load_checkpoint, polyfit_r2, save_checkpoint, LatentState, Model, ModelConfig, ModelInput, Variant};
use nwm::conditioning::Condition;
use nwm::diffusion::{gaussian, train as train_model, validate, write_loss_csv, LossRow, NoiseSchedule, TrainingData, ValidationSet};
use nwm::evalkit::{ate, build_eval_set, mean_std, rpe, MetricSeries, Report, TrajectoryPair};
use nwm::params::ParamStore;
use nwm::planner::{cem_plan, empty_room_trial, expand_endpoint, rank_trajectories, ranking_trial, Constraint, EnergySpec, ModelSim, OracleSim, PerceptualScorer, Simulator};
use nwm::rng;
use nwm::rollout::{evaluate_prediction, horizon_csv, rollout, rollout_many, HorizonRow};
use nwm::world::{generate_dataset, generate_map, write_file_atomic, Dataset, Frame, NavAction, Pose, Resolution};

use crate::config::{RunConfig, CONFIG_FILE};

pub const CHECKPOINT_FILE: &str = "checkpoint.nwm";

/// Checkpoint header: the model config plus the hash of the run that
/// produced the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub config_hash: String,
}

/// Creates `dir` and writes the resolved config into it; returns its hash.
fn write_config(cfg: &RunConfig, dir: &Path) -> anyhow::Result<String> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_file_atomic(&dir.join(CONFIG_FILE), cfg.to_pretty()?.as_bytes())?;
    cfg.hash()
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    Ok(write_file_atomic(path, text.as_bytes())?)
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> anyhow::Result<Dataset> {
    let hash = cfg.hash()?;
    let ds = generate_dataset(cfg.data.episodes, cfg.stream("data"), &cfg.map_seeds(), &cfg.data.episode_params(), out, Some(hash))?;
    write_config(cfg, out)?;
    Ok(ds)
}

fn load_dataset(cfg: &RunConfig, dir: &Path) -> anyhow::Result<Dataset> {
    let ds = Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    let m = &ds.manifest;
    ensure!(
        (m.height, m.width, m.channels) == (cfg.model.height, cfg.model.width, cfg.model.channels),
        "dataset frames are {}x{}x{}, model expects {}x{}x{}",
        m.height,
        m.width,
        m.channels,
        cfg.model.height,
        cfg.model.width,
        cfg.model.channels
    );
    Ok(ds)
}

pub fn load_model(path: &Path) -> anyhow::Result<(Model, String)> {
    let (header, params): (CheckpointHeader, ParamStore<f32>) = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let model = Model::from_parts(header.model, params).with_context(|| format!("checkpoint {}", path.display()))?;
    Ok((model, header.config_hash))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub rows: Vec<LossRow>,
    pub val_mse: Option<f64>,
    pub baseline_mse: Option<f64>,
}

/// Trains a fresh model on `data_dir`; writes the checkpoint, loss CSV and
/// config to `out`.
pub fn train(cfg: &RunConfig, data_dir: &Path, out: &Path, on_row: impl FnMut(&LossRow)) -> anyhow::Result<TrainSummary> {
    let ds = load_dataset(cfg, data_dir)?;
    let (tr, va) = TrainingData::from_dataset(&ds, &cfg.model)?.split(cfg.data.val_fraction);
    let mut model = Model::new(cfg.model, &mut rng::from_seed(cfg.stream("init")))?;
    let rows = train_model(&mut model, &tr, &va, &cfg.train, on_row)?;
    let hash = write_config(cfg, out)?;
    write_loss_csv(&out.join("loss.csv"), &rows, Some(&hash))?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &CheckpointHeader { model: cfg.model, config_hash: hash }, &model.params)?;
    let last = rows.iter().rev().find(|r| r.val_mse.is_some());
    Ok(TrainSummary { val_mse: last.and_then(|r| r.val_mse), baseline_mse: last.and_then(|r| r.baseline_mse), rows })
}

/// Frames needed after the context to reach the longest horizon.
fn horizon_frames(cfg: &RunConfig) -> usize {
    cfg.eval.horizons.iter().map(|h| (h * cfg.data.fps).round() as usize).max().unwrap_or(1)
}

fn context_of(ep_frames: &[Frame], model: &Model) -> anyhow::Result<Vec<LatentState>> {
    Ok(ep_frames[..model.config.context].iter().map(|f| encode(f, &model.config)).collect::<nwm::Result<Vec<_>>>()?)
}

/// Binary PPM of `rows` stacked vertically, each row a strip of frames.
fn ppm(rows: &[&[Frame]]) -> Vec<u8> {
    let (h, w) = (rows[0][0].height, rows[0][0].width);
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut out = format!("P6\n{} {}\n255\n", cols * w, rows.len() * h).into_bytes();
    for row in rows {
        for y in 0..h {
            for i in 0..cols {
                for x in 0..w {
                    let px = row.get(i).map(|f| f.pixel(y, x)).unwrap_or(&[0.0, 0.0, 0.0]);
                    for c in 0..3 {
                        let v = px[c.min(px.len() - 1)];
                        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutSummary {
    pub predicted: Vec<Frame>,
    pub truth: Vec<Frame>,
    pub rows: Vec<HorizonRow>,
}

/// Rolls the model out along episode `episode`'s recorded actions and
/// compares against its frames.
pub fn rollout_episode(cfg: &RunConfig, checkpoint: &Path, data_dir: &Path, episode: usize, out: &Path) -> anyhow::Result<RolloutSummary> {
    let (model, _) = load_model(checkpoint)?;
    let ds = load_dataset(cfg, data_dir)?;
    let idx = ds.episodes.iter().position(|e| e.id == episode).with_context(|| format!("no episode {episode} in dataset"))?;
    let ep = &ds.episodes[idx];
    let m = model.config.context;
    let steps = horizon_frames(cfg);
    ensure!(ep.len() >= m + steps, "episode {episode} has {} frames, need {}", ep.len(), m + steps);
    let actions = ep.actions(ds.average_step_size())?;
    let schedule = NoiseSchedule::linear(model.config.diffusion_steps)?;
    let seed = rng::indexed(cfg.stream("sample"), episode as u64);
    let traj = rollout(&model, &schedule, &context_of(&ep.frames, &model)?, &actions[m - 1..m - 1 + steps], cfg.eval.sample_steps, seed)?;
    let predicted = traj.frames(&model)?;
    let truth = ep.frames[m..m + steps].to_vec();
    let all: Vec<f64> = (1..=steps).map(|s| s as f64 / cfg.data.fps).collect();
    let rows = evaluate_prediction(&predicted, &truth, &all, cfg.data.fps, &PerceptualScorer::default())?;
    let hash = write_config(cfg, out)?;
    write_text(&out.join("rollout.csv"), &horizon_csv(&rows, Some(&hash)))?;
    write_file_atomic(&out.join("rollout.ppm"), &ppm(&[&truth, &predicted]))?;
    Ok(RolloutSummary { predicted, truth, rows })
}

/// Outcome of one planning trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub trial: usize,
    pub endpoint: [f64; 3],
    pub actions: Vec<NavAction>,
    pub energy: f64,
    pub population_mean_energy: f64,
    pub elite_mean_energy: f64,
    pub pose_error: f64,
    /// Error of executing the prior mean endpoint unconstrained.
    pub prior_error: f64,
    pub satisfies_constraint: bool,
    pub all_violating: bool,
    /// Poses visited by the plan and by the reference, start included.
    pub trajectory: Vec<Pose>,
    pub reference: Vec<Pose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOutput {
    pub config_hash: String,
    pub constraint: Constraint,
    pub oracle: bool,
    pub trials: Vec<PlanRecord>,
}

pub const PLAN_FILE: &str = "plan.json";

fn visited(sim: &OracleSim, actions: &[NavAction]) -> Vec<Pose> {
    let mut poses = vec![sim.start];
    for i in 0..actions.len() {
        poses.push(sim.final_pose(&actions[..=i]).0);
    }
    poses
}

fn plan_trial(cfg: &RunConfig, trial: usize, sim: &dyn Simulator, truth: &OracleSim, goal: Frame, goal_pose: &Pose, reference: &[NavAction]) -> anyhow::Result<PlanRecord> {
    let p = &cfg.planner;
    let spec = EnergySpec::new(goal, PerceptualScorer::new(3, p.lambda), p.limits, p.penalty, p.evals_per_candidate)?;
    let res = cem_plan(sim, &spec, &p.cem, rng::indexed(cfg.stream("cem"), trial as u64))?;
    let prior = expand_endpoint(p.cem.init_mean, p.cem.steps, p.cem.dt, Constraint::None)?;
    let first = &res.trace[0];
    Ok(PlanRecord {
        trial,
        endpoint: res.best.endpoint,
        energy: res.best.energy,
        population_mean_energy: first.population_mean_energy,
        elite_mean_energy: first.elite_mean_energy,
        pose_error: truth.final_pose(&res.best.actions).0.distance(goal_pose),
        prior_error: truth.final_pose(&prior).0.distance(goal_pose),
        satisfies_constraint: p.cem.constraint.satisfied_by(&res.best.actions),
        all_violating: res.all_violating,
        trajectory: visited(truth, &res.best.actions),
        reference: visited(truth, reference),
        actions: res.best.actions,
    })
}

/// Where planning trials come from.
#[derive(Debug, Clone, Copy)]
pub enum PlanMode<'a> {
    /// Empty-room trials in the ground-truth simulator.
    Oracle,
    /// Goals taken from dataset episodes, simulated by a trained model.
    Model { checkpoint: &'a Path, data: &'a Path },
}

/// Runs `cfg.planner.trials` planning trials; writes `plan.json` and
/// `plan.csv`.
pub fn plan(cfg: &RunConfig, mode: PlanMode<'_>, out: &Path) -> anyhow::Result<PlanOutput> {
    let p = &cfg.planner;
    let base = cfg.stream("plan");
    let mut trials = Vec::with_capacity(p.trials);
    match mode {
        PlanMode::Oracle => {
            for t in 0..p.trials {
                let trial = empty_room_trial(rng::indexed(base, t as u64), p.room_size, cfg.data.step_size, &p.cem)?;
                trials.push(plan_trial(cfg, t, &trial.sim, &trial.sim, trial.goal_frame.clone(), &trial.goal_pose, &trial.reference)?);
            }
        }
        PlanMode::Model { checkpoint, data } => {
            let (model, _) = load_model(checkpoint)?;
            let ds = load_dataset(cfg, data)?;
            let schedule = NoiseSchedule::linear(model.config.diffusion_steps)?;
            let m = model.config.context;
            let steps = p.cem.steps;
            let actions = ds.actions()?;
            let eligible: Vec<usize> = (0..ds.episodes.len()).filter(|&i| ds.episodes[i].len() >= m + steps).collect();
            ensure!(!eligible.is_empty(), "no episode has the {} frames a planning trial needs", m + steps);
            for t in 0..p.trials {
                let ep = &ds.episodes[eligible[t % eligible.len()]];
                let mut map = generate_map(ep.map_seed, &cfg.data.map_params());
                map.average_step_size = ds.average_step_size();
                let truth = OracleSim { map, start: ep.poses[m - 1], resolution: Resolution { height: cfg.data.height, width: cfg.data.width } };
                let sim = ModelSim { model: &model, schedule: &schedule, context: context_of(&ep.frames, &model)?, sample_steps: p.sample_steps };
                let reference = actions[eligible[t % eligible.len()]][m - 1..m - 1 + steps].to_vec();
                let goal = ep.frames[m - 1 + steps].clone();
                trials.push(plan_trial(cfg, t, &sim, &truth, goal, &ep.poses[m - 1 + steps], &reference)?);
            }
        }
    }
    let hash = write_config(cfg, out)?;
    let output = PlanOutput { config_hash: hash.clone(), constraint: p.cem.constraint, oracle: matches!(mode, PlanMode::Oracle), trials };
    write_text(&out.join(PLAN_FILE), &(serde_json::to_string_pretty(&output)? + "\n"))?;
    let mut csv = format!("# config_hash: {hash}\ntrial,pose_error,prior_error,energy,population_mean_energy,elite_mean_energy,satisfies_constraint\n");
    for r in &output.trials {
        writeln!(csv, "{},{},{},{},{},{},{}", r.trial, r.pose_error, r.prior_error, r.energy, r.population_mean_energy, r.elite_mean_energy, r.satisfies_constraint).unwrap();
    }
    write_text(&out.join("plan.csv"), &csv)?;
    Ok(output)
}

pub fn read_plan(dir: &Path) -> anyhow::Result<PlanOutput> {
    let path = dir.join(PLAN_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub trial: usize,
    pub pool: usize,
    pub best_index: usize,
    /// Final-position error of the lowest-energy candidate.
    pub best_error: f64,
    /// Final-position error of candidate 0, an arbitrary pick.
    pub random_error: f64,
}

/// Ranks `pool` noisy expert proposals per trial with the ground-truth
/// simulator; writes `rank_<pool>.csv`.
pub fn rank(cfg: &RunConfig, pool: usize, out: &Path) -> anyhow::Result<Vec<RankRecord>> {
    ensure!(pool >= 1, "pool must be at least 1");
    let p = &cfg.planner;
    let base = cfg.stream("rank");
    let mut records = Vec::with_capacity(p.trials);
    for t in 0..p.trials {
        let seed = rng::indexed(base, t as u64);
        let (trial, candidates) = ranking_trial(seed, p.room_size, cfg.data.step_size, p.cem.steps, p.cem.dt, p.rank_noise, pool)?;
        let spec = EnergySpec::new(trial.goal_frame.clone(), PerceptualScorer::new(3, p.lambda), p.limits, p.penalty, p.evals_per_candidate)?;
        let ranked = rank_trajectories(&trial.sim, &spec, &candidates, seed)?;
        let best = ranked[0].index;
        records.push(RankRecord {
            trial: t,
            pool,
            best_index: best,
            best_error: trial.pose_error(&candidates[best]),
            random_error: trial.pose_error(&candidates[0]),
        });
    }
    let hash = write_config(cfg, out)?;
    let mut csv = format!("# config_hash: {hash}\ntrial,pool,best_index,best_error,random_error\n");
    for r in &records {
        writeln!(csv, "{},{},{},{},{}", r.trial, r.pool, r.best_index, r.best_error, r.random_error).unwrap();
    }
    write_text(&out.join(format!("rank_{pool}.csv")), &csv)?;
    Ok(records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub episodes: Vec<usize>,
    pub per_episode: Vec<Vec<HorizonRow>>,
    pub val_mse: f64,
    pub baseline_mse: f64,
    pub report: Report,
}

impl EvalSummary {
    /// Mean PSNR at `horizon` seconds.
    pub fn mean_psnr(&self, horizon: f64) -> Option<f64> {
        let j = self.per_episode.first()?.iter().position(|r| r.horizon == horizon)?;
        let v: Vec<f64> = self.per_episode.iter().map(|rows| rows[j].psnr).collect();
        mean_std(&v).ok().map(|(m, _)| m)
    }
}

/// Rollout metrics per horizon over the evaluation set of `data_dir`, the
/// one-step validation error against copying the last frame, and trajectory
/// errors of a plan when `plan_dir` is given. Writes `eval.csv`,
/// `horizons.csv` and SVG charts.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, data_dir: &Path, plan_dir: Option<&Path>, out: &Path) -> anyhow::Result<EvalSummary> {
    let (model, _) = load_model(checkpoint)?;
    let ds = load_dataset(cfg, data_dir)?;
    let m = model.config.context;
    let steps = horizon_frames(cfg);
    let pool: Vec<(usize, &[Pose])> = ds.episodes.iter().filter(|e| e.len() >= m + steps).map(|e| (e.id, e.poses.as_slice())).collect();
    ensure!(!pool.is_empty(), "no episode has the {} frames the horizons need", m + steps);
    let ids = build_eval_set(&pool, cfg.eval.episodes.min(pool.len()))?;
    let actions = ds.actions()?;
    let index_of = |id: usize| ds.episodes.iter().position(|e| e.id == id).expect("selected from the dataset");
    let sample_seed = cfg.stream("sample");
    let jobs = ids
        .iter()
        .map(|&id| {
            let i = index_of(id);
            let ep = &ds.episodes[i];
            Ok((context_of(&ep.frames, &model)?, actions[i][m - 1..m - 1 + steps].to_vec(), rng::indexed(sample_seed, id as u64)))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let schedule = NoiseSchedule::linear(model.config.diffusion_steps)?;
    let trajs = rollout_many(&model, &schedule, &jobs, cfg.eval.sample_steps)?;
    let scorer = PerceptualScorer::default();
    let per_episode = trajs
        .iter()
        .zip(&ids)
        .map(|(t, &id)| Ok(evaluate_prediction(&t.frames(&model)?, &ds.episodes[index_of(id)].frames[m..m + steps], &cfg.eval.horizons, cfg.data.fps, &scorer)?))
        .collect::<anyhow::Result<Vec<_>>>()?;

    let selected = Dataset::from_episodes(ids.iter().map(|&id| ds.episodes[index_of(id)].clone()).collect(), None)?;
    let data = TrainingData::from_dataset(&selected, &model.config)?;
    let set = ValidationSet::build(&data, &model.config, cfg.train.val_samples)?;
    let (val_mse, baseline_mse) = validate(&model, &schedule, &set, cfg.stream("validate"))?;

    let hash = write_config(cfg, out)?;
    let mut metrics = Vec::new();
    let mut curves = vec![("psnr".to_string(), Vec::new()), ("feature_distance".to_string(), Vec::new())];
    for (j, h) in cfg.eval.horizons.iter().enumerate() {
        let psnr: Vec<f64> = per_episode.iter().map(|r| r[j].psnr).collect();
        let fd: Vec<f64> = per_episode.iter().map(|r| r[j].feature_distance).collect();
        curves[0].1.push((*h, mean_std(&psnr)?.0));
        curves[1].1.push((*h, mean_std(&fd)?.0));
        metrics.push(MetricSeries::new(format!("psnr@{h}s"), psnr));
        metrics.push(MetricSeries::new(format!("feature_distance@{h}s"), fd));
    }
    metrics.push(MetricSeries::new("one_step_mse", vec![val_mse]));
    metrics.push(MetricSeries::new("copy_last_mse", vec![baseline_mse]));
    if let Some(dir) = plan_dir {
        let plan = read_plan(dir)?;
        let mut ates = Vec::new();
        let mut rpes = Vec::new();
        for r in &plan.trials {
            let pair = TrajectoryPair::new(r.trajectory.clone(), r.reference.clone())?;
            ates.push(ate(&pair));
            rpes.push(rpe(&pair, cfg.eval.rpe_delta)?.0);
        }
        ensure!(!ates.is_empty(), "plan has no trials");
        metrics.push(MetricSeries::new("plan_ate", ates));
        metrics.push(MetricSeries::new("plan_rpe", rpes));
        metrics.push(MetricSeries::new("plan_final_error", plan.trials.iter().map(|r| r.pose_error).collect()));
    }
    let report = Report { title: "evaluation".into(), config_hash: Some(hash.clone()), metrics, curves };
    report.write(out, "eval")?;
    let mut csv = format!("# config_hash: {hash}\nepisode,horizon_s,step,psnr,feature_distance\n");
    for (id, rows) in ids.iter().zip(&per_episode) {
        for r in rows {
            writeln!(csv, "{id},{},{},{},{}", r.horizon, r.step, r.psnr, r.feature_distance).unwrap();
        }
    }
    write_text(&out.join("horizons.csv"), &csv)?;
    Ok(EvalSummary { episodes: ids, per_episode, val_mse, baseline_mse, report })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    pub variant: Variant,
    pub context: usize,
    pub tokens: usize,
    pub dim: usize,
    pub attention_flops: u64,
    pub closed_total: u64,
    pub instrumented_total: u64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSummary {
    pub rows: Vec<BenchRow>,
    pub cdit_linear_r2: f64,
    pub dit_quadratic_r2: f64,
    /// DiT over CDiT attention FLOPs at the context closest to 4.
    pub ratio_at_4: f64,
}

fn bench_config(cfg: &RunConfig, variant: Variant, context: usize) -> anyhow::Result<ModelConfig> {
    let b = &cfg.bench;
    let side = (b.tokens as f64).sqrt().round() as usize;
    ensure!(side * side == b.tokens, "bench.tokens must be a perfect square");
    let mc = ModelConfig { variant, depth: b.depth, dim: b.dim, heads: b.heads, patch_size: 4, height: 4 * side, width: 4 * side, context, ..ModelConfig::default() };
    mc.validate()?;
    Ok(mc)
}

/// One batch-1 forward pass; returns the tape's multiply-add count.
fn instrumented_forward(model: &Model, input: &ModelInput) -> anyhow::Result<u64> {
    let tape = Tape::<f32>::new();
    let p = model.params.bind_frozen(&tape)?;
    let (noisy, ctx) = input.record(&model.config, &tape)?;
    forward(&model.config, &p, &tape, &noisy, &ctx, &input.conds, &input.ts)?;
    Ok(tape.flops())
}

/// Closed-form and instrumented FLOPs plus wall-clock per forward for CDiT
/// and DiT over `bench.contexts`; writes `bench.csv`.
pub fn bench(cfg: &RunConfig, out: &Path) -> anyhow::Result<BenchSummary> {
    ensure!(cfg.bench.contexts.len() >= 3, "bench needs at least three context sizes for the fits");
    let mut rows = Vec::new();
    let mut r = rng::stream(cfg.seed, "bench");
    for variant in [Variant::Cdit, Variant::Dit] {
        for &m in &cfg.bench.contexts {
            let mc = bench_config(cfg, variant, m)?;
            let model = Model::new(mc, &mut r)?;
            let (n, dl) = (mc.tokens(), mc.latent_dim());
            let input = ModelInput {
                noisy: gaussian(n * dl, &mut r),
                context: gaussian(m * n * dl, &mut r),
                conds: vec![Condition::from_action(&NavAction::new([1.0, 0.0], 0.1, 0.25))],
                ts: vec![mc.diffusion_steps / 2],
            };
            let closed = count_flops(&mc, 1, true);
            let instrumented = instrumented_forward(&model, &input)?;
            let mut best = f64::INFINITY;
            for _ in 0..cfg.bench.repeats.max(1) {
                let t0 = Instant::now();
                model.predict(&input)?;
                best = best.min(t0.elapsed().as_secs_f64() * 1e3);
            }
            rows.push(BenchRow {
                variant,
                context: m,
                tokens: n,
                dim: mc.dim,
                attention_flops: closed.attention(),
                closed_total: closed.total(),
                instrumented_total: instrumented,
                wall_ms: best,
            });
        }
    }
    let series = |v: Variant| -> (Vec<f64>, Vec<f64>) { rows.iter().filter(|r| r.variant == v).map(|r| (r.context as f64, r.attention_flops as f64)).unzip() };
    let (xc, yc) = series(Variant::Cdit);
    let (xd, yd) = series(Variant::Dit);
    let near4 = cfg.bench.contexts.iter().copied().min_by_key(|m| m.abs_diff(4)).expect("non-empty");
    let at = |v: Variant| rows.iter().find(|r| r.variant == v && r.context == near4).expect("swept").attention_flops as f64;
    let summary = BenchSummary { cdit_linear_r2: polyfit_r2(&xc, &yc, 1), dit_quadratic_r2: polyfit_r2(&xd, &yd, 2), ratio_at_4: at(Variant::Dit) / at(Variant::Cdit), rows };

    let hash = write_config(cfg, out)?;
    let mut csv = format!("# config_hash: {hash}\nvariant,context,tokens,dim,attention_flops,closed_total,instrumented_total,wall_ms\n");
    for r in &summary.rows {
        let v = if r.variant == Variant::Cdit { "cdit" } else { "dit" };
        writeln!(csv, "{v},{},{},{},{},{},{},{:.4}", r.context, r.tokens, r.dim, r.attention_flops, r.closed_total, r.instrumented_total, r.wall_ms).unwrap();
    }
    write_text(&out.join("bench.csv"), &csv)?;
    let report = Report {
        title: "attention FLOPs vs context".into(),
        config_hash: Some(hash),
        metrics: vec![
            MetricSeries::new("cdit_linear_r2", vec![summary.cdit_linear_r2]),
            MetricSeries::new("dit_quadratic_r2", vec![summary.dit_quadratic_r2]),
            MetricSeries::new("dit_over_cdit_at_4", vec![summary.ratio_at_4]),
        ],
        curves: vec![("cdit".into(), xc.into_iter().zip(yc).collect()), ("dit".into(), xd.into_iter().zip(yd).collect())],
    };
    report.write(out, "bench_summary")?;
    if summary.rows.iter().any(|r| r.closed_total != r.instrumented_total) {
        bail!("closed-form and instrumented FLOP counts disagree; see bench.csv");
    }
    Ok(summary)
}
