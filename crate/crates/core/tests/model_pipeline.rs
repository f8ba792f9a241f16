use nwm::cdit::{encode, LatentState, Model, ModelConfig};
use nwm::diffusion::{train, NoiseSchedule, TrainConfig, TrainingData};
use nwm::planner::{cem_plan, expand_endpoint, CemConfig, Constraint, EnergySpec, ModelSim};
use nwm::rng;
use nwm::rollout::{rollout, rollout_many};
use nwm::world::{generate_episodes, Dataset, EpisodeParams, NavAction, Resolution};

fn setup() -> (Model, TrainingData, Dataset) {
    let params = EpisodeParams { length: 14, resolution: Resolution { height: 8, width: 8 }, ..Default::default() };
    let ds = Dataset::from_episodes(generate_episodes(12, 5, &[7, 8], &params).unwrap(), None).unwrap();
    let cfg = ModelConfig { depth: 1, dim: 16, heads: 2, mlp_ratio: 2, height: 8, width: 8, context: 2, diffusion_steps: 20, ..Default::default() };
    let data = TrainingData::from_dataset(&ds, &cfg).unwrap();
    let (tr, va) = data.clone().split(0.25);
    let mut model = Model::new(cfg, &mut rng::from_seed(1)).unwrap();
    let tc = TrainConfig { steps: 25, eval_every: 25, val_samples: 8, ..Default::default() };
    let rows = train(&mut model, &tr, &va, &tc, |_| {}).unwrap();
    assert_eq!(rows.len(), 25);
    assert!(rows.iter().all(|r| r.loss.is_finite()));
    assert!(rows[24].val_mse.is_some() && rows[23].val_mse.is_none());
    (model, data, ds)
}

fn context(model: &Model, ds: &Dataset) -> Vec<LatentState> {
    ds.episodes[0].frames[..2].iter().map(|f| encode(f, &model.config).unwrap()).collect()
}

#[test]
fn trained_model_round_trips_and_rolls_out_deterministically() {
    let (model, _, ds) = setup();
    let tmp = tempfile::tempdir().unwrap();
    model.save(&tmp.path().join("m.nwm")).unwrap();
    let loaded = Model::load(&tmp.path().join("m.nwm")).unwrap();
    assert_eq!(loaded, model);

    let schedule = NoiseSchedule::linear(model.config.diffusion_steps).unwrap();
    let ctx = context(&model, &ds);
    let acts = vec![NavAction::new([1.0, 0.0], 0.1, 0.25); 5];
    let a = rollout(&model, &schedule, &ctx, &acts, 4, 11).unwrap();
    let b = rollout(&loaded, &schedule, &ctx, &acts, 4, 11).unwrap();
    let c = rollout(&model, &schedule, &ctx, &acts, 4, 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.states, c.states);
    assert_eq!(a.states.len(), 5);

    let jobs = vec![(ctx.clone(), acts.clone(), 11), (ctx.clone(), acts[..3].to_vec(), 12)];
    let many = rollout_many(&model, &schedule, &jobs, 4).unwrap();
    assert_eq!(many[0], a);
    assert_eq!(many[1], rollout(&model, &schedule, &ctx, &acts[..3], 4, 12).unwrap());
}

#[test]
fn model_in_the_loop_planning_is_reproducible_and_constrained() {
    let (model, _, ds) = setup();
    let schedule = NoiseSchedule::linear(model.config.diffusion_steps).unwrap();
    let sim = ModelSim { model: &model, schedule: &schedule, context: context(&model, &ds), sample_steps: 2 };
    let spec = EnergySpec::new(ds.episodes[0].frames[5].clone(), Default::default(), Default::default(), 100.0, 2).unwrap();
    let cfg = CemConfig { population: 6, steps: 4, constraint: Constraint::LeftRightFirst, iterations: 2, ..Default::default() };
    let a = cem_plan(&sim, &spec, &cfg, 3).unwrap();
    let b = cem_plan(&sim, &spec, &cfg, 3).unwrap();
    assert_eq!(a, b);
    assert!(Constraint::LeftRightFirst.satisfied_by(&a.best.actions));
    assert_eq!(a.best.actions, expand_endpoint(a.best.endpoint, 4, cfg.dt, Constraint::LeftRightFirst).unwrap());
    assert_eq!(a.best.evals.len(), 2);
    assert_eq!(a.trace.len(), 2);
    assert!(a.trace.iter().all(|t| t.elite_mean_energy <= t.population_mean_energy));
}
