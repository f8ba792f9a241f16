//! Noise schedule, forward noising, multi-goal batches, the training loop
//! and ancestral sampling.

mod goals;
mod optim;
mod sampler;
mod schedule;
mod train;

pub use goals::{goal_action, sample_goals, Goal, ShiftRange};
pub use optim::{AdamW, AdamWConfig};
pub use sampler::{gaussian, sample};
pub use schedule::{add_noise_with, NoiseSchedule};
pub use train::{
    build_batch, loss_csv, noise_batch, source_positions, train, training_loss, validate, write_loss_csv, LatentEpisode, LossRow,
    NoisedBatch, TrainBatch, TrainConfig, TrainingData, ValidationSet,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::cdit::{LatentState, Model, ModelConfig, ModelInput, Prediction, Variant};
    use crate::conditioning::Condition;
    use crate::rng;
    use crate::world::NavAction;
    use proptest::prelude::*;
    use rand::Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn tiny() -> ModelConfig {
        ModelConfig {
            depth: 1,
            dim: 16,
            heads: 2,
            mlp_ratio: 2,
            patch_size: 2,
            height: 4,
            width: 4,
            channels: 1,
            context: 2,
            diffusion_steps: 20,
            num_frequencies: 4,
            ..Default::default()
        }
    }

    fn step_actions(n: usize) -> Vec<NavAction> {
        (0..n).map(|i| NavAction::new([0.25, 0.01 * i as f64], 0.05 * (i % 3) as f64, 0.25)).collect()
    }

    fn toy_data(cfg: &ModelConfig, episodes: usize, len: usize, seed: u64) -> TrainingData {
        let mut r = rng::from_seed(seed);
        let size = cfg.tokens() * cfg.latent_dim();
        TrainingData {
            episodes: (0..episodes)
                .map(|id| LatentEpisode {
                    id,
                    frames: (0..len)
                        .map(|_| LatentState::new(cfg.tokens(), cfg.latent_dim(), (0..size).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap())
                        .collect(),
                    actions: step_actions(len - 1),
                })
                .collect(),
        }
    }

    #[test]
    fn schedule_is_monotone_with_sane_ends() {
        for steps in [1, 2, 20, 100, 1000] {
            let s = NoiseSchedule::linear(steps).unwrap();
            assert!(s.alphas.iter().all(|&a| a > 0.0 && a < 1.0));
            assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
            if steps >= 20 {
                assert!(s.alpha_bars[0] > 0.98);
                assert!(*s.alpha_bars.last().unwrap() < 1e-3);
            }
        }
        assert!(NoiseSchedule::linear(0).is_err());
        assert!(NoiseSchedule::linear(10).unwrap().alpha_bar(10).is_err());
    }

    #[test]
    fn respacing() {
        let s = NoiseSchedule::linear(100).unwrap();
        assert_eq!(s.respaced(1).unwrap(), vec![99]);
        assert_eq!(s.respaced(2).unwrap(), vec![99, 0]);
        let r = s.respaced(50).unwrap();
        assert_eq!((r.len(), r[0], *r.last().unwrap()), (50, 99, 0));
        assert!(r.windows(2).all(|w| w[1] < w[0]));
        assert!(s.respaced(101).is_err() && s.respaced(0).is_err());
    }

    #[test]
    fn noise_limits() {
        let s = [0.3f32, -1.5, 2.0];
        let e = [0.7f32, 0.1, -0.4];
        assert_eq!(add_noise_with(1.0, &s, &e).unwrap(), s.to_vec());
        assert_eq!(add_noise_with(0.0, &s, &e).unwrap(), e.to_vec());
        assert!(add_noise_with(0.5, &s, &e[..2]).is_err());
    }

    proptest! {
        #[test]
        fn noise_formula_per_element(t in 0usize..100, s in prop::collection::vec(-3.0f64..3.0, 1..20), seed in any::<u64>()) {
            let sch = NoiseSchedule::linear(100).unwrap();
            let eps = gaussian(s.len(), &mut rng::from_seed(seed)).into_iter().map(f64::from).collect::<Vec<_>>();
            let out = sch.add_noise(&s, t, &eps).unwrap();
            let ab = sch.alpha_bars[t];
            for i in 0..s.len() {
                prop_assert_eq!(out[i], ab.sqrt() * s[i] + (1.0 - ab).sqrt() * eps[i]);
            }
        }
    }

    #[test]
    fn noising_preserves_unit_variance() {
        let n = 100_000;
        let sch = NoiseSchedule::linear(100).unwrap();
        let mut r = rng::from_seed(11);
        for t in [0, 30, 60, 99] {
            let s: Vec<f64> = gaussian(n, &mut r).into_iter().map(f64::from).collect();
            let e: Vec<f64> = gaussian(n, &mut r).into_iter().map(f64::from).collect();
            let x = sch.add_noise(&s, t, &e).unwrap();
            let mean = x.iter().sum::<f64>() / n as f64;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            // Var of the sample variance of N(0,1) is 2/(n-1).
            let sigma = (2.0 / (n - 1) as f64).sqrt();
            assert!((var - 1.0).abs() < 3.0 * sigma, "t={t} var={var}");
        }
    }

    #[test]
    fn single_goal_single_step_is_raw_action() {
        let acts = step_actions(10);
        let range = ShiftRange { max_steps: 1, allow_backward: false };
        let g = sample_goals(&acts, 3, 1, &range, &mut rng::from_seed(0)).unwrap();
        assert_eq!(g, vec![Goal { shift: 1, target: 4, action: acts[3] }]);
    }

    #[test]
    fn goals_are_distinct_and_composed() {
        let acts = step_actions(12);
        let range = ShiftRange { max_steps: 4, allow_backward: true };
        let mut r = rng::from_seed(5);
        for _ in 0..200 {
            let g = sample_goals(&acts, 6, 4, &range, &mut r).unwrap();
            let mut shifts: Vec<_> = g.iter().map(|x| x.shift).collect();
            shifts.sort();
            shifts.dedup();
            assert_eq!(shifts.len(), 4);
            for goal in g {
                assert_eq!(goal.target as isize, 6 + goal.shift);
                assert!((goal.action.k - 0.25 * goal.shift as f64).abs() < 1e-12);
            }
        }
        // backward goal negates the summed skipped actions
        let a = goal_action(&acts, 6, -2).unwrap();
        let f = crate::conditioning::compose_actions(&acts[4..6]).unwrap();
        assert_eq!(a.u, [-f.u[0], -f.u[1]]);
        assert!(sample_goals(&acts, 11, 2, &ShiftRange { max_steps: 4, allow_backward: false }, &mut r).is_err());
        assert!(sample_goals(&acts, 13, 1, &range, &mut r).is_err());
    }

    #[test]
    fn sampled_shifts_are_uniform() {
        let acts = step_actions(20);
        let range = ShiftRange { max_steps: 4, allow_backward: false };
        let mut r = rng::from_seed(99);
        let draws = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            let g = sample_goals(&acts, 2, 1, &range, &mut r).unwrap();
            counts[g[0].shift as usize - 1] += 1;
        }
        let expected = draws as f64 / 4.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new(3.0).unwrap().cdf(chi2);
        assert!(p > 0.01, "counts {counts:?} p={p}");
    }

    #[test]
    fn batch_rows_share_context_per_source() {
        let cfg = tiny();
        let data = toy_data(&cfg, 3, 12, 1);
        let tc = TrainConfig { sources_per_batch: 3, goals: 4, ..Default::default() };
        let pos = source_positions(&data, tc.goals, &ShiftRange { max_steps: 4, allow_backward: false });
        let b = build_batch(&data, &pos, &cfg, &tc, &mut rng::from_seed(2)).unwrap();
        assert_eq!(b.len(), 12);
        assert_eq!(b.len() % b.goals, 0);
        let row = b.context.len() / b.len();
        for s in 0..3 {
            let first = &b.context[s * 4 * row..(s * 4 + 1) * row];
            for j in 1..4 {
                assert_eq!(&b.context[(s * 4 + j) * row..(s * 4 + j + 1) * row], first);
            }
        }
    }

    fn loss_once(model: &Model, batch: &TrainBatch, sch: &NoiseSchedule, seed: u64) -> f32 {
        let tape = Tape::<f32>::new();
        let p = model.params.bind(&tape).unwrap();
        training_loss(&model.config, &p, &tape, batch, sch, &mut rng::from_seed(seed)).unwrap().item()
    }

    fn fixed_batch(cfg: &ModelConfig) -> TrainBatch {
        let data = toy_data(cfg, 2, 10, 3);
        let tc = TrainConfig { sources_per_batch: 2, goals: 2, ..Default::default() };
        let pos = source_positions(&data, 2, &ShiftRange { max_steps: 4, allow_backward: false });
        build_batch(&data, &pos, cfg, &tc, &mut rng::from_seed(4)).unwrap()
    }

    #[test]
    fn loss_reproducible_and_context_untouched() {
        let cfg = tiny();
        let mut model = Model::new(cfg, &mut rng::from_seed(0)).unwrap();
        // Perturb the zero-initialized layers so the loss depends on the input.
        for t in model.params.tensors_mut() {
            let mut r = rng::from_seed(t.numel() as u64);
            t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.1..0.1));
        }
        let batch = fixed_batch(&cfg);
        let before = batch.clone();
        let sch = NoiseSchedule::linear(cfg.diffusion_steps).unwrap();
        let a = loss_once(&model, &batch, &sch, 9);
        let b = loss_once(&model, &batch, &sch, 9);
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(batch, before);
    }

    #[test]
    fn zero_output_model_loss_is_target_power() {
        for prediction in [Prediction::X, Prediction::Eps] {
            let cfg = ModelConfig { prediction, ..tiny() };
            let model = Model::new(cfg, &mut rng::from_seed(0)).unwrap();
            let batch = fixed_batch(&cfg);
            let sch = NoiseSchedule::linear(cfg.diffusion_steps).unwrap();
            let loss = loss_once(&model, &batch, &sch, 7) as f64;
            let nb = noise_batch(&batch, &sch, prediction, &mut rng::from_seed(7)).unwrap();
            let power = nb.regress.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / nb.regress.len() as f64;
            assert!((loss - power).abs() < 1e-5 * power, "{loss} vs {power}");
            if prediction == Prediction::X {
                assert_eq!(nb.regress, batch.targets);
            }
        }
    }

    #[test]
    fn identity_oracle_has_zero_loss_without_noise() {
        let cfg = tiny();
        let batch = fixed_batch(&cfg);
        let clean = NoiseSchedule { betas: vec![0.0; 20], alphas: vec![1.0; 20], alpha_bars: vec![1.0; 20] };
        let nb = noise_batch(&batch, &clean, Prediction::X, &mut rng::from_seed(1)).unwrap();
        // An oracle returning its noisy input regresses the clean target exactly.
        assert_eq!(nb.noisy, nb.regress);
    }

    #[test]
    fn sampling_is_deterministic_and_one_step_is_the_prediction() {
        let cfg = tiny();
        let mut model = Model::new(cfg, &mut rng::from_seed(0)).unwrap();
        for t in model.params.tensors_mut() {
            let mut r = rng::from_seed(t.numel() as u64 + 17);
            t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.2..0.2));
        }
        let sch = NoiseSchedule::linear(cfg.diffusion_steps).unwrap();
        let batch = fixed_batch(&cfg);
        let ctx = &batch.context;
        let a = sample(&model, &sch, ctx, &batch.conds, 5, &mut rng::from_seed(3)).unwrap();
        let b = sample(&model, &sch, ctx, &batch.conds, 5, &mut rng::from_seed(3)).unwrap();
        assert_eq!(a, b);

        let one = sample(&model, &sch, ctx, &batch.conds, 1, &mut rng::from_seed(8)).unwrap();
        let noise = gaussian(batch.targets.len(), &mut rng::from_seed(8));
        let direct = model
            .predict(&ModelInput { noisy: noise, context: ctx.clone(), conds: batch.conds.clone(), ts: vec![cfg.diffusion_steps - 1; batch.len()] })
            .unwrap();
        assert_eq!(one, direct);
        assert!(sample(&model, &sch, ctx, &batch.conds, cfg.diffusion_steps + 1, &mut rng::from_seed(0)).is_err());
    }

    #[test]
    fn zero_steps_keeps_initialization() {
        let cfg = tiny();
        let data = toy_data(&cfg, 4, 10, 0);
        let (tr, val) = data.split(0.25);
        let mut model = Model::new(cfg, &mut rng::from_seed(0)).unwrap();
        let init = model.clone();
        let rows = train(&mut model, &tr, &val, &TrainConfig { steps: 0, ..Default::default() }, |_| {}).unwrap();
        assert!(rows.is_empty());
        assert_eq!(model, init);
    }

    #[test]
    fn first_row_loss_is_target_power_at_init() {
        let cfg = tiny();
        let data = toy_data(&cfg, 4, 10, 0);
        let (tr, val) = data.split(0.25);
        let mut model = Model::new(cfg, &mut rng::from_seed(0)).unwrap();
        let tc = TrainConfig { steps: 3, eval_every: 2, val_samples: 8, ..Default::default() };
        let rows = train(&mut model, &tr, &val, &tc, |_| {}).unwrap();
        // Row 0 comes from the first batch, drawn from the same stream.
        let pos = source_positions(&tr, tc.goals, &ShiftRange { max_steps: 4, allow_backward: false });
        let b = build_batch(&tr, &pos, &cfg, &tc, &mut rng::stream(tc.seed, "batches")).unwrap();
        let power = b.targets.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / b.targets.len() as f64;
        assert!((rows[0].loss - power).abs() < 1e-5 * power);
        assert_eq!(rows.iter().map(|r| r.val_mse.is_some()).collect::<Vec<_>>(), vec![false, true, true]);
        let again = train(&mut Model::new(cfg, &mut rng::from_seed(0)).unwrap(), &tr, &val, &tc, |_| {}).unwrap();
        assert_eq!(rows, again);
        let csv = loss_csv(&rows, Some("abc"));
        assert!(csv.starts_with("# config_hash: abc\nstep,loss,val_mse,baseline_mse\n0,"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = tiny();
        let data = toy_data(&cfg, 3, 10, 0);
        let mut model = Model::new(cfg, &mut rng::from_seed(0)).unwrap();
        model.params.get_mut("embed.in.w").unwrap().data_mut()[0] = f32::NAN;
        let err = train(&mut model, &data, &TrainingData::default(), &TrainConfig { steps: 2, ..Default::default() }, |_| {});
        assert!(matches!(err, Err(crate::Error::Diverged { step: 0, .. })), "{err:?}");
    }

    #[test]
    fn two_mode_toy_recovers_both_modes() {
        let cfg = ModelConfig {
            variant: Variant::Cdit,
            depth: 2,
            dim: 32,
            heads: 2,
            mlp_ratio: 2,
            patch_size: 2,
            height: 4,
            width: 4,
            channels: 1,
            context: 1,
            diffusion_steps: 50,
            num_frequencies: 4,
            ..Default::default()
        };
        let (n, dl) = (cfg.tokens(), cfg.latent_dim());
        let size = n * dl;
        let cond = Condition::from_action(&NavAction::new([0.25, 0.0], 0.0, 0.25));
        let sch = NoiseSchedule::linear(cfg.diffusion_steps).unwrap();
        let mut model = Model::new(cfg, &mut rng::from_seed(1)).unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: 2e-3, weight_decay: 0.0, ..Default::default() }, &model.params);
        let mut r = rng::from_seed(2);
        let rows = 32;
        for _ in 0..1500 {
            let targets: Vec<f32> = (0..rows).flat_map(|_| vec![if r.random_bool(0.5) { 1.0f32 } else { -1.0 }; size]).collect();
            let batch = TrainBatch { context: vec![0.0; rows * size], targets, conds: vec![cond; rows], goals: 1 };
            let tape = Tape::<f32>::new();
            let p = model.params.bind(&tape).unwrap();
            let loss = training_loss(&cfg, &p, &tape, &batch, &sch, &mut r).unwrap();
            let mut grads = tape.backward(&loss).unwrap();
            let g = p.collect_grads(&mut grads);
            drop(p);
            opt.update(&mut model.params, &g).unwrap();
        }
        let count = 200;
        let out = sample(&model, &sch, &vec![0.0; count * size], &vec![cond; count], 25, &mut rng::from_seed(3)).unwrap();
        let positive = out
            .iter()
            .filter(|s| {
                let d_pos: f64 = s.data.iter().map(|&v| (v as f64 - 1.0).powi(2)).sum();
                let d_neg: f64 = s.data.iter().map(|&v| (v as f64 + 1.0).powi(2)).sum();
                d_pos < d_neg
            })
            .count();
        let frac = positive as f64 / count as f64;
        assert!((0.4..=0.6).contains(&frac), "positive mode fraction {frac}");
        // Samples land near a mode rather than at the mean.
        let near = out.iter().filter(|s| s.data.iter().all(|v| (v.abs() - 1.0).abs() < 0.5)).count();
        assert!(near as f64 > 0.8 * count as f64, "{near} of {count} near a mode");
    }
}
