//! Goal-conditioned planning: a perceptual goal-similarity energy with
//! constraint penalties, straight-line endpoint expansion under hard-zero
//! constraints, cross-entropy-method search and trajectory ranking.

mod cem;
mod energy;
mod perceptual;
mod scenario;

pub use cem::{
    candidate_seed, cem_plan, expand_endpoint, rank_trajectories, CemConfig, CemIteration, CemResult, Constraint, ScoredTrajectory,
};
pub use energy::{eval_seed, ActionLimits, EnergySpec, ModelSim, OracleSim, SimOutcome, Simulator, DEFAULT_PENALTY};
pub use perceptual::{Features, PerceptualScorer};
pub use scenario::{empty_room_trial, expert_actions, ranking_trial, PlanningTrial};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::compose_actions;
    use crate::rng;
    use crate::world::{generate_map, render, MapParams, NavAction, Pose, Resolution, WorldMap};
    use proptest::prelude::*;
    use rand::Rng;

    fn trial_cfg() -> CemConfig {
        CemConfig { init_mean: [4.0, 0.0, 0.0], init_var: [4.0, 4.0, 0.1], iterations: 3, ..Default::default() }
    }

    #[test]
    fn score_identity_and_symmetry() {
        let s = PerceptualScorer::default();
        let map = generate_map(1, &MapParams::default());
        let cell = map.free_cells()[3];
        let a = render(&map, &Pose::new(cell.0 as f64 + 0.5, cell.1 as f64 + 0.5, 0.4), Resolution::default()).unwrap();
        let b = render(&map, &Pose::new(cell.0 as f64 + 0.5, cell.1 as f64 + 0.5, 1.4), Resolution::default()).unwrap();
        let fa = s.features(&a).unwrap();
        assert_eq!(s.feature_distance(&fa, &fa).unwrap(), 0.0);
        assert_eq!(s.score(&a, &a).unwrap(), 0.0);
        let (ab, ba) = (s.score(&a, &b).unwrap(), s.score(&b, &a).unwrap());
        assert!(ab < 0.0 && (ab - ba).abs() < 1e-12);
        assert!(-ab <= s.max_magnitude());
        let small = crate::world::Frame::filled(8, 8, 3, 0.5);
        assert!(s.score(&a, &small).is_err());
    }

    #[test]
    fn score_prefers_nearby_views() {
        let s = PerceptualScorer::default();
        let params = MapParams::default();
        let mut wins = 0;
        let trials = 200;
        for t in 0..trials {
            let map = generate_map(rng::indexed(11, t), &params);
            let mut r = rng::from_seed(t);
            let free = map.free_cells();
            let (goal, near, far) = loop {
                let c = free[r.random_range(0..free.len())];
                let goal = Pose::new(c.0 as f64 + r.random_range(0.3..0.7), c.1 as f64 + r.random_range(0.3..0.7), r.random_range(-3.1..3.1));
                let near = goal.advance([r.random_range(-0.1..0.1), r.random_range(-0.1..0.1)], r.random_range(-0.1..0.1));
                let fc = free[r.random_range(0..free.len())];
                let far = Pose::new(fc.0 as f64 + 0.5, fc.1 as f64 + 0.5, r.random_range(-3.1..3.1));
                if map.is_free(near.x, near.y) && far.distance(&goal) > 2.0 {
                    break (goal, near, far);
                }
            };
            let g = render(&map, &goal, Resolution::default()).unwrap();
            let sn = s.score(&render(&map, &near, Resolution::default()).unwrap(), &g).unwrap();
            let sf = s.score(&render(&map, &far, Resolution::default()).unwrap(), &g).unwrap();
            wins += (sn > sf) as usize;
        }
        assert!(wins as f64 >= 0.95 * trials as f64, "{wins}/{trials}");
    }

    #[test]
    fn even_split_expansion() {
        let a = expand_endpoint([0.8, 0.0, 0.0], 8, 0.25, Constraint::None).unwrap();
        assert_eq!(a, vec![NavAction { u: [0.1, 0.0], phi: 0.0, k: 0.25 }; 8]);
        assert!(expand_endpoint([0.8, 0.0, 0.0], 0, 0.25, Constraint::None).is_err());
        assert!(expand_endpoint([0.8, 0.0, 0.0], 1, 0.25, Constraint::ForwardFirst).is_err());
        assert!("sideways".parse::<Constraint>().is_err());
        assert_eq!("left-right-first".parse::<Constraint>().unwrap(), Constraint::LeftRightFirst);
    }

    proptest! {
        #[test]
        fn expansions_compose_to_endpoint_and_keep_zeros(dx in -5.0f64..5.0, dy in -5.0f64..5.0, phi in -3.0f64..3.0, steps in 2usize..12, ci in 0usize..4) {
            let c = Constraint::ALL[ci];
            let a = expand_endpoint([dx, dy, phi], steps, 0.25, c).unwrap();
            prop_assert_eq!(a.len(), steps);
            prop_assert!(c.satisfied_by(&a));
            let sum = compose_actions(&a).unwrap();
            prop_assert!((sum.u[0] - dx).abs() < 1e-12 && (sum.u[1] - dy).abs() < 1e-12 && (sum.phi - phi).abs() < 1e-12);
            prop_assert!((sum.k - 0.25 * steps as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_first_has_exact_zero_lateral() {
        let a = expand_endpoint([3.0, 1.7, 0.4], 8, 0.25, Constraint::ForwardFirst).unwrap();
        assert!(a[..5].iter().all(|x| x.u[1] == 0.0 && x.u[0] == 0.6));
        assert!(a[5..].iter().all(|x| x.u[0] == 0.0));
        let b = expand_endpoint([3.0, 1.7, 0.4], 8, 0.25, Constraint::LeftRightFirst).unwrap();
        assert!(b[..3].iter().all(|x| x.u[0] == 0.0) && b[3..].iter().all(|x| x.u[1] == 0.0));
        let c = expand_endpoint([3.0, 1.7, 0.4], 8, 0.25, Constraint::StraightThenForward).unwrap();
        assert!(c[3..].iter().all(|x| x.u[1] == 0.0));
        assert!(!Constraint::ForwardFirst.satisfied_by(&b));
    }

    fn room_trial(seed: u64) -> PlanningTrial {
        empty_room_trial(seed, 6, 0.25, &trial_cfg()).unwrap()
    }

    #[test]
    fn energy_properties() {
        let t = room_trial(0);
        let start_sim = OracleSim { map: t.sim.map.clone(), start: t.sim.start, resolution: Resolution::default() };
        let start_frame = render(&start_sim.map, &start_sim.start, Resolution::default()).unwrap();
        let spec = EnergySpec::with_defaults(start_frame).unwrap();
        let zero = vec![NavAction::zero(0.25); 8];
        assert_eq!(spec.energy_once(&start_sim, &zero, 0).unwrap(), 0.0);

        let mut bad = zero.clone();
        bad[3].u = [50.0, 0.0];
        assert!(spec.energy_once(&start_sim, &bad, 0).unwrap() >= spec.penalty);

        let goal = EnergySpec::with_defaults(t.goal_frame.clone()).unwrap();
        let evals = goal.energies(&t.sim, &t.reference, 5).unwrap();
        assert_eq!(evals.len(), 3);
        for (j, e) in evals.iter().enumerate() {
            assert_eq!(*e, goal.energy_once(&t.sim, &t.reference, eval_seed(5, j)).unwrap());
        }
        assert!(EnergySpec::new(t.goal_frame.clone(), PerceptualScorer::default(), ActionLimits::default(), 1.0, 3).is_err());
        assert!(EnergySpec::new(t.goal_frame, PerceptualScorer::default(), ActionLimits::default(), 100.0, 0).is_err());
        // the penalty dominates any similarity by at least 10x
        assert!(DEFAULT_PENALTY >= 10.0 * PerceptualScorer::default().max_magnitude());
    }

    #[test]
    fn blocked_moves_are_unsafe() {
        let map = WorldMap::empty_room(6, 0.25);
        let sim = OracleSim { map, start: Pose::new(4.7, 3.0, 0.0), resolution: Resolution::default() };
        let (_, blocked) = sim.final_pose(&[NavAction::new([2.0, 0.0], 0.0, 0.25); 3]);
        assert_eq!(blocked, 3);
    }

    #[test]
    fn cem_single_candidate_and_refit() {
        let t = room_trial(1);
        let spec = EnergySpec::with_defaults(t.goal_frame.clone()).unwrap();
        let one = CemConfig { population: 1, iterations: 1, ..trial_cfg() };
        let res = cem_plan(&t.sim, &spec, &one, 3).unwrap();
        let mut r = rng::from_seed(candidate_seed(3, 0, 0));
        let e: Vec<f64> = (0..3).map(|d| one.init_mean[d] + one.init_var[d].sqrt() * r.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        assert_eq!(res.best.endpoint.to_vec(), e);

        let all = CemConfig { population: 20, elite_fraction: 1.0, iterations: 1, ..trial_cfg() };
        let res = cem_plan(&t.sim, &spec, &all, 4).unwrap();
        let pts: Vec<[f64; 3]> = (0..20)
            .map(|i| {
                let mut r = rng::from_seed(candidate_seed(4, 0, i));
                let mut p = [0.0; 3];
                for d in 0..3 {
                    p[d] = all.init_mean[d] + all.init_var[d].sqrt() * r.sample::<f64, _>(rand_distr::StandardNormal);
                }
                p
            })
            .collect();
        let it = &res.trace[0];
        for d in 0..3 {
            let m = pts.iter().map(|p| p[d]).sum::<f64>() / 20.0;
            let v = (pts.iter().map(|p| (p[d] - m).powi(2)).sum::<f64>() / 20.0).max(all.var_floor);
            assert_eq!((it.next_mean[d], it.next_var[d]), (m, v));
        }
        assert!((it.elite_mean_energy - it.population_mean_energy).abs() < 1e-12);
    }

    #[test]
    fn cem_beats_prior_mean_in_empty_rooms() {
        let cfg = trial_cfg();
        let trials = 20;
        let mut better = 0;
        for s in 0..trials {
            let t = room_trial(100 + s);
            let spec = EnergySpec::with_defaults(t.goal_frame.clone()).unwrap();
            let res = cem_plan(&t.sim, &spec, &cfg, s).unwrap();
            let it = &res.trace[0];
            assert!(it.elite_mean_energy <= it.population_mean_energy);
            assert!(!res.all_violating);
            let prior = expand_endpoint(cfg.init_mean, cfg.steps, cfg.dt, Constraint::None).unwrap();
            better += (t.pose_error(&res.best.actions) < t.pose_error(&prior)) as usize;
        }
        assert!(better as f64 >= 0.8 * trials as f64, "{better}/{trials}");
    }

    #[test]
    fn cem_is_deterministic() {
        let t = room_trial(2);
        let spec = EnergySpec::with_defaults(t.goal_frame.clone()).unwrap();
        let cfg = CemConfig { population: 30, iterations: 2, ..trial_cfg() };
        assert_eq!(cem_plan(&t.sim, &spec, &cfg, 8).unwrap(), cem_plan(&t.sim, &spec, &cfg, 8).unwrap());
    }

    #[test]
    fn ranking_basics() {
        let (t, cands) = ranking_trial(3, 10, 0.25, 8, 0.25, 0.3, 8).unwrap();
        let spec = EnergySpec::with_defaults(t.goal_frame.clone()).unwrap();
        let single = rank_trajectories(&t.sim, &spec, &cands[..1], 0).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].actions, cands[0]);

        let mut pool = cands.clone();
        pool.insert(5, t.reference.clone());
        let ranked = rank_trajectories(&t.sim, &spec, &pool, 0).unwrap();
        assert_eq!(ranked[0].index, 5);
        assert!(ranked.windows(2).all(|w| w[0].energy <= w[1].energy));
        assert_eq!(ranked, rank_trajectories(&t.sim, &spec, &pool, 0).unwrap());
        assert!(rank_trajectories(&t.sim, &spec, &[], 0).is_err());

        // positive rescaling of energies keeps the order
        let mut scaled: Vec<(f64, usize)> = ranked.iter().map(|c| (c.energy * 3.7, c.index)).collect();
        scaled.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        assert_eq!(scaled.iter().map(|x| x.1).collect::<Vec<_>>(), ranked.iter().map(|c| c.index).collect::<Vec<_>>());
    }
}
