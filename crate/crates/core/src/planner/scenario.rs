use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::cem::{expand_endpoint, CemConfig, Constraint};
use super::energy::OracleSim;
use crate::error::Result;
use crate::rng;
use crate::world::{expert_policy, render, step, Frame, NavAction, Pose, Resolution, WorldMap};

/// Goal-reaching problem in the ground-truth environment.
#[derive(Debug, Clone)]
pub struct PlanningTrial {
    pub sim: OracleSim,
    pub goal_pose: Pose,
    pub goal_frame: Frame,
    /// Action sequence that reaches the goal.
    pub reference: Vec<NavAction>,
}

impl PlanningTrial {
    /// Final position error of an action sequence.
    pub fn pose_error(&self, actions: &[NavAction]) -> f64 {
        self.sim.final_pose(actions).0.distance(&self.goal_pose)
    }
}

/// Empty square room of `size` cells; the start sits near the centre with a
/// random heading and the goal endpoint is drawn from the planner prior
/// `N(cfg.init_mean, cfg.init_var)`.
pub fn empty_room_trial(seed: u64, size: usize, step_size: f64, cfg: &CemConfig) -> Result<PlanningTrial> {
    let map = WorldMap::empty_room(size, step_size);
    let mut r = rng::stream(seed, "trial");
    let c = size as f64 / 2.0;
    let start = Pose::new(c + r.random_range(-0.5..0.5), c + r.random_range(-0.5..0.5), r.random_range(-std::f64::consts::PI..std::f64::consts::PI));
    let mut endpoint = [0.0; 3];
    for d in 0..3 {
        let z: f64 = StandardNormal.sample(&mut r);
        endpoint[d] = cfg.init_mean[d] + cfg.init_var[d].sqrt() * z;
    }
    let reference = expand_endpoint(endpoint, cfg.steps, cfg.dt, Constraint::None)?;
    let sim = OracleSim { map, start, resolution: Resolution::default() };
    let (goal_pose, _) = sim.final_pose(&reference);
    let goal_frame = render(&sim.map, &goal_pose, sim.resolution)?;
    Ok(PlanningTrial { sim, goal_pose, goal_frame, reference })
}

/// Rolls the expert toward `target` for `steps` steps, returning its actions.
pub fn expert_actions<R: Rng + ?Sized>(map: &WorldMap, start: &Pose, target: &Pose, noise: f64, steps: usize, dt: f64, rng: &mut R) -> Result<Vec<NavAction>> {
    let mut pose = *start;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let a = expert_policy(map, &pose, target, noise, dt, rng)?;
        pose = step(map, &pose, &a);
        out.push(a);
    }
    Ok(out)
}

/// Ranking problem: the reference is the noise-free expert heading to a
/// random target for `steps` steps; candidates are `pool` noisy expert runs
/// toward the same target.
pub fn ranking_trial(seed: u64, size: usize, step_size: f64, steps: usize, dt: f64, noise: f64, pool: usize) -> Result<(PlanningTrial, Vec<Vec<NavAction>>)> {
    let map = WorldMap::empty_room(size, step_size);
    let mut r = rng::stream(seed, "ranking");
    let lo = 1.5;
    let hi = size as f64 - 1.5;
    let start = Pose::new(r.random_range(lo..hi), r.random_range(lo..hi), r.random_range(-std::f64::consts::PI..std::f64::consts::PI));
    let target = loop {
        let t = Pose::new(r.random_range(lo..hi), r.random_range(lo..hi), 0.0);
        if t.distance(&start) > 1.0 {
            break t;
        }
    };
    let reference = expert_actions(&map, &start, &target, 0.0, steps, dt, &mut r)?;
    let sim = OracleSim { map, start, resolution: Resolution::default() };
    let (goal_pose, _) = sim.final_pose(&reference);
    let goal_frame = render(&sim.map, &goal_pose, sim.resolution)?;
    let candidates = (0..pool)
        .map(|i| expert_actions(&sim.map, &start, &target, noise, steps, dt, &mut rng::from_seed(rng::indexed(seed, i as u64))))
        .collect::<Result<Vec<_>>>()?;
    Ok((PlanningTrial { sim, goal_pose, goal_frame, reference }, candidates))
}
