use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use super::perceptual::{Features, PerceptualScorer};
use crate::cdit::{LatentState, Model};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng;
use crate::rollout::rollout;
use crate::world::{render, step, Frame, NavAction, Pose, Resolution, WorldMap};

/// Final observation of a simulated action sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub frame: Frame,
    /// Known only for the ground-truth simulator.
    pub final_pose: Option<Pose>,
    /// Visited states outside the safe set.
    pub unsafe_states: usize,
}

/// Executes an action sequence from a fixed start; stochastic simulators use
/// `seed`.
pub trait Simulator: Sync {
    fn simulate(&self, actions: &[NavAction], seed: u64) -> Result<SimOutcome>;
}

/// Ground-truth environment. A step whose translation is blocked by a wall
/// counts as an unsafe state.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSim {
    pub map: WorldMap,
    pub start: Pose,
    pub resolution: Resolution,
}

impl OracleSim {
    pub fn final_pose(&self, actions: &[NavAction]) -> (Pose, usize) {
        let mut pose = self.start;
        let mut blocked = 0;
        for a in actions {
            let next = step(&self.map, &pose, a);
            if (a.u[0] != 0.0 || a.u[1] != 0.0) && next.x == pose.x && next.y == pose.y {
                blocked += 1;
            }
            pose = next;
        }
        (pose, blocked)
    }
}

impl Simulator for OracleSim {
    fn simulate(&self, actions: &[NavAction], _seed: u64) -> Result<SimOutcome> {
        let (pose, blocked) = self.final_pose(actions);
        Ok(SimOutcome { frame: render(&self.map, &pose, self.resolution)?, final_pose: Some(pose), unsafe_states: blocked })
    }
}

/// Learned world model rolled out from a fixed context.
#[derive(Debug, Clone)]
pub struct ModelSim<'a> {
    pub model: &'a Model,
    pub schedule: &'a NoiseSchedule,
    pub context: Vec<LatentState>,
    pub sample_steps: usize,
}

impl Simulator for ModelSim<'_> {
    fn simulate(&self, actions: &[NavAction], seed: u64) -> Result<SimOutcome> {
        let traj = rollout(self.model, self.schedule, &self.context, actions, self.sample_steps, seed)?;
        let frames = traj.frames(self.model)?;
        Ok(SimOutcome { frame: frames.into_iter().last().expect("non-empty"), final_pose: None, unsafe_states: 0 })
    }
}

/// Per-step bounds defining the valid action set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActionLimits {
    /// Largest translation norm per step, in step units.
    pub max_translation: f64,
    pub max_yaw: f64,
}

impl Default for ActionLimits {
    fn default() -> Self {
        ActionLimits { max_translation: 4.0, max_yaw: FRAC_PI_2 }
    }
}

impl ActionLimits {
    pub fn is_valid(&self, a: &NavAction) -> bool {
        a.u[0].hypot(a.u[1]) <= self.max_translation && a.phi.abs() <= self.max_yaw && a.u.iter().all(|v| v.is_finite())
    }
}

/// Goal-reaching energy: negative similarity of the final frame to the goal
/// plus a penalty per invalid action and per unsafe state, averaged over
/// `evals` simulations.
#[derive(Debug, Clone)]
pub struct EnergySpec {
    pub goal: Frame,
    goal_features: Features,
    pub scorer: PerceptualScorer,
    pub limits: ActionLimits,
    pub penalty: f64,
    pub evals: usize,
}

pub const DEFAULT_PENALTY: f64 = 100.0;

impl EnergySpec {
    pub fn new(goal: Frame, scorer: PerceptualScorer, limits: ActionLimits, penalty: f64, evals: usize) -> Result<Self> {
        if evals == 0 {
            return Err(Error::invalid("need at least one evaluation per candidate"));
        }
        if !(penalty > scorer.max_magnitude()) {
            return Err(Error::invalid(format!("penalty {penalty} must exceed the similarity bound {}", scorer.max_magnitude())));
        }
        let goal = goal.clamped();
        let goal_features = scorer.features(&goal)?;
        Ok(EnergySpec { goal, goal_features, scorer, limits, penalty, evals })
    }

    pub fn with_defaults(goal: Frame) -> Result<Self> {
        Self::new(goal, PerceptualScorer::default(), ActionLimits::default(), DEFAULT_PENALTY, 3)
    }

    /// Energy of one simulation with `seed`.
    pub fn energy_once(&self, sim: &dyn Simulator, actions: &[NavAction], seed: u64) -> Result<f64> {
        if actions.is_empty() {
            return Err(Error::invalid("energy of an empty action sequence"));
        }
        let out = sim.simulate(actions, seed)?;
        let s = self.scorer.score_features(&self.scorer.features(&out.frame.clamped())?, &self.goal_features)?;
        let invalid = actions.iter().filter(|a| !self.limits.is_valid(a)).count();
        Ok(-s + self.penalty * (invalid + out.unsafe_states) as f64)
    }

    /// Per-evaluation energies; evaluation `j` uses `eval_seed(seed, j)`.
    pub fn energies(&self, sim: &dyn Simulator, actions: &[NavAction], seed: u64) -> Result<Vec<f64>> {
        (0..self.evals).map(|j| self.energy_once(sim, actions, eval_seed(seed, j))).collect()
    }
}

pub fn eval_seed(seed: u64, j: usize) -> u64 {
    rng::indexed(rng::substream(seed, "eval"), j as u64)
}
