use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::energy::{EnergySpec, Simulator};
use crate::conditioning::compose_actions;
use crate::error::{Error, Result};
use crate::rng;
use crate::world::NavAction;

/// Hard-zero patterns on the expanded action sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Constraint {
    None,
    /// Forward-only steps, then lateral-only steps.
    ForwardFirst,
    /// Lateral-only steps, then forward-only steps.
    LeftRightFirst,
    /// A straight segment in any direction, then forward-only steps.
    StraightThenForward,
}

impl FromStr for Constraint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Constraint::None),
            "forward-first" => Ok(Constraint::ForwardFirst),
            "left-right-first" => Ok(Constraint::LeftRightFirst),
            "straight-then-forward" => Ok(Constraint::StraightThenForward),
            _ => Err(Error::invalid(format!("unknown constraint {s:?}"))),
        }
    }
}

impl Constraint {
    pub const ALL: [Constraint; 4] = [Constraint::None, Constraint::ForwardFirst, Constraint::LeftRightFirst, Constraint::StraightThenForward];

    /// Number of forward-phase steps out of `steps` (5 of 8).
    pub fn forward_steps(steps: usize) -> usize {
        (5 * steps).div_ceil(8).clamp(1, steps.saturating_sub(1).max(1))
    }

    /// Whether `actions` follows this pattern's hard zeros exactly.
    pub fn satisfied_by(&self, actions: &[NavAction]) -> bool {
        let n = actions.len();
        let f = Self::forward_steps(n);
        let yaw_ok = actions[..n.saturating_sub(1)].iter().all(|a| a.phi == 0.0);
        let pattern = match self {
            Constraint::None => true,
            Constraint::ForwardFirst => actions[..f].iter().all(|a| a.u[1] == 0.0) && actions[f..].iter().all(|a| a.u[0] == 0.0),
            Constraint::LeftRightFirst => actions[..n - f].iter().all(|a| a.u[0] == 0.0) && actions[n - f..].iter().all(|a| a.u[1] == 0.0),
            Constraint::StraightThenForward => {
                let head = &actions[..n - f];
                head.iter().all(|a| a.u == head[0].u) && actions[n - f..].iter().all(|a| a.u[1] == 0.0)
            }
        };
        yaw_ok && pattern
    }
}

/// Expands an endpoint `(dx, dy, phi)` into `steps` actions of duration `dt`
/// whose summed translation is `(dx, dy)`; the yaw is applied at the last
/// step.
pub fn expand_endpoint(endpoint: [f64; 3], steps: usize, dt: f64, constraint: Constraint) -> Result<Vec<NavAction>> {
    if steps == 0 {
        return Err(Error::invalid("steps must be at least 1"));
    }
    if constraint != Constraint::None && steps < 2 {
        return Err(Error::invalid("constrained expansions need at least 2 steps"));
    }
    let [dx, dy, phi] = endpoint;
    let f = Constraint::forward_steps(steps);
    let l = steps - f;
    let mut out: Vec<NavAction> = (0..steps)
        .map(|i| {
            let u = match constraint {
                Constraint::None => [dx / steps as f64, dy / steps as f64],
                Constraint::ForwardFirst if i < f => [dx / f as f64, 0.0],
                Constraint::ForwardFirst => [0.0, dy / l as f64],
                Constraint::LeftRightFirst if i < l => [0.0, dy / l as f64],
                Constraint::LeftRightFirst => [dx / f as f64, 0.0],
                Constraint::StraightThenForward if i < l => [dx / steps as f64, dy / l as f64],
                Constraint::StraightThenForward => [dx / steps as f64, 0.0],
            };
            NavAction { u, phi: 0.0, k: dt }
        })
        .collect();
    out[steps - 1].phi = crate::world::wrap_angle(phi);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CemConfig {
    pub population: usize,
    pub elite_fraction: f64,
    pub iterations: usize,
    pub init_mean: [f64; 3],
    pub init_var: [f64; 3],
    pub steps: usize,
    pub dt: f64,
    pub var_floor: f64,
    pub constraint: Constraint,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig {
            population: 120,
            elite_fraction: 0.1,
            iterations: 1,
            init_mean: [0.3, 0.0, 0.0],
            init_var: [0.05, 0.05, 0.1],
            steps: 8,
            dt: 0.25,
            var_floor: 1e-6,
            constraint: Constraint::None,
        }
    }
}

impl CemConfig {
    pub fn elites(&self) -> usize {
        ((self.elite_fraction * self.population as f64).round() as usize).clamp(1, self.population.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.population == 0 || self.iterations == 0 || self.steps == 0 {
            return Err(Error::invalid("population, iterations and steps must be positive"));
        }
        if !(self.elite_fraction > 0.0 && self.elite_fraction <= 1.0) {
            return Err(Error::invalid("elite_fraction must be in (0, 1]"));
        }
        if self.init_var.iter().any(|v| !(*v > 0.0)) || !(self.var_floor >= 0.0) || !(self.dt > 0.0) {
            return Err(Error::invalid("variances and dt must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrajectory {
    pub index: usize,
    pub endpoint: [f64; 3],
    pub actions: Vec<NavAction>,
    pub energy: f64,
    pub evals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CemIteration {
    pub mean: [f64; 3],
    pub var: [f64; 3],
    pub population_mean_energy: f64,
    pub elite_mean_energy: f64,
    pub best_energy: f64,
    /// Mean and variance refit from this iteration's elites.
    pub next_mean: [f64; 3],
    pub next_var: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CemResult {
    pub best: ScoredTrajectory,
    pub trace: Vec<CemIteration>,
    /// Every candidate violated a constraint; `best` is still the minimum.
    pub all_violating: bool,
}

/// Seed of candidate `i` in iteration `it`.
pub fn candidate_seed(seed: u64, it: usize, i: usize) -> u64 {
    rng::indexed(rng::indexed(seed, it as u64), i as u64)
}

fn score(sim: &dyn Simulator, spec: &EnergySpec, index: usize, endpoint: [f64; 3], actions: Vec<NavAction>, seed: u64) -> Result<ScoredTrajectory> {
    let evals = spec.energies(sim, &actions, seed)?;
    let energy = evals.iter().sum::<f64>() / evals.len() as f64;
    Ok(ScoredTrajectory { index, endpoint, actions, energy, evals })
}

fn by_energy(a: &ScoredTrajectory, b: &ScoredTrajectory) -> std::cmp::Ordering {
    a.energy.total_cmp(&b.energy).then(a.index.cmp(&b.index))
}

/// Cross-entropy method over straight-line endpoints. Candidates are
/// evaluated in parallel with seeds derived from their index.
pub fn cem_plan(sim: &dyn Simulator, spec: &EnergySpec, cfg: &CemConfig, seed: u64) -> Result<CemResult> {
    cfg.validate()?;
    let (mut mean, mut var) = (cfg.init_mean, cfg.init_var);
    let mut best: Option<ScoredTrajectory> = None;
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut any_valid = false;
    for it in 0..cfg.iterations {
        let mut pop = (0..cfg.population)
            .into_par_iter()
            .map(|i| {
                let s = candidate_seed(seed, it, i);
                let mut r = rng::from_seed(s);
                let mut e = [0.0; 3];
                for d in 0..3 {
                    let z: f64 = StandardNormal.sample(&mut r);
                    e[d] = mean[d] + var[d].sqrt() * z;
                }
                let actions = expand_endpoint(e, cfg.steps, cfg.dt, cfg.constraint)?;
                score(sim, spec, it * cfg.population + i, e, actions, s)
            })
            .collect::<Result<Vec<_>>>()?;
        any_valid |= pop.iter().any(|c| c.energy < spec.penalty);
        let population_mean_energy = pop.iter().map(|c| c.energy).sum::<f64>() / pop.len() as f64;
        pop.sort_by(by_energy);
        let mut elites = pop[..cfg.elites()].to_vec();
        elites.sort_by_key(|c| c.index);
        let ne = elites.len() as f64;
        let elite_mean_energy = elites.iter().map(|c| c.energy).sum::<f64>() / ne;
        let mut next_mean = [0.0; 3];
        let mut next_var = [0.0; 3];
        for d in 0..3 {
            next_mean[d] = elites.iter().map(|c| c.endpoint[d]).sum::<f64>() / ne;
            next_var[d] = (elites.iter().map(|c| (c.endpoint[d] - next_mean[d]).powi(2)).sum::<f64>() / ne).max(cfg.var_floor);
        }
        trace.push(CemIteration { mean, var, population_mean_energy, elite_mean_energy, best_energy: pop[0].energy, next_mean, next_var });
        if best.as_ref().is_none_or(|b| by_energy(&pop[0], b).is_lt()) {
            best = Some(pop[0].clone());
        }
        (mean, var) = (next_mean, next_var);
    }
    Ok(CemResult { best: best.expect("at least one iteration"), trace, all_violating: !any_valid })
}

/// Scores candidate action sequences and returns them by ascending energy,
/// ties broken by index.
pub fn rank_trajectories(sim: &dyn Simulator, spec: &EnergySpec, candidates: &[Vec<NavAction>], seed: u64) -> Result<Vec<ScoredTrajectory>> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidates to rank"));
    }
    let mut scored = candidates
        .par_iter()
        .enumerate()
        .map(|(i, acts)| {
            let c = compose_actions(acts)?;
            score(sim, spec, i, [c.u[0], c.u[1], c.phi], acts.clone(), rng::indexed(seed, i as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(by_energy);
    Ok(scored)
}
