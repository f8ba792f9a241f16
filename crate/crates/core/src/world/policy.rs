//! Scripted expert: follows the BFS shortest path with turn-then-move
//! steering, optionally perturbed by Gaussian noise.

use std::f64::consts::FRAC_PI_4;

use rand::Rng;
use rand_distr::StandardNormal;

use super::map::WorldMap;
use super::pose::{wrap_angle, NavAction, Pose};
use crate::error::{Error, Result};

/// Agent radius used for wall-stop checks.
pub const AGENT_RADIUS: f64 = 0.12;
/// Distance at which a goal counts as reached.
pub const GOAL_TOLERANCE: f64 = 0.3;
/// Largest heading error corrected while still moving forward.
const MOVE_AND_TURN_LIMIT: f64 = FRAC_PI_4;
const MAX_TURN: f64 = FRAC_PI_4;

/// Applies `action` to `pose` in `map`. Translation is scaled by the map's
/// step size; a translation ending within `AGENT_RADIUS` of a wall is
/// dropped (wall-stop) while the rotation still happens.
pub fn step(map: &WorldMap, pose: &Pose, action: &NavAction) -> Pose {
    let s = map.average_step_size;
    let moved = pose.advance([action.u[0] * s, action.u[1] * s], 0.0);
    let base = if map.is_clear(moved.x, moved.y, AGENT_RADIUS) { moved } else { *pose };
    Pose::new(base.x, base.y, pose.yaw + action.phi)
}

/// Expert action from `pose` toward `goal`. `dt` is the action's time shift.
pub fn expert_policy<R: Rng + ?Sized>(
    map: &WorldMap,
    pose: &Pose,
    goal: &Pose,
    noise_level: f64,
    dt: f64,
    rng: &mut R,
) -> Result<NavAction> {
    let from = map.cell_of(pose).ok_or(Error::InsideWall { x: pose.x, y: pose.y })?;
    let to = map.cell_of(goal).ok_or(Error::InsideWall { x: goal.x, y: goal.y })?;
    let path = map.bfs_path(from, to).ok_or(Error::Unreachable)?;
    let dist_goal = pose.distance(goal);
    let mut action = if dist_goal < GOAL_TOLERANCE {
        NavAction::zero(dt)
    } else {
        let (wx, wy) = if path.len() <= 1 {
            (goal.x, goal.y)
        } else {
            (path[1].0 as f64 + 0.5, path[1].1 as f64 + 0.5)
        };
        let bearing = wrap_angle((wy - pose.y).atan2(wx - pose.x) - pose.yaw);
        let dist = (wx - pose.x).hypot(wy - pose.y);
        if bearing.abs() > MOVE_AND_TURN_LIMIT {
            NavAction::new([0.0, 0.0], bearing.clamp(-MAX_TURN, MAX_TURN), dt)
        } else {
            let forward = dist.min(map.average_step_size) / map.average_step_size;
            NavAction::new([forward, 0.0], bearing, dt)
        }
    };
    if noise_level > 0.0 {
        let n: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        action.u[0] += noise_level * n[0];
        action.u[1] += noise_level * n[1];
        action.phi = wrap_angle(action.phi + noise_level * n[2]);
    }
    Ok(action)
}

/// Rolls the expert for up to `max_steps`, stopping once the goal is
/// reached. Returns the visited poses (including the start).
pub fn run_expert<R: Rng + ?Sized>(
    map: &WorldMap,
    start: &Pose,
    goal: &Pose,
    noise_level: f64,
    dt: f64,
    max_steps: usize,
    rng: &mut R,
) -> Result<Vec<Pose>> {
    let mut poses = vec![*start];
    let mut pose = *start;
    for _ in 0..max_steps {
        if pose.distance(goal) < GOAL_TOLERANCE {
            break;
        }
        let a = expert_policy(map, &pose, goal, noise_level, dt, rng)?;
        pose = step(map, &pose, &a);
        poses.push(pose);
    }
    Ok(poses)
}
