use rand::Rng;

use super::map::{generate_map, MapParams, WorldMap};
use super::policy::{expert_policy, step, GOAL_TOLERANCE};
use super::pose::{wrap_angle, NavAction, Pose};
use super::render::{render, Frame, Resolution};
use crate::error::{Error, Result};
use crate::rng;

/// A rendered trajectory: `frames[i]` is the view from `poses[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: usize,
    pub seed: u64,
    pub map_seed: u64,
    pub fps: f64,
    pub frames: Vec<Frame>,
    pub poses: Vec<Pose>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Per-step actions relative to `average_step_size`.
    pub fn actions(&self, average_step_size: f64) -> Result<Vec<NavAction>> {
        derive_actions(&self.poses, self.fps, average_step_size)
    }
}

/// Actions as pose deltas: translation in the earlier pose's frame divided
/// by `average_step_size`, wrapped yaw change, and `k = 1 / fps`.
pub fn derive_actions(poses: &[Pose], fps: f64, average_step_size: f64) -> Result<Vec<NavAction>> {
    if poses.len() < 2 {
        return Err(Error::invalid("need at least two poses"));
    }
    if !(average_step_size > 0.0) {
        return Err(Error::invalid("average_step_size must be positive"));
    }
    if !(fps > 0.0) {
        return Err(Error::invalid("fps must be positive"));
    }
    Ok(poses
        .windows(2)
        .map(|w| {
            let off = w[0].local_offset(&w[1]);
            NavAction::new(
                [off[0] / average_step_size, off[1] / average_step_size],
                wrap_angle(w[1].yaw - w[0].yaw),
                1.0 / fps,
            )
        })
        .collect())
}

/// Re-applies actions from `start`, undoing the step-size normalization.
pub fn integrate_actions(start: &Pose, actions: &[NavAction], average_step_size: f64) -> Vec<Pose> {
    let mut poses = Vec::with_capacity(actions.len() + 1);
    poses.push(*start);
    let mut p = *start;
    for a in actions {
        p = p.advance([a.u[0] * average_step_size, a.u[1] * average_step_size], a.phi);
        poses.push(p);
    }
    poses
}

/// Mean displacement between consecutive poses over all trajectories.
pub fn mean_step_size<'a>(trajectories: impl IntoIterator<Item = &'a [Pose]>) -> f64 {
    let (mut total, mut count) = (0.0, 0usize);
    for poses in trajectories {
        for w in poses.windows(2) {
            total += w[0].distance(&w[1]);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Longest run of poses whose consecutive steps never move backward.
/// Ties keep the earliest run.
pub fn longest_forward_segment(poses: &[Pose]) -> std::ops::Range<usize> {
    let mut best = 0..poses.len().min(1);
    let mut start = 0;
    for i in 1..poses.len() {
        let backward = poses[i - 1].local_offset(&poses[i])[0] < 0.0;
        if backward {
            start = i;
        }
        if i + 1 - start > best.len() {
            best = start..i + 1;
        }
    }
    best
}

/// Knobs for one simulated episode.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeParams {
    pub length: usize,
    pub fps: f64,
    pub noise_level: f64,
    pub resolution: Resolution,
    pub map: MapParams,
}

impl Default for EpisodeParams {
    fn default() -> Self {
        EpisodeParams { length: 24, fps: 4.0, noise_level: 0.1, resolution: Resolution::default(), map: MapParams::default() }
    }
}

fn random_free_pose<R: Rng + ?Sized>(map: &WorldMap, rng: &mut R) -> Pose {
    let free = map.free_cells();
    let c = free[rng.random_range(0..free.len())];
    Pose::new(c.0 as f64 + 0.5, c.1 as f64 + 0.5, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
}

/// Simulates the noisy expert on the map for `map_seed` and keeps the
/// longest backward-free segment (at least two poses).
pub fn simulate_episode(id: usize, seed: u64, map_seed: u64, params: &EpisodeParams) -> Result<Episode> {
    let map = generate_map(map_seed, &params.map);
    let dt = 1.0 / params.fps;
    for attempt in 0..16u64 {
        let mut r = rng::from_seed(rng::indexed(seed, attempt));
        let mut pose = random_free_pose(&map, &mut r);
        let mut goal = random_free_pose(&map, &mut r);
        let mut poses = vec![pose];
        while poses.len() < params.length {
            if pose.distance(&goal) < GOAL_TOLERANCE {
                goal = random_free_pose(&map, &mut r);
                continue;
            }
            let a = expert_policy(&map, &pose, &goal, params.noise_level, dt, &mut r)?;
            pose = step(&map, &pose, &a);
            poses.push(pose);
        }
        let keep = longest_forward_segment(&poses);
        if keep.len() < 2 {
            continue;
        }
        let poses = poses[keep].to_vec();
        let frames = poses.iter().map(|p| render(&map, p, params.resolution)).collect::<Result<Vec<_>>>()?;
        return Ok(Episode { id, seed, map_seed, fps: params.fps, frames, poses });
    }
    Err(Error::invalid(format!("episode {id}: no forward segment after 16 attempts")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn stationary_pair_is_zero_action() {
        let p = Pose::new(1.0, 2.0, 0.4);
        let a = derive_actions(&[p, p], 4.0, 0.5).unwrap();
        assert_eq!(a[0].u, [0.0, 0.0]);
        assert_eq!(a[0].phi, 0.0);
        assert_eq!(a[0].k, 0.25);
    }

    #[test]
    fn forward_half_meter_is_unit_action() {
        let a = derive_actions(&[Pose::new(0.0, 0.0, 0.0), Pose::new(0.5, 0.0, 0.0)], 4.0, 0.5).unwrap();
        assert_eq!(a[0].u, [1.0, 0.0]);
    }

    #[test]
    fn derive_rejects_bad_inputs() {
        let p = Pose::new(0.0, 0.0, 0.0);
        assert!(derive_actions(&[p], 4.0, 0.5).is_err());
        assert!(derive_actions(&[p, p], 4.0, 0.0).is_err());
    }

    #[test]
    fn square_loop_returns_to_start() {
        let mut poses = vec![Pose::new(1.0, 1.0, 0.0)];
        for _ in 0..4 {
            let p = *poses.last().unwrap();
            poses.push(p.advance([2.0, 0.0], 0.0));
            let p = *poses.last().unwrap();
            poses.push(Pose::new(p.x, p.y, p.yaw + FRAC_PI_2));
        }
        let actions = derive_actions(&poses, 4.0, 0.5).unwrap();
        let end = crate::conditioning::compose_se2(&actions).unwrap();
        assert!(end.u[0].abs() < 1e-9 && end.u[1].abs() < 1e-9);
        assert!(end.phi.abs() < 1e-9);
    }

    #[test]
    fn integration_reconstructs_poses() {
        let params = EpisodeParams { length: 16, ..Default::default() };
        let ep = simulate_episode(0, 11, 4, &params).unwrap();
        let s = 0.25;
        let actions = ep.actions(s).unwrap();
        let rebuilt = integrate_actions(&ep.poses[0], &actions, s);
        for (a, b) in rebuilt.iter().zip(&ep.poses) {
            assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
            assert!(wrap_angle(a.yaw - b.yaw).abs() < 1e-9);
        }
        assert!(actions.iter().all(|a| a.u[0] >= 0.0));
    }

    #[test]
    fn forward_segment_selection() {
        let p = |x: f64| Pose::new(x, 0.0, 0.0);
        let poses = [p(0.0), p(1.0), p(0.5), p(1.0), p(2.0), p(3.0), p(2.0)];
        assert_eq!(longest_forward_segment(&poses), 2..6);
    }
}
