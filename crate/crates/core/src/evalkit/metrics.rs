use crate::error::{Error, Result};
use crate::world::Pose;

/// PSNR reported when the two images are identical.
pub const PSNR_CAP: f64 = 99.0;

/// Estimated and reference poses, time-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPair {
    pub estimate: Vec<Pose>,
    pub reference: Vec<Pose>,
}

impl TrajectoryPair {
    pub fn new(estimate: Vec<Pose>, reference: Vec<Pose>) -> Result<Self> {
        if estimate.len() != reference.len() {
            return Err(Error::invalid(format!("trajectory lengths differ: {} vs {}", estimate.len(), reference.len())));
        }
        if estimate.len() < 2 {
            return Err(Error::invalid("trajectories need at least two poses"));
        }
        Ok(TrajectoryPair { estimate, reference })
    }

    pub fn len(&self) -> usize {
        self.estimate.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimate.is_empty()
    }
}

/// RMS of pointwise position distances, without any alignment.
pub fn ate(pair: &TrajectoryPair) -> f64 {
    let sq: f64 = pair.estimate.iter().zip(&pair.reference).map(|(a, b)| (a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sum();
    (sq / pair.len() as f64).sqrt()
}

/// `a^-1 * b` in SE(2): `b` expressed in `a`'s frame.
pub fn relative(a: &Pose, b: &Pose) -> Pose {
    let [x, y] = a.local_offset(b);
    Pose::new(x, y, b.yaw - a.yaw)
}

/// Relative pose error over `delta`-step motions: RMS translation norm and
/// RMS wrapped angle of `rel_ref^-1 * rel_est`.
pub fn rpe(pair: &TrajectoryPair, delta: usize) -> Result<(f64, f64)> {
    if delta == 0 || delta >= pair.len() {
        return Err(Error::invalid(format!("rpe delta {delta} must be in [1, {})", pair.len())));
    }
    let count = pair.len() - delta;
    let (mut st, mut sr) = (0.0, 0.0);
    for i in 0..count {
        let e = relative(&pair.estimate[i], &pair.estimate[i + delta]);
        let r = relative(&pair.reference[i], &pair.reference[i + delta]);
        let err = relative(&r, &e);
        st += err.x * err.x + err.y * err.y;
        sr += err.yaw * err.yaw;
    }
    Ok(((st / count as f64).sqrt(), (sr / count as f64).sqrt()))
}

pub fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("mse", format!("{} vs {} values", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64)
}

/// `10 log10(max^2 / MSE)`, or [`PSNR_CAP`] when the MSE is zero.
pub fn psnr(a: &[f32], b: &[f32], max_value: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok(10.0 * (max_value * max_value / m).log10())
}

/// Poses of a constant-velocity straight-line walk along the initial
/// heading at the trajectory's mean step length.
pub fn forward_prediction(poses: &[Pose]) -> Vec<Pose> {
    let Some(start) = poses.first() else { return Vec::new() };
    let steps = poses.len().saturating_sub(1).max(1);
    let speed = poses.windows(2).map(|w| w[0].distance(&w[1])).sum::<f64>() / steps as f64;
    (0..poses.len()).map(|i| start.advance([speed * i as f64, 0.0], 0.0)).collect()
}

/// ATE of the constant-forward prediction against the real path.
pub fn forward_residual(poses: &[Pose]) -> Result<f64> {
    Ok(ate(&TrajectoryPair::new(forward_prediction(poses), poses.to_vec())?))
}

/// Ids of the `count` episodes least predictable by moving straight ahead
/// (highest forward-prediction ATE first, ties by id).
pub fn build_eval_set(episodes: &[(usize, &[Pose])], count: usize) -> Result<Vec<usize>> {
    if count > episodes.len() {
        return Err(Error::invalid(format!("requested {count} episodes from a pool of {}", episodes.len())));
    }
    let mut scored = episodes.iter().map(|(id, p)| Ok((*id, forward_residual(p)?))).collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().take(count).map(|(id, _)| id).collect())
}
