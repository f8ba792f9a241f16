//! Trajectory metrics (ATE, RPE), PSNR, evaluation-set selection,
//! aggregate statistics and CSV/SVG reports.

mod metrics;
mod report;
mod stats;

pub use metrics::{ate, build_eval_set, forward_prediction, forward_residual, mse, psnr, relative, rpe, TrajectoryPair, PSNR_CAP};
pub use report::{MetricSeries, Report};
pub use stats::{mean_std, paired_t_test, PairedTest};

use crate::error::Result;
use crate::world::Dataset;

/// [`build_eval_set`] over a dataset's episode poses.
pub fn build_eval_set_from(dataset: &Dataset, count: usize) -> Result<Vec<usize>> {
    let pool: Vec<(usize, &[crate::world::Pose])> = dataset.episodes.iter().map(|e| (e.id, e.poses.as_slice())).collect();
    build_eval_set(&pool, count)
}
