//! Command implementations behind the `nwm` binary: dataset generation,
//! training, rollouts, planning, ranking, evaluation and FLOP benchmarks.
//! Every command writes its resolved [`RunConfig`] next to its outputs and
//! stamps the config hash into each artifact.

pub mod commands;
pub mod config;

pub use commands::{bench, eval, gen_data, load_model, plan, rank, read_plan, rollout_episode, train, PlanMode};
pub use config::{output_dir, RunConfig, OUTPUT_ROOT_ENV};
