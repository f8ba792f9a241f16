//! Procedural grid world: maps, raycast rendering, a scripted expert and
//! episode datasets.

pub mod dataset;
pub mod episode;
pub mod map;
pub mod policy;
pub mod pose;
pub mod render;

pub use dataset::{generate_dataset, generate_episodes, write_dir_atomic, write_file_atomic, Dataset, Manifest};
pub use episode::{derive_actions, integrate_actions, simulate_episode, Episode, EpisodeParams};
pub use map::{generate_map, MapParams, WorldMap};
pub use policy::{expert_policy, run_expert, step, AGENT_RADIUS, GOAL_TOLERANCE};
pub use pose::{wrap_angle, NavAction, Pose, T_MAX, T_MIN};
pub use render::{render, Frame, Resolution};
