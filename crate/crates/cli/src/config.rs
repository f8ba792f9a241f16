use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use nwm::cdit::{canonical_json, ModelConfig};
use nwm::diffusion::{AdamWConfig, TrainConfig};
use nwm::planner::{ActionLimits, CemConfig, DEFAULT_PENALTY};
use nwm::rng;
use nwm::world::{EpisodeParams, MapParams, Resolution};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "NWM_OUTPUT_ROOT";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub episodes: usize,
    /// Poses simulated per episode before trimming to the longest
    /// forward-only segment.
    pub length: usize,
    pub fps: f64,
    pub noise_level: f64,
    pub height: usize,
    pub width: usize,
    pub map_width: usize,
    pub map_height: usize,
    pub wall_density: f64,
    pub step_size: f64,
    pub num_maps: usize,
    /// Share of episodes held out for validation during training.
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            episodes: 200,
            length: 24,
            fps: 4.0,
            noise_level: 0.1,
            height: 32,
            width: 32,
            map_width: 12,
            map_height: 12,
            wall_density: 0.18,
            step_size: 0.25,
            num_maps: 8,
            val_fraction: 0.1,
        }
    }
}

impl DataConfig {
    pub fn episode_params(&self) -> EpisodeParams {
        EpisodeParams {
            length: self.length,
            fps: self.fps,
            noise_level: self.noise_level,
            resolution: Resolution { height: self.height, width: self.width },
            map: self.map_params(),
        }
    }

    pub fn map_params(&self) -> MapParams {
        MapParams { width: self.map_width, height: self.map_height, wall_density: self.wall_density, step_size: self.step_size }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub cem: CemConfig,
    pub evals_per_candidate: usize,
    pub penalty: f64,
    pub lambda: f64,
    pub limits: ActionLimits,
    /// Side of the empty room used by oracle trials.
    pub room_size: usize,
    pub trials: usize,
    /// Diffusion sampling steps per predicted frame in model mode.
    pub sample_steps: usize,
    /// Candidate pool and expert noise for ranking trials.
    pub pool: usize,
    pub rank_noise: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            cem: CemConfig::default(),
            evals_per_candidate: 3,
            penalty: DEFAULT_PENALTY,
            lambda: 0.8,
            limits: ActionLimits::default(),
            room_size: 6,
            trials: 10,
            sample_steps: 10,
            pool: 16,
            rank_noise: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Prediction horizons in seconds.
    pub horizons: Vec<f64>,
    pub episodes: usize,
    pub sample_steps: usize,
    pub rpe_delta: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { horizons: vec![1.0, 2.0, 4.0], episodes: 50, sample_steps: 10, rpe_delta: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub contexts: Vec<usize>,
    /// Tokens per frame; must be a square number of patches.
    pub tokens: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { contexts: vec![1, 2, 4, 8], tokens: 64, dim: 128, depth: 1, heads: 4, repeats: 3 }
    }
}

/// Every knob of an experiment. Derived seeds all come from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub planner: PlannerConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig { depth: 2, dim: 64, heads: 4, mlp_ratio: 2, context: 2, ..ModelConfig::default() },
            train: TrainConfig { optimizer: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() }, ..TrainConfig::default() },
            planner: PlannerConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses JSON, rejecting unknown keys.
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Fills derived fields and checks cross-field consistency.
    pub fn resolve(mut self) -> anyhow::Result<Self> {
        self.model.height = self.data.height;
        self.model.width = self.data.width;
        self.train.seed = self.stream("train");
        self.model.validate()?;
        self.planner.cem.validate()?;
        if self.data.num_maps == 0 || self.data.episodes == 0 {
            bail!("data.episodes and data.num_maps must be positive");
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            bail!("data.val_fraction must be in [0, 1)");
        }
        if self.eval.horizons.iter().any(|h| !(*h * self.data.fps >= 1.0)) {
            bail!("every eval horizon must cover at least one frame");
        }
        Ok(self)
    }

    /// Seed of a named sub-stream of the global seed.
    pub fn stream(&self, name: &str) -> u64 {
        rng::substream(self.seed, name)
    }

    pub fn map_seeds(&self) -> Vec<u64> {
        let base = self.stream("maps");
        (0..self.data.num_maps as u64).map(|i| rng::indexed(base, i)).collect()
    }

    pub fn canonical(&self) -> anyhow::Result<String> {
        Ok(canonical_json(self)?)
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> anyhow::Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical()?.as_bytes())))
    }

    /// Pretty JSON written next to every output.
    pub fn to_pretty(&self) -> anyhow::Result<String> {
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string_pretty(&value)? + "\n")
    }
}

/// `explicit`, else `$NWM_OUTPUT_ROOT/<name>`.
pub fn output_dir(explicit: Option<&Path>, name: &str) -> anyhow::Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => Ok(PathBuf::from(root).join(name)),
        _ => bail!("no output path: pass --out or set {OUTPUT_ROOT_ENV}"),
    }
}
