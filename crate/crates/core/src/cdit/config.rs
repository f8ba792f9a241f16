use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionConfig;
use crate::error::{Error, Result};

/// Block family: CDiT (target self-attention plus cross-attention to
/// context) or DiT (joint self-attention over context and target).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Cdit,
    Dit,
}

/// What the network output regresses: the clean target or the added noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    X,
    Eps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub context: usize,
    pub diffusion_steps: usize,
    pub num_frequencies: usize,
    pub use_action: bool,
    pub use_time: bool,
    pub prediction: Prediction,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Cdit,
            depth: 6,
            dim: 128,
            heads: 4,
            mlp_ratio: 4,
            patch_size: 4,
            height: 32,
            width: 32,
            channels: 3,
            context: 4,
            diffusion_steps: 100,
            num_frequencies: 8,
            use_action: true,
            use_time: true,
            prediction: Prediction::X,
        }
    }
}

impl ModelConfig {
    /// Tokens per frame.
    pub fn tokens(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    /// Channels per token before projection.
    pub fn latent_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }

    pub fn condition(&self) -> ConditionConfig {
        ConditionConfig {
            dim: self.dim,
            num_frequencies: self.num_frequencies,
            base: 1e4,
            diffusion_steps: self.diffusion_steps,
            use_action: self.use_action,
            use_time: self.use_time,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("model config: {m}")));
        if self.patch_size == 0 || self.height % self.patch_size != 0 || self.width % self.patch_size != 0 {
            return bad("frame size must be divisible by patch_size");
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return bad("frame dimensions must be positive");
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad("dim must be divisible by heads");
        }
        if self.dim % 4 != 0 {
            return bad("dim must be divisible by 4 for 2D positional embeddings");
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return bad("depth and mlp_ratio must be positive");
        }
        if self.context == 0 {
            return bad("context must be at least 1");
        }
        if self.diffusion_steps == 0 || self.num_frequencies == 0 {
            return bad("diffusion_steps and num_frequencies must be positive");
        }
        Ok(())
    }
}
