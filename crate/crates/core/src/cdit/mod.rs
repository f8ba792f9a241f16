//! Conditional diffusion transformer: patch latents, CDiT and DiT blocks,
//! the full denoiser, FLOP accounting and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod flops;
pub mod latent;
pub mod model;

pub use checkpoint::{canonical_json, load_checkpoint, save_checkpoint};
pub use config::{ModelConfig, Prediction, Variant};
pub use flops::{count_flops, polyfit_r2, BlockFlops, FlopBreakdown};
pub use latent::{decode, encode, LatentState};
pub use model::{cdit_block, dit_block, forward, init_params, stack_context, Model, ModelInput};
