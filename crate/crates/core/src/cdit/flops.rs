//! Closed-form multiply-add counts for one forward pass.
//!
//! "Attention" below means the two core products (`Q K^T` and `P V`); the
//! Q/K/V/O projections are reported separately.

use serde::Serialize;

use super::config::{ModelConfig, Variant};

/// Per-sublayer multiply-adds for a batch of `batch` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct BlockFlops {
    pub self_attn_core: u64,
    pub self_attn_proj: u64,
    pub cross_attn_core: u64,
    pub cross_attn_proj: u64,
    pub mlp: u64,
    pub modulation: u64,
}

impl BlockFlops {
    pub fn total(&self) -> u64 {
        self.self_attn_core + self.self_attn_proj + self.cross_attn_core + self.cross_attn_proj + self.mlp + self.modulation
    }

    pub fn attention_core(&self) -> u64 {
        self.self_attn_core + self.cross_attn_core
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct FlopBreakdown {
    pub per_block: BlockFlops,
    pub depth: u64,
    pub embed: u64,
    pub condition: u64,
    pub final_layer: u64,
}

impl FlopBreakdown {
    pub fn blocks_total(&self) -> u64 {
        self.per_block.total() * self.depth
    }

    /// Core attention products over all blocks.
    pub fn attention(&self) -> u64 {
        self.per_block.attention_core() * self.depth
    }

    /// Attention including Q/K/V/O projections over all blocks.
    pub fn attention_with_projections(&self) -> u64 {
        (self.per_block.attention_core() + self.per_block.self_attn_proj + self.per_block.cross_attn_proj) * self.depth
    }

    pub fn total(&self) -> u64 {
        self.blocks_total() + self.embed + self.condition + self.final_layer
    }
}

/// Counts for `config` (its `context` may be 0 here) with `batch` rows.
/// `action_terms` says whether the translation and yaw embeddings run.
pub fn count_flops(config: &ModelConfig, batch: usize, action_terms: bool) -> FlopBreakdown {
    let b = batch as u64;
    let n = config.tokens() as u64;
    let m = config.context as u64;
    let d = config.dim as u64;
    let dl = config.latent_dim() as u64;
    let hidden = config.mlp_ratio as u64 * d;
    let per_block = match config.variant {
        Variant::Cdit => BlockFlops {
            self_attn_core: b * 2 * n * n * d,
            self_attn_proj: b * 4 * n * d * d,
            cross_attn_core: b * 2 * n * (m * n) * d,
            cross_attn_proj: b * (2 * n * d * d + 2 * m * n * d * d),
            mlp: b * 2 * n * d * hidden,
            modulation: b * d * 9 * d,
        },
        Variant::Dit => {
            let l = (m + 1) * n;
            BlockFlops {
                self_attn_core: b * 2 * l * l * d,
                self_attn_proj: b * 4 * l * d * d,
                cross_attn_core: 0,
                cross_attn_proj: 0,
                mlp: b * 2 * l * d * hidden,
                modulation: b * d * 6 * d,
            }
        }
    };
    let f2 = 2 * config.num_frequencies as u64;
    let mut condition = 0;
    let mlp_cost = |width: u64| b * (width * d + d * d);
    if action_terms && config.use_action {
        condition += mlp_cost(2 * f2) + mlp_cost(f2);
    }
    if config.use_time {
        condition += mlp_cost(f2);
    }
    condition += mlp_cost(f2);
    FlopBreakdown {
        per_block,
        depth: config.depth as u64,
        embed: b * (m + 1) * n * dl * d,
        condition,
        final_layer: b * (d * 2 * d + n * d * dl),
    }
}

/// Least-squares polynomial fit of `ys` on `xs` (degree 1 or 2); returns R².
pub fn polyfit_r2(xs: &[f64], ys: &[f64], degree: usize) -> f64 {
    let k = degree + 1;
    // Normal equations A^T A c = A^T y, solved by Gaussian elimination.
    let mut ata = vec![vec![0.0; k]; k];
    let mut aty = vec![0.0; k];
    for (&x, &y) in xs.iter().zip(ys) {
        let row: Vec<f64> = (0..k).map(|p| x.powi(p as i32)).collect();
        for i in 0..k {
            aty[i] += row[i] * y;
            for j in 0..k {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    for col in 0..k {
        let piv = (col..k).max_by(|&a, &b| ata[a][col].abs().total_cmp(&ata[b][col].abs())).unwrap();
        ata.swap(col, piv);
        aty.swap(col, piv);
        for r in 0..k {
            if r != col {
                let f = ata[r][col] / ata[col][col];
                for c in col..k {
                    ata[r][c] -= f * ata[col][c];
                }
                aty[r] -= f * aty[col];
            }
        }
    }
    let coef: Vec<f64> = (0..k).map(|i| aty[i] / ata[i][i]).collect();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let pred: f64 = coef.iter().enumerate().map(|(p, c)| c * x.powi(p as i32)).sum();
        ss_res += (y - pred).powi(2);
        ss_tot += (y - mean).powi(2);
    }
    if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    }
}
