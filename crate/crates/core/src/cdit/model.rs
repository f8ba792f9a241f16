use rand::Rng;

use super::config::{ModelConfig, Variant};
use super::latent::LatentState;
use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::conditioning::{Condition, ConditionEmbedder};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};

pub(crate) const LN_EPS: f64 = 1e-6;

/// Fixed 2D sin-cos embedding `[gh * gw, d]`: the first half of each row
/// encodes the grid row, the second half the grid column.
pub fn pos_embed_2d(gh: usize, gw: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = Vec::with_capacity(gh * gw * d);
    for r in 0..gh {
        for c in 0..gw {
            out.extend(sincos_1d(r as f64, half));
            out.extend(sincos_1d(c as f64, half));
        }
    }
    out
}

/// `[sin(p w_i)..., cos(p w_i)...]` with `w_i = 10000^(-i / (d/2))`.
fn sincos_1d(pos: f64, d: usize) -> Vec<f64> {
    let q = d / 2;
    let mut v = vec![0.0; d];
    for i in 0..q {
        let w = 10000f64.powf(-(i as f64) / q as f64);
        v[i] = (pos * w).sin();
        v[q + i] = (pos * w).cos();
    }
    v
}

/// Fixed embedding of context slot `j` (oldest first), `[m, d]`.
pub fn slot_embed(m: usize, d: usize) -> Vec<f64> {
    (0..m).flat_map(|j| sincos_1d(j as f64 + 1.0, d)).collect()
}

/// Stacks context frames (oldest first) into `[m * n * d_latent]`. Shorter
/// histories are padded by repeating the earliest frame.
pub fn stack_context(frames: &[LatentState], config: &ModelConfig) -> Result<Vec<f32>> {
    let m = config.context;
    if frames.is_empty() {
        return Err(Error::invalid("context needs at least one frame"));
    }
    if frames.len() > m {
        return Err(Error::invalid(format!("context of {} frames exceeds m = {m}", frames.len())));
    }
    let (n, dl) = (config.tokens(), config.latent_dim());
    let mut out = Vec::with_capacity(m * n * dl);
    for i in 0..m {
        let f = &frames[i.saturating_sub(m - frames.len())];
        if f.tokens != n || f.dim != dl {
            return Err(Error::shape("context", format!("frame {}x{} vs {n}x{dl}", f.tokens, f.dim)));
        }
        out.extend_from_slice(&f.data);
    }
    Ok(out)
}

fn mod_chunks(variant: Variant) -> usize {
    match variant {
        Variant::Cdit => 9,
        Variant::Dit => 6,
    }
}

/// Fresh parameters. Modulation layers and the output projection start at
/// zero, so every block is the identity and the output is zero.
pub fn init_params<E: Real, R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<ParamStore<E>> {
    config.validate()?;
    let (d, dl) = (config.dim, config.latent_dim());
    let mut p = ParamStore::new();
    p.insert_linear("embed.in", dl, d, rng)?;
    ConditionEmbedder::new(config.condition()).init_params(&mut p, rng)?;
    for i in 0..config.depth {
        let b = format!("blocks.{i}");
        p.insert_linear_zero(&format!("{b}.mod"), d, mod_chunks(config.variant) * d)?;
        for name in ["q", "k", "v", "o"] {
            p.insert_linear(&format!("{b}.attn.{name}"), d, d, rng)?;
        }
        if config.variant == Variant::Cdit {
            for name in ["q", "k", "v", "o"] {
                p.insert_linear(&format!("{b}.cross.{name}"), d, d, rng)?;
            }
        }
        p.insert_linear(&format!("{b}.mlp.0"), d, config.mlp_ratio * d, rng)?;
        p.insert_linear(&format!("{b}.mlp.1"), config.mlp_ratio * d, d, rng)?;
    }
    p.insert_linear_zero("final.mod", d, 2 * d)?;
    p.insert_linear_zero("final.proj", d, dl)?;
    Ok(p)
}

/// `[B, K*d]` modulation -> chunk `j` broadcast to `[B, tokens, d]`.
fn chunk<'t, E: Real>(m: &Var<'t, E>, j: usize, d: usize, tokens: usize) -> Result<Var<'t, E>> {
    m.slice(1, j * d, d)?.broadcast_tokens(tokens)
}

/// `LN(x) * (1 + scale) + shift`.
fn modulate<'t, E: Real>(x: &Var<'t, E>, shift: &Var<'t, E>, scale: &Var<'t, E>) -> Result<Var<'t, E>> {
    x.layer_norm(LN_EPS)?.mul(&scale.add_scalar(E::one())?)?.add(shift)
}

fn attend<'t, E: Real>(
    p: &Bound<'t, E>,
    prefix: &str,
    heads: usize,
    queries: &Var<'t, E>,
    keys: &Var<'t, E>,
) -> Result<Var<'t, E>> {
    let q = p.linear(&format!("{prefix}.q"), queries)?;
    let k = p.linear(&format!("{prefix}.k"), keys)?;
    let v = p.linear(&format!("{prefix}.v"), keys)?;
    p.linear(&format!("{prefix}.o"), &q.attention(&k, &v, heads)?)
}

fn mlp<'t, E: Real>(p: &Bound<'t, E>, prefix: &str, x: &Var<'t, E>) -> Result<Var<'t, E>> {
    p.linear(&format!("{prefix}.1"), &p.linear(&format!("{prefix}.0"), x)?.gelu()?)
}

/// CDiT block on target tokens `x` `[B, n, d]` with normalized context
/// `ctx` `[B, m*n, d]` and activated condition `c` `[B, d]`. Self-attention
/// sees target tokens only; context enters through cross-attention.
pub fn cdit_block<'t, E: Real>(
    config: &ModelConfig,
    p: &Bound<'t, E>,
    index: usize,
    x: &Var<'t, E>,
    ctx: &Var<'t, E>,
    c: &Var<'t, E>,
) -> Result<Var<'t, E>> {
    let (d, n) = (config.dim, x.shape()[1]);
    let b = format!("blocks.{index}");
    let m = p.linear(&format!("{b}.mod"), c)?;
    let ch = |j| chunk(&m, j, d, n);
    let h = modulate(x, &ch(0)?, &ch(1)?)?;
    let x = x.add(&ch(2)?.mul(&attend(p, &format!("{b}.attn"), config.heads, &h, &h)?)?)?;
    let h = modulate(&x, &ch(3)?, &ch(4)?)?;
    let x = x.add(&ch(5)?.mul(&attend(p, &format!("{b}.cross"), config.heads, &h, ctx)?)?)?;
    let h = modulate(&x, &ch(6)?, &ch(7)?)?;
    x.add(&ch(8)?.mul(&mlp(p, &format!("{b}.mlp"), &h)?)?)
}

/// DiT block: joint self-attention over all tokens `[B, L, d]`.
pub fn dit_block<'t, E: Real>(config: &ModelConfig, p: &Bound<'t, E>, index: usize, x: &Var<'t, E>, c: &Var<'t, E>) -> Result<Var<'t, E>> {
    let (d, l) = (config.dim, x.shape()[1]);
    let b = format!("blocks.{index}");
    let m = p.linear(&format!("{b}.mod"), c)?;
    let ch = |j| chunk(&m, j, d, l);
    let h = modulate(x, &ch(0)?, &ch(1)?)?;
    let x = x.add(&ch(2)?.mul(&attend(p, &format!("{b}.attn"), config.heads, &h, &h)?)?)?;
    let h = modulate(&x, &ch(3)?, &ch(4)?)?;
    x.add(&ch(5)?.mul(&mlp(p, &format!("{b}.mlp"), &h)?)?)
}

/// Repeats a `[rows, d]` table over the batch as a constant `[B, rows, d]`.
fn tiled_constant<'t, E: Real>(tape: &'t Tape<E>, table: &[f64], batch: usize, rows: usize, d: usize) -> Result<Var<'t, E>> {
    let data: Vec<E> = (0..batch).flat_map(|_| table.iter().map(|&v| E::from_f64_lossy(v))).collect();
    tape.constant(Tensor::new(&[batch, rows, d], data)?)
}

/// Full network. `noisy` is `[B, n, d_latent]`, `context` `[B, m*n, d_latent]`;
/// returns the predicted clean target `[B, n, d_latent]`.
pub fn forward<'t, E: Real>(
    config: &ModelConfig,
    p: &Bound<'t, E>,
    tape: &'t Tape<E>,
    noisy: &Var<'t, E>,
    context: &Var<'t, E>,
    conds: &[Condition],
    ts: &[usize],
) -> Result<Var<'t, E>> {
    let (n, dl, d, m) = (config.tokens(), config.latent_dim(), config.dim, config.context);
    let b = conds.len();
    if noisy.shape() != [b, n, dl] {
        return Err(Error::shape("forward", format!("noisy target {:?}, expected {:?}", noisy.shape(), [b, n, dl])));
    }
    if context.shape() != [b, m * n, dl] {
        return Err(Error::shape("forward", format!("context {:?}, expected {:?}", context.shape(), [b, m * n, dl])));
    }
    let (gh, gw) = config.grid();
    let pos = pos_embed_2d(gh, gw, d);
    let slots = slot_embed(m, d);
    let ctx_table: Vec<f64> = (0..m * n).flat_map(|i| (0..d).map(move |k| (i / n, i % n, k))).map(|(s, t, k)| pos[t * d + k] + slots[s * d + k]).collect();

    let x = p.linear("embed.in", noisy)?.add(&tiled_constant(tape, &pos, b, n, d)?)?;
    let ctx = p.linear("embed.in", context)?.add(&tiled_constant(tape, &ctx_table, b, m * n, d)?)?;
    let xi = ConditionEmbedder::new(config.condition()).embed(p, tape, conds, ts)?;
    let c = xi.silu()?;

    let x = match config.variant {
        Variant::Cdit => {
            let ctx = ctx.layer_norm(LN_EPS)?;
            let mut x = x;
            for i in 0..config.depth {
                x = cdit_block(config, p, i, &x, &ctx, &c)?;
            }
            x
        }
        Variant::Dit => {
            let mut all = Var::concat(&[ctx, x], 1)?;
            for i in 0..config.depth {
                all = dit_block(config, p, i, &all, &c)?;
            }
            all.slice(1, m * n, n)?
        }
    };
    let fm = p.linear("final.mod", &c)?;
    let h = modulate(&x, &chunk(&fm, 0, d, n)?, &chunk(&fm, 1, d, n)?)?;
    p.linear("final.proj", &h)
}

/// Batched model input in flat `f32` buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub noisy: Vec<f32>,
    pub context: Vec<f32>,
    pub conds: Vec<Condition>,
    pub ts: Vec<usize>,
}

impl ModelInput {
    pub fn len(&self) -> usize {
        self.conds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conds.is_empty()
    }

    /// Records the inputs as constants in precision `E`.
    pub fn record<'t, E: Real>(&self, config: &ModelConfig, tape: &'t Tape<E>) -> Result<(Var<'t, E>, Var<'t, E>)> {
        let (b, n, dl, m) = (self.len(), config.tokens(), config.latent_dim(), config.context);
        let cast = |v: &[f32]| v.iter().map(|&x| E::from_f64_lossy(x as f64)).collect::<Vec<E>>();
        let noisy = tape.constant(Tensor::new(&[b, n, dl], cast(&self.noisy))?)?;
        let context = tape.constant(Tensor::new(&[b, m * n, dl], cast(&self.context))?)?;
        Ok((noisy, context))
    }
}

/// Configuration plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(Model { params: init_params(&config, rng)?, config })
    }

    /// Inference forward pass with frozen weights.
    pub fn predict(&self, input: &ModelInput) -> Result<Vec<LatentState>> {
        let tape = Tape::<f32>::new();
        let p = self.params.bind_frozen(&tape)?;
        let (noisy, ctx) = input.record(&self.config, &tape)?;
        let out = forward(&self.config, &p, &tape, &noisy, &ctx, &input.conds, &input.ts)?;
        let (n, dl) = (self.config.tokens(), self.config.latent_dim());
        let v = out.value();
        v.data().chunks(n * dl).map(|c| LatentState::new(n, dl, c.to_vec())).collect()
    }
}
