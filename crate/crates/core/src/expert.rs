//! Cross-modulated diffusion transformer (the action expert).
//!
//! Noisy action chunks are embedded per time step, then pass through
//! `depth` blocks. Each block is modulated by the flow time τ through
//! adaptive layer norm (scale, shift) and residual gates, and attends to the
//! conditioning bundle with the action tokens as queries. A final modulated
//! norm and a zero-initialized projection produce the velocity field.
//!
//! Residual branches are added as `x + (1 + gate) ⊙ branch` so that a
//! zero-initialized modulation head leaves every branch active while the
//! zero-initialized output projection still yields `v ≡ 0` at start.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttnKind, AttnSegment, Graph, Var};
use crate::integration::{append_per_sample, GraphBundle, Variant};
use crate::nn;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DitConfig {
    pub depth: usize,
    /// Model width; must equal the backbone's `d_z`.
    pub width: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for DitConfig {
    fn default() -> Self {
        DitConfig {
            depth: 4,
            width: 128,
            heads: 4,
            time_dim: 64,
            mlp_ratio: 4,
        }
    }
}

impl DitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("expert depth must be at least 1".into()));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "expert width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("time_dim {} must be even", self.time_dim)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Cross,
    SelfAttention,
}

/// Attention kind of block `i` (0-based) for a variant.
pub fn block_kind(variant: Variant, i: usize) -> BlockKind {
    match variant {
        Variant::B if i % 2 == 1 => BlockKind::SelfAttention,
        _ => BlockKind::Cross,
    }
}

const MODS_PER_BLOCK: usize = 6;

pub fn init_expert<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    cfg: &DitConfig,
    chunk_h: usize,
    action_dim: usize,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.width;
    nn::init_linear_default(store, rng, "expert.action_in", action_dim, d)?;
    store.insert_normal("expert.action_pos", &[chunk_h, d], 0.1, rng)?;
    nn::init_linear_default(store, rng, "expert.time.fc1", cfg.time_dim, d)?;
    nn::init_linear_default(store, rng, "expert.time.fc2", d, d)?;
    let out_std = 1.0 / ((d as f64).sqrt() * (2.0 * cfg.depth as f64).sqrt());
    for i in 0..cfg.depth {
        let p = format!("expert.blocks.{i}");
        nn::init_linear(store, rng, &format!("{p}.mod"), d, MODS_PER_BLOCK * d, 0.0)?;
        nn::init_attention(store, rng, &format!("{p}.attn"), d, out_std)?;
        nn::init_mlp(store, rng, &format!("{p}.mlp"), d, d * cfg.mlp_ratio, out_std)?;
    }
    nn::init_linear(store, rng, "expert.final.mod", d, 2 * d, 0.0)?;
    nn::init_linear(store, rng, "expert.final.out", d, action_dim, 0.0)?;
    Ok(())
}

/// Closed-form learnable-parameter count of the expert.
pub fn count_expert_params(cfg: &DitConfig, chunk_h: usize, action_dim: usize) -> usize {
    let d = cfg.width;
    let lin = |i: usize, o: usize| i * o + o;
    let hidden = d * cfg.mlp_ratio;
    let block = lin(d, MODS_PER_BLOCK * d) + 4 * lin(d, d) + lin(d, hidden) + lin(hidden, d);
    lin(action_dim, d)
        + chunk_h * d
        + lin(cfg.time_dim, d)
        + lin(d, d)
        + cfg.depth * block
        + lin(d, 2 * d)
        + lin(d, action_dim)
}

/// Shared time features `silu(fc2(silu(fc1(sinusoid(τ)))))`, one row per τ.
pub fn time_features<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &DitConfig, taus: &[f64]) -> Result<Var> {
    let mut data = Vec::with_capacity(taus.len() * cfg.time_dim);
    for &tau in taus {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidArgument(format!("tau {tau} outside [0, 1]")));
        }
        data.extend_from_slice(nn::sinusoidal_embedding::<T>(tau, cfg.time_dim)?.data());
    }
    let emb = g.input(Tensor::new(vec![taus.len(), cfg.time_dim], data)?);
    let h = nn::linear(g, store, "expert.time.fc1", emb)?;
    let h = g.silu(h);
    let h = nn::linear(g, store, "expert.time.fc2", h)?;
    Ok(g.silu(h))
}

/// Splits a modulation head output into `n` width-`d` chunks, each row
/// repeated `reps` times so it lines up with the action tokens.
fn modulation<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    cond: Var,
    n: usize,
    d: usize,
    reps: usize,
) -> Result<Vec<Var>> {
    let m = nn::linear(g, store, prefix, cond)?;
    (0..n)
        .map(|i| {
            let c = g.slice_cols(m, i * d, d)?;
            Ok(g.repeat_rows(c, reps))
        })
        .collect()
}

/// `normalize(x) ⊙ (1 + scale) + shift`.
fn modulated_norm<T: Scalar>(g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = g.normalize(x, T::lit(nn::LN_EPS));
    let s1 = g.add_const(scale, T::one());
    let y = g.mul(n, s1)?;
    g.add(y, shift)
}

/// `x + (1 + gate) ⊙ branch`.
fn gated_residual<T: Scalar>(g: &mut Graph<T>, x: Var, gate: Var, branch: Var) -> Result<Var> {
    let g1 = g.add_const(gate, T::one());
    let y = g.mul(branch, g1)?;
    g.add(x, y)
}

pub struct ExpertOutput {
    /// `[B·H, d_a]` velocity.
    pub velocity: Var,
    /// Embedded action tokens before the first block.
    pub action_tokens: Var,
    /// Attention node of every block.
    pub attention: Vec<Var>,
}

/// Velocity field for a packed batch: `noisy` is `[B·H, d_a]`, `taus` has one
/// entry per sample.
#[allow(clippy::too_many_arguments)]
pub fn dit_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &DitConfig,
    variant: Variant,
    noisy: Var,
    taus: &[f64],
    bundle: &GraphBundle,
    chunk_h: usize,
) -> Result<ExpertOutput> {
    if bundle.variant != variant {
        return Err(Error::Config(format!(
            "bundle built for variant {} but expert configured for {}",
            bundle.variant, variant
        )));
    }
    let expected_kv = if variant == Variant::C { cfg.depth } else { 1 };
    if bundle.kv.len() != expected_kv {
        return Err(Error::Config(format!(
            "variant {variant} needs {expected_kv} conditioning sequences, bundle has {}",
            bundle.kv.len()
        )));
    }
    let batch = taus.len();
    if bundle.segments.len() != batch || g.value(noisy).rows() != batch * chunk_h {
        return Err(Error::InvalidArgument(format!(
            "batch mismatch: {} taus, {} bundle segments, {} action rows for H={chunk_h}",
            batch,
            bundle.segments.len(),
            g.value(noisy).rows()
        )));
    }
    let d = cfg.width;

    let a = nn::linear(g, store, "expert.action_in", noisy)?;
    let pos_table = g.param_named(store, "expert.action_pos")?;
    let pos = g.gather_rows(pos_table, (0..batch).flat_map(|_| 0..chunk_h).collect())?;
    let x0 = g.add(a, pos)?;

    let (kv_seqs, kv_segments) = if variant == Variant::D {
        let (joint, segs) = append_per_sample(g, bundle.kv[0], &bundle.segments, x0, chunk_h)?;
        (vec![joint], segs)
    } else {
        (bundle.kv.clone(), bundle.segments.clone())
    };
    let cross_segs: Vec<AttnSegment> = kv_segments
        .iter()
        .enumerate()
        .map(|(b, &(s, n))| AttnSegment {
            q_start: b * chunk_h,
            q_len: chunk_h,
            kv_start: s,
            kv_len: n,
        })
        .collect();
    let self_segs: Vec<AttnSegment> = (0..batch)
        .map(|b| AttnSegment {
            q_start: b * chunk_h,
            q_len: chunk_h,
            kv_start: b * chunk_h,
            kv_len: chunk_h,
        })
        .collect();

    let cond = time_features(g, store, cfg, taus)?;
    let mut x = x0;
    let mut attention = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let p = format!("expert.blocks.{i}");
        let m = modulation(g, store, &format!("{p}.mod"), cond, MODS_PER_BLOCK, d, chunk_h)?;
        let h = modulated_norm(g, x, m[0], m[1])?;
        let (branch, node) = match block_kind(variant, i) {
            BlockKind::Cross => {
                let kv = if variant == Variant::C { kv_seqs[i] } else { kv_seqs[0] };
                nn::attention_block(
                    g,
                    store,
                    &format!("{p}.attn"),
                    h,
                    kv,
                    cfg.heads,
                    cross_segs.clone(),
                    AttnKind::Cross,
                )?
            }
            BlockKind::SelfAttention => nn::attention_block(
                g,
                store,
                &format!("{p}.attn"),
                h,
                h,
                cfg.heads,
                self_segs.clone(),
                AttnKind::SelfAction,
            )?,
        };
        attention.push(node);
        x = gated_residual(g, x, m[2], branch)?;
        let h = modulated_norm(g, x, m[3], m[4])?;
        let branch = nn::mlp(g, store, &format!("{p}.mlp"), h)?;
        x = gated_residual(g, x, m[5], branch)?;
    }
    let fm = modulation(g, store, "expert.final.mod", cond, 2, d, chunk_h)?;
    let h = modulated_norm(g, x, fm[0], fm[1])?;
    let velocity = nn::linear(g, store, "expert.final.out", h)?;
    Ok(ExpertOutput {
        velocity,
        action_tokens: x0,
        attention,
    })
}

/// Per-block modulation vectors for one τ.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockModulation<T = f32> {
    pub attn_shift: Tensor<T>,
    pub attn_scale: Tensor<T>,
    pub attn_gate: Tensor<T>,
    pub mlp_shift: Tensor<T>,
    pub mlp_scale: Tensor<T>,
    pub mlp_gate: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeModulation<T = f32> {
    pub blocks: Vec<BlockModulation<T>>,
    pub final_shift: Tensor<T>,
    pub final_scale: Tensor<T>,
}

pub fn time_modulation<T: Scalar>(store: &ParamStore<T>, cfg: &DitConfig, tau: f64) -> Result<TimeModulation<T>> {
    let mut g = Graph::inference();
    let cond = time_features(&mut g, store, cfg, &[tau])?;
    let d = cfg.width;
    let mut blocks = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let m = modulation(
            &mut g,
            store,
            &format!("expert.blocks.{i}.mod"),
            cond,
            MODS_PER_BLOCK,
            d,
            1,
        )?;
        let v = |k: usize| g.value(m[k]).clone();
        blocks.push(BlockModulation {
            attn_shift: v(0),
            attn_scale: v(1),
            attn_gate: v(2),
            mlp_shift: v(3),
            mlp_scale: v(4),
            mlp_gate: v(5),
        });
    }
    let fm = modulation(&mut g, store, "expert.final.mod", cond, 2, d, 1)?;
    Ok(TimeModulation {
        blocks,
        final_shift: g.value(fm[0]).clone(),
        final_scale: g.value(fm[1]).clone(),
    })
}

/// Single-sample embedding of a noisy chunk (`H × d_a` → `H × d`).
pub fn embed_actions<T: Scalar>(store: &ParamStore<T>, noisy: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let x = g.input(noisy.clone());
    let a = nn::linear(&mut g, store, "expert.action_in", x)?;
    let pos_table = g.param_named(store, "expert.action_pos")?;
    let h = noisy.rows();
    if h > g.value(pos_table).rows() {
        return Err(Error::InvalidArgument(format!("chunk of {h} rows exceeds horizon")));
    }
    let pos = g.gather_rows(pos_table, (0..h).collect())?;
    let y = g.add(a, pos)?;
    Ok(g.value(y).clone())
}
