//! Full policy: backbone, integration and action expert wired together.

use crate::backbone::{backbone_forward, init_backbone, BackboneConfig, Instruction, ObservationSet};
use crate::error::{Error, Result};
use crate::expert::{dit_forward, init_expert, DitConfig, ExpertOutput};
use crate::flow::{euler_integrate, SamplerConfig};
use crate::graph::{Graph, Var};
use crate::integration::{build_bundle, embed_state_node, init_integration, variant_c_layers, GraphBundle, Variant};
use crate::params::ParamStore;
use crate::rng::{sample_gaussian, Rng};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub dit: DitConfig,
    pub variant: Variant,
    pub chunk_h: usize,
    pub action_dim: usize,
    pub state_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            dit: DitConfig::default(),
            variant: Variant::A,
            chunk_h: 8,
            action_dim: 3,
            state_dim: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.dit.validate()?;
        if self.dit.width != self.backbone.d_z {
            return Err(Error::Config(format!(
                "expert width {} must equal d_z {}",
                self.dit.width, self.backbone.d_z
            )));
        }
        if self.chunk_h == 0 || self.action_dim == 0 || self.state_dim == 0 {
            return Err(Error::Config(
                "chunk length, action and state dims must be positive".into(),
            ));
        }
        self.context_layers().map(|_| ())
    }

    /// Backbone layers (1-based) that feed the conditioning bundle.
    pub fn context_layers(&self) -> Result<Vec<usize>> {
        match self.variant {
            Variant::C => variant_c_layers(self.backbone.extract_layer, self.backbone.layers, self.dit.depth),
            _ => Ok(vec![self.backbone.extract_layer]),
        }
    }

    /// Deepest backbone layer that influences the action output.
    pub fn layers_needed(&self) -> Result<usize> {
        Ok(self.context_layers()?.into_iter().max().unwrap_or(1))
    }
}

/// Fresh parameters. Backbone, integration and expert draw from separate
/// streams so that changing the variant leaves the backbone init untouched.
pub fn init_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let root = Rng::new(seed);
    let mut store = ParamStore::new();
    init_backbone(&mut store, &mut root.split(1), &cfg.backbone)?;
    init_integration(&mut store, &mut root.split(2), cfg.state_dim, cfg.backbone.d_z)?;
    init_expert(&mut store, &mut root.split(3), &cfg.dit, cfg.chunk_h, cfg.action_dim)?;
    Ok(store)
}

/// Total learnable parameters.
pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    Ok(init_model::<f32>(cfg, 0)?.total_count())
}

/// Backbone features available to the integration module inside a graph.
pub struct Encoded {
    /// `layers[l-1]` is layer `l`, present only for context layers.
    pub layers: Vec<Option<Var>>,
    pub segments: Vec<(usize, usize)>,
    /// Backbone self-attention nodes (empty when encoded from a cache).
    pub attention: Vec<Var>,
}

/// Runs the backbone as far as the conditioning needs.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    obs: &[&ObservationSet],
    instrs: &[&Instruction],
) -> Result<Encoded> {
    let out = backbone_forward(g, store, &cfg.backbone, obs, instrs, cfg.layers_needed()?)?;
    let mut layers = vec![None; cfg.backbone.layers];
    for l in cfg.context_layers()? {
        layers[l - 1] = Some(out.layers[l - 1]);
    }
    Ok(Encoded {
        layers,
        segments: out.segments,
        attention: out.attention,
    })
}

/// Context-layer features of one sample, computed once with a fixed backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedContext<T = f32> {
    /// `(layer, T × d_z tokens)` for each context layer.
    pub layers: Vec<(usize, Tensor<T>)>,
}

pub fn precompute_context<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    obs: &[&ObservationSet],
    instrs: &[&Instruction],
) -> Result<Vec<CachedContext<T>>> {
    let mut g = Graph::inference();
    let enc = encode(&mut g, store, cfg, obs, instrs)?;
    let ctx_layers = cfg.context_layers()?;
    Ok(enc
        .segments
        .iter()
        .map(|&(s, n)| CachedContext {
            layers: ctx_layers
                .iter()
                .map(|&l| {
                    let v = g.value(enc.layers[l - 1].expect("context layer"));
                    (
                        l,
                        Tensor::new(vec![n, v.cols()], v.data()[s * v.cols()..(s + n) * v.cols()].to_vec())
                            .expect("slice"),
                    )
                })
                .collect(),
        })
        .collect())
}

/// Feeds cached features into a graph as constants.
pub fn encode_cached<T: Scalar>(g: &mut Graph<T>, cfg: &ModelConfig, ctxs: &[&CachedContext<T>]) -> Result<Encoded> {
    let first = ctxs
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty context batch".into()))?;
    let mut layers = vec![None; cfg.backbone.layers];
    let mut segments = Vec::with_capacity(ctxs.len());
    let mut start = 0;
    for c in ctxs {
        let n = c.layers.first().map_or(0, |(_, t)| t.rows());
        segments.push((start, n));
        start += n;
    }
    for (j, &(l, _)) in first.layers.iter().enumerate() {
        let parts: Vec<&Tensor<T>> = ctxs
            .iter()
            .map(|c| match c.layers.get(j) {
                Some((lc, t)) if *lc == l => Ok(t),
                _ => Err(Error::InvalidArgument("cached contexts disagree on layers".into())),
            })
            .collect::<Result<_>>()?;
        let slot = layers
            .get_mut(l.wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("cached layer {l} out of range")))?;
        *slot = Some(g.input(Tensor::concat_rows(&parts)?));
    }
    Ok(Encoded {
        layers,
        segments,
        attention: Vec::new(),
    })
}

pub struct VelocityOutput {
    pub expert: ExpertOutput,
    pub bundle: GraphBundle,
}

/// `v_θ` for a packed batch: `states` is `[B, d_s]`, `noisy` is `[B·H, d_a]`.
pub fn velocity<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    enc: &Encoded,
    states: Var,
    noisy: Var,
    taus: &[f64],
) -> Result<VelocityOutput> {
    let st = embed_state_node(g, store, states)?;
    let bundle = build_bundle(
        g,
        cfg.variant,
        &enc.layers,
        &enc.segments,
        st,
        cfg.backbone.extract_layer,
        cfg.dit.depth,
    )?;
    let expert = dit_forward(g, store, &cfg.dit, cfg.variant, noisy, taus, &bundle, cfg.chunk_h)?;
    Ok(VelocityOutput { expert, bundle })
}

/// Mean squared error between two equally shaped nodes.
pub fn mse<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Integrates the learned field for one sample, in normalized action space.
pub fn sample_chunk<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    ctx: &CachedContext<T>,
    state: &[f32],
    sampler: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    if state.len() != cfg.state_dim {
        return Err(Error::InvalidArgument(format!(
            "state has {} values, expected {}",
            state.len(),
            cfg.state_dim
        )));
    }
    let state = Tensor::new(vec![1, state.len()], state.iter().map(|&v| T::lit(v as f64)).collect())?;
    let eps = sample_gaussian(rng, &[cfg.chunk_h, cfg.action_dim]);
    euler_integrate(eps, sampler.steps, |a, tau| {
        let mut g = Graph::inference();
        let enc = encode_cached(&mut g, cfg, &[ctx])?;
        let s = g.input(state.clone());
        let x = g.input(a.clone());
        let out = velocity(&mut g, store, cfg, &enc, s, x, &[tau])?;
        Ok(g.value(out.expert.velocity).clone())
    })
}

/// Observation to normalized chunk: one backbone pass, then `S` expert passes.
pub fn predict_normalized<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    obs: &ObservationSet,
    instr: &Instruction,
    state: &[f32],
    sampler: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    let ctx = precompute_context(store, cfg, &[obs], &[instr])?.remove(0);
    sample_chunk(store, cfg, &ctx, state, sampler, rng)
}
