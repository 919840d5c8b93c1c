//! Conditioning sequences for the action expert.
//!
//! The fused context is kept as-is and the robot state is appended as one
//! extra token (a single linear embedding to the context width). Four
//! variants differ in which sequence each expert block attends to:
//!
//! * `A`: every block cross-attends to `[z ; state]`.
//! * `B`: same sequence; the expert interleaves cross- and self-attention.
//! * `C`: block `i` cross-attends to `[h_i ; state]` where `h_i` comes from
//!   a different backbone layer.
//! * `D`: every block cross-attends to `[z ; state ; embedded noisy actions]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::FusedContext;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    C,
    D,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::A, Variant::B, Variant::C, Variant::D];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
            Variant::D => "D",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Variant::A),
            "B" => Ok(Variant::B),
            "C" => Ok(Variant::C),
            "D" => Ok(Variant::D),
            _ => Err(Error::Config(format!("unknown integration variant {s:?}"))),
        }
    }
}

/// Proprioceptive state vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub values: Vec<f32>,
}

/// Conditioning sequences of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle<T = f32> {
    pub variant: Variant,
    /// One sequence shared by all blocks (A, B, D) or one per block (C).
    pub kv_sequences: Vec<Tensor<T>>,
    /// Backbone layer (1-based) feeding each sequence.
    pub provenance: Vec<usize>,
}

pub fn init_integration<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    state_dim: usize,
    d_z: usize,
) -> Result<()> {
    nn::init_linear_default(store, rng, "integration.state", state_dim, d_z)
}

/// Backbone layers paired with expert blocks for variant C: a window of
/// `depth` consecutive layers starting at `k`, shifted down when it would
/// run past the last layer.
pub fn variant_c_layers(k: usize, layers: usize, depth: usize) -> Result<Vec<usize>> {
    if depth == 0 || depth > layers || k == 0 || k > layers {
        return Err(Error::Config(format!(
            "variant C needs {depth} distinct layers starting near {k}, backbone has {layers}"
        )));
    }
    let start = k.min(layers + 1 - depth);
    Ok((start..start + depth).collect())
}

/// Packed conditioning inside a graph.
#[derive(Clone, Debug)]
pub struct GraphBundle {
    pub variant: Variant,
    pub kv: Vec<Var>,
    /// `(row start, row count)` per sample; identical for every entry of `kv`.
    pub segments: Vec<(usize, usize)>,
    pub provenance: Vec<usize>,
}

/// Linear state embedding, one `d_z` token per row of `states`.
pub fn embed_state_node<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, states: Var) -> Result<Var> {
    nn::linear(g, store, "integration.state", states)
}

/// Interleaves per-sample blocks: for sample `b`, the rows of `base` in
/// `base_segs[b]` followed by `per_sample` rows of `extra` starting at
/// `b·per_sample`.
pub fn append_per_sample<T: Scalar>(
    g: &mut Graph<T>,
    base: Var,
    base_segs: &[(usize, usize)],
    extra: Var,
    per_sample: usize,
) -> Result<(Var, Vec<(usize, usize)>)> {
    let n_base = g.value(base).rows();
    if g.value(extra).rows() != per_sample * base_segs.len() {
        return Err(Error::InvalidArgument(format!(
            "expected {} appended rows, got {}",
            per_sample * base_segs.len(),
            g.value(extra).rows()
        )));
    }
    let source = g.concat_rows(&[base, extra])?;
    let mut idx = Vec::new();
    let mut segs = Vec::with_capacity(base_segs.len());
    for (b, &(s, n)) in base_segs.iter().enumerate() {
        segs.push((idx.len(), n + per_sample));
        idx.extend(s..s + n);
        idx.extend((0..per_sample).map(|j| n_base + b * per_sample + j));
    }
    let out = g.gather_rows(source, idx)?;
    Ok((out, segs))
}

/// Builds the packed bundle from backbone layer outputs (`layers[l-1]` is
/// layer `l`) and embedded state tokens (one row per sample).
pub fn build_bundle<T: Scalar>(
    g: &mut Graph<T>,
    variant: Variant,
    layers: &[Option<Var>],
    z_segments: &[(usize, usize)],
    state_tokens: Var,
    extract_layer: usize,
    dit_depth: usize,
) -> Result<GraphBundle> {
    let layer = |l: usize| -> Result<Var> {
        layers
            .get(l.wrapping_sub(1))
            .copied()
            .flatten()
            .ok_or_else(|| Error::Config(format!("backbone layer {l} not available")))
    };
    let provenance = match variant {
        Variant::C => variant_c_layers(extract_layer, layers.len(), dit_depth)?,
        _ => vec![extract_layer],
    };
    let mut kv = Vec::with_capacity(provenance.len());
    let mut segments = Vec::new();
    for &l in &provenance {
        let (seq, segs) = append_per_sample(g, layer(l)?, z_segments, state_tokens, 1)?;
        kv.push(seq);
        segments = segs;
    }
    Ok(GraphBundle {
        variant,
        kv,
        segments,
        provenance,
    })
}

fn embed_single<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, s: &RobotState) -> Result<Var> {
    let x = g.input(Tensor::new(
        vec![1, s.values.len()],
        s.values.iter().map(|&v| T::lit(v as f64)).collect(),
    )?);
    embed_state_node(g, store, x)
}

/// One `1 × d_z` token for a (normalized) state.
pub fn embed_state<T: Scalar>(store: &ParamStore<T>, s: &RobotState) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let v = embed_single(&mut g, store, s)?;
    Ok(g.value(v).clone())
}

fn single_bundle<T: Scalar>(
    store: &ParamStore<T>,
    variant: Variant,
    per_layer: &[&FusedContext<T>],
    s: &RobotState,
    extract_layer: usize,
    dit_depth: usize,
) -> Result<ConditioningBundle<T>> {
    let mut g = Graph::inference();
    let st = embed_single(&mut g, store, s)?;
    let rows = per_layer.first().map_or(0, |z| z.tokens.rows());
    let layers: Vec<Option<Var>> = per_layer
        .iter()
        .map(|z| {
            if z.tokens.rows() != rows {
                return Err(Error::InvalidArgument("layer features differ in length".into()));
            }
            Ok(Some(g.input(z.tokens.clone())))
        })
        .collect::<Result<_>>()?;
    let b = build_bundle(&mut g, variant, &layers, &[(0, rows)], st, extract_layer, dit_depth)?;
    Ok(ConditioningBundle {
        variant,
        kv_sequences: b.kv.iter().map(|&v| g.value(v).clone()).collect(),
        provenance: b.provenance,
    })
}

/// `[z ; state]`, shared by every expert block.
pub fn build_condition_a<T: Scalar>(
    store: &ParamStore<T>,
    z: &FusedContext<T>,
    s: &RobotState,
) -> Result<ConditioningBundle<T>> {
    single_bundle(store, Variant::A, &[z], s, 1, 1)
}

/// Per-block sequences from consecutive backbone layers; `per_layer[l-1]` is
/// layer `l`.
pub fn build_condition_c<T: Scalar>(
    store: &ParamStore<T>,
    per_layer: &[FusedContext<T>],
    s: &RobotState,
    extract_layer: usize,
    dit_depth: usize,
) -> Result<ConditioningBundle<T>> {
    let refs: Vec<&FusedContext<T>> = per_layer.iter().collect();
    single_bundle(store, Variant::C, &refs, s, extract_layer, dit_depth)
}

/// `[z ; state ; embedded noisy actions]`.
pub fn build_condition_d<T: Scalar>(
    store: &ParamStore<T>,
    z: &FusedContext<T>,
    s: &RobotState,
    embedded_actions: &Tensor<T>,
) -> Result<ConditioningBundle<T>> {
    let mut g = Graph::inference();
    let st = embed_single(&mut g, store, s)?;
    let zv = g.input(z.tokens.clone());
    let (base, segs) = append_per_sample(&mut g, zv, &[(0, z.tokens.rows())], st, 1)?;
    let acts = g.input(embedded_actions.clone());
    let h = embedded_actions.rows();
    let (joint, _) = append_per_sample(&mut g, base, &segs, acts, h)?;
    Ok(ConditioningBundle {
        variant: Variant::D,
        kv_sequences: vec![g.value(joint).clone()],
        provenance: vec![0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(d_s: usize, d_z: usize) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        init_integration(&mut store, &mut Rng::new(3), d_s, d_z).unwrap();
        store
    }

    fn ctx(rows: usize, d: usize, seed: f32) -> FusedContext<f32> {
        FusedContext {
            tokens: Tensor::from_fn(&[rows, d], |i| (i as f32 * 0.37 + seed).sin()),
        }
    }

    #[test]
    fn state_embedding_linear_contract() {
        let mut store = setup(4, 8);
        let tok = embed_state(&store, &RobotState { values: vec![0.0; 4] }).unwrap();
        assert_eq!(tok.shape(), &[1, 8]);
        assert!(tok.data().iter().all(|&v| v == 0.0));
        let b = store.id("integration.state.b").unwrap();
        store.value_mut(b).data_mut()[0] = 0.0;
        let s1 = embed_state(
            &store,
            &RobotState {
                values: vec![0.1, 0.2, 0.3, 0.4],
            },
        )
        .unwrap();
        let s2 = embed_state(
            &store,
            &RobotState {
                values: vec![0.1, 1.2, 0.3, 0.4],
            },
        )
        .unwrap();
        let w = store.value(store.id("integration.state.w").unwrap());
        for j in 0..8 {
            assert!((s2[[0, j]] - s1[[0, j]] - w[[1, j]]).abs() < 1e-6);
        }
    }

    #[test]
    fn module_a_appends_state_last_and_preserves_z() {
        let store = setup(4, 8);
        let z = ctx(20, 8, 0.0);
        let s = RobotState {
            values: vec![0.5, -0.5, 1.0, 0.0],
        };
        let b = build_condition_a(&store, &z, &s).unwrap();
        let kv = &b.kv_sequences[0];
        assert_eq!(kv.rows(), 21);
        for r in 0..20 {
            assert_eq!(kv.row(r), z.tokens.row(r));
        }
        assert_eq!(kv.row(20), embed_state(&store, &s).unwrap().row(0));
        assert_eq!(b, build_condition_a(&store, &z, &s).unwrap());
    }

    #[test]
    fn module_c_layer_mapping() {
        assert_eq!(variant_c_layers(4, 6, 3).unwrap(), vec![4, 5, 6]);
        assert_eq!(variant_c_layers(4, 6, 4).unwrap(), vec![3, 4, 5, 6]);
        assert_eq!(variant_c_layers(2, 6, 1).unwrap(), vec![2]);
        assert!(variant_c_layers(4, 6, 7).is_err());

        let store = setup(4, 8);
        let layers: Vec<_> = (0..6).map(|l| ctx(5, 8, l as f32)).collect();
        let s = RobotState { values: vec![0.1; 4] };
        let c = build_condition_c(&store, &layers, &s, 4, 3).unwrap();
        assert_eq!(c.provenance, vec![4, 5, 6]);
        assert_eq!(c.kv_sequences.len(), 3);
        for (seq, l) in c.kv_sequences.iter().zip([4, 5, 6]) {
            assert_eq!(seq.row(0), layers[l - 1].tokens.row(0));
        }
        let c1 = build_condition_c(&store, &layers, &s, 4, 1).unwrap();
        let a = build_condition_a(&store, &layers[3], &s).unwrap();
        assert_eq!(c1.kv_sequences, a.kv_sequences);
    }

    #[test]
    fn module_d_layout() {
        let store = setup(4, 8);
        let z = ctx(20, 8, 1.0);
        let s = RobotState { values: vec![0.2; 4] };
        let acts = Tensor::from_fn(&[8, 8], |i| i as f32);
        let d = build_condition_d(&store, &z, &s, &acts).unwrap();
        let kv = &d.kv_sequences[0];
        assert_eq!(kv.rows(), 29);
        for r in 0..8 {
            assert_eq!(kv.row(21 + r), acts.row(r));
        }
        let d0 = build_condition_d(&store, &z, &s, &Tensor::zeros(&[0, 8])).unwrap();
        assert_eq!(d0.kv_sequences, build_condition_a(&store, &z, &s).unwrap().kv_sequences);
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("b".parse::<Variant>().unwrap(), Variant::B);
        assert!("E".parse::<Variant>().is_err());
    }
}
