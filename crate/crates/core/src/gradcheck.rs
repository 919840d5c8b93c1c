//! Finite-difference checks of reverse-mode gradients, 64-bit only.
//!
//! Numeric derivatives use the fourth-order central stencil
//! `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`.

use crate::backbone::{BackboneConfig, Image, Instruction, ObservationSet, BOS_TOKEN, IMG_TOKEN};
use crate::error::Result;
use crate::expert::DitConfig;
use crate::graph::{Graph, Var};
use crate::integration::Variant;
use crate::model::{encode, init_model, mse, velocity, ModelConfig};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Denominator floor for the relative error. Entries whose analytic and
/// numeric derivatives are both below it are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(parameter name, flat index)` of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn stencil(mut f: impl FnMut(f64) -> Result<f64>, x: f64, h: f64) -> Result<f64> {
    let d1 = f(x + h)? - f(x - h)?;
    let d2 = f(x + 2.0 * h)? - f(x - 2.0 * h)?;
    Ok((8.0 * d1 - d2) / (12.0 * h))
}

/// Compares `∂loss/∂θ` with the numeric derivative for every entry of every
/// trainable parameter. `loss` builds a scalar on a fresh graph.
pub fn check_params(
    store: &mut ParamStore<f64>,
    h: f64,
    loss: &dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
) -> Result<GradCheck> {
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let l = loss(&mut g, store)?;
        Ok(g.value(l).data()[0])
    };
    let grads = {
        let mut g = Graph::new();
        let l = loss(&mut g, store)?;
        g.backward(l)?
    };
    let ids: Vec<ParamId> = store.ids().filter(|&id| !store.is_frozen(id)).collect();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        entries: 0,
    };
    for id in ids {
        let analytic = grads.param_or_zeros(store, id);
        for i in 0..analytic.len() {
            let x = store.value(id).data()[i];
            let numeric = stencil(
                |v| {
                    store.value_mut(id).data_mut()[i] = v;
                    eval(store)
                },
                x,
                h,
            )?;
            store.value_mut(id).data_mut()[i] = x;
            let e = relative_error(analytic.data()[i], numeric);
            report.entries += 1;
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(e);
                report.worst = Some((store.param(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}

/// Same check for graph inputs: `build` receives one variable per shape and
/// returns the output whose weighted sum is differentiated.
pub fn check_inputs(
    inputs: &[Tensor<f64>],
    weights: &Tensor<f64>,
    h: f64,
    build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let forward = |g: &mut Graph<f64>, xs: &[Tensor<f64>], grad: bool| -> Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = xs
            .iter()
            .map(|t| {
                if grad {
                    g.input_with_grad(t.clone())
                } else {
                    g.input(t.clone())
                }
            })
            .collect();
        let out = build(g, &vars)?;
        let w = g.input(weights.clone());
        let prod = g.mul(out, w)?;
        Ok((g.sum(prod), vars))
    };
    let mut g = Graph::new();
    let (l, vars) = forward(&mut g, inputs, true)?;
    let grads = g.backward(l)?;
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .var(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..xs[k].len() {
            let x = xs[k].data()[i];
            let at = |v: f64| -> Result<f64> {
                xs[k].data_mut()[i] = v;
                let mut g = Graph::inference();
                let (l, _) = forward(&mut g, &xs, false)?;
                Ok(g.value(l).data()[0])
            };
            let numeric = stencil(at, x, h)?;
            xs[k].data_mut()[i] = x;
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// The smallest full model: `d_z = 16`, DiT depth 2, `H = 2`, `d_a = 2`,
/// one 8×8 view.
pub fn tiny_pipeline(variant: Variant) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            d_z: 16,
            layers: 2,
            extract_layer: 2,
            patch_size: 2,
            unshuffle_factor: 2,
            heads: 2,
            vocab: 32,
            d_patch: 4,
            image_size: 8,
            views: 1,
            mlp_ratio: 2,
            max_tokens: 32,
        },
        dit: DitConfig {
            depth: 2,
            width: 16,
            heads: 2,
            time_dim: 8,
            mlp_ratio: 2,
        },
        variant,
        chunk_h: 2,
        action_dim: 2,
        state_dim: 4,
    }
}

/// Finite-difference check of the flow-matching loss of a two-sample batch
/// with respect to every parameter. All parameters are perturbed away from
/// their initialization first so that zero-initialized heads do not hide
/// gradient paths.
pub fn check_pipeline(cfg: &ModelConfig, seed: u64) -> Result<GradCheck> {
    let mut rng = Rng::new(seed);
    let mut store = init_model::<f64>(cfg, seed)?;
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.value_mut(id).data_mut() {
            *v += 0.3 * rng.gaussian();
        }
    }
    let b = 2;
    let size = cfg.backbone.image_size;
    let obs: Vec<ObservationSet> = (0..b)
        .map(|_| {
            let views = (0..cfg.backbone.views)
                .map(|_| Image::new(size, size, (0..size * size * 3).map(|_| rng.uniform() as f32).collect()))
                .collect::<Result<Vec<_>>>()?;
            ObservationSet::new(views)
        })
        .collect::<Result<_>>()?;
    let instrs: Vec<Instruction> = (0..b)
        .map(|i| {
            let mut tokens = vec![BOS_TOKEN];
            tokens.extend(std::iter::repeat_n(IMG_TOKEN, cfg.backbone.views));
            tokens.extend(&[3, 7, 16 + i as u32][..2 + i]);
            Instruction { tokens }
        })
        .collect();
    let rows = b * cfg.chunk_h;
    let gauss = |rng: &mut Rng, r: usize, c: usize| Tensor::from_fn(&[r, c], |_| rng.gaussian());
    let states = gauss(&mut rng, b, cfg.state_dim);
    let noisy = gauss(&mut rng, rows, cfg.action_dim);
    let target = gauss(&mut rng, rows, cfg.action_dim);
    let taus: Vec<f64> = (0..b).map(|_| rng.range(0.02, 0.98)).collect();
    let loss = |g: &mut Graph<f64>, store: &ParamStore<f64>| -> Result<Var> {
        let o: Vec<&ObservationSet> = obs.iter().collect();
        let i: Vec<&Instruction> = instrs.iter().collect();
        let enc = encode(g, store, cfg, &o, &i)?;
        let s = g.input(states.clone());
        let x = g.input(noisy.clone());
        let u = g.input(target.clone());
        let out = velocity(g, store, cfg, &enc, s, x, &taus)?;
        mse(g, out.expert.velocity, u)
    };
    check_params(&mut store, 1e-3, &loss)
}
