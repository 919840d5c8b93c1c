//! Normalization, the staged training loop and the attention-drift score.
//!
//! Stage 1 freezes every `backbone.*` parameter and trains the integration
//! module and action expert. Because the backbone is fixed, its context
//! features are computed once per training tuple and fed in as constants.
//! Stage 2 unfreezes everything with separate backbone and expert learning
//! rates; a backbone rate of zero keeps the backbone frozen. The single-stage
//! baseline trains all parameters jointly from step 0.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{backbone_states, Instruction, ObservationSet};
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::flow::{flow_target, interpolate, sample_tau_in};
use crate::graph::{Grads, Graph};
use crate::model::{encode, encode_cached, init_model, mse, precompute_context, velocity, CachedContext, ModelConfig};
use crate::params::{Param, ParamId, ParamStore};
use crate::rng::{sample_gaussian, Rng};
use crate::tensor::Tensor;

pub const NORM_STD_FLOOR: f64 = 1e-6;
pub const BACKBONE_PREFIX: &str = "backbone.";
/// Samples per backbone pass when filling the context cache.
const CACHE_BATCH: usize = 64;
/// Stream ids split off the run seed.
const TRAIN_STREAM: u64 = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub action_mean: Vec<f32>,
    pub action_std: Vec<f32>,
    pub state_mean: Vec<f32>,
    pub state_std: Vec<f32>,
}

fn moments(rows: &[&[f32]]) -> (Vec<f32>, Vec<f32>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0f64; d];
    for r in rows {
        for (m, &v) in mean.iter_mut().zip(r.iter()) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; d];
    for r in rows {
        for ((s, &v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    let std = var
        .iter()
        .map(|s| ((s / n).sqrt().max(NORM_STD_FLOOR)) as f32)
        .collect();
    (mean.iter().map(|&m| m as f32).collect(), std)
}

impl NormStats {
    pub fn identity(action_dim: usize, state_dim: usize) -> Self {
        NormStats {
            action_mean: vec![0.0; action_dim],
            action_std: vec![1.0; action_dim],
            state_mean: vec![0.0; state_dim],
            state_std: vec![1.0; state_dim],
        }
    }

    pub fn normalize_action(&self, a: &[f32]) -> Vec<f32> {
        norm(a, &self.action_mean, &self.action_std)
    }

    pub fn denormalize_action(&self, a: &[f32]) -> Vec<f32> {
        denorm(a, &self.action_mean, &self.action_std)
    }

    pub fn normalize_state(&self, s: &[f32]) -> Vec<f32> {
        norm(s, &self.state_mean, &self.state_std)
    }

    pub fn denormalize_state(&self, s: &[f32]) -> Vec<f32> {
        denorm(s, &self.state_mean, &self.state_std)
    }
}

fn norm(x: &[f32], mean: &[f32], std: &[f32]) -> Vec<f32> {
    x.iter().zip(mean).zip(std).map(|((&v, &m), &s)| (v - m) / s).collect()
}

fn denorm(x: &[f32], mean: &[f32], std: &[f32]) -> Vec<f32> {
    x.iter().zip(mean).zip(std).map(|((&v, &m), &s)| v * s + m).collect()
}

/// Population statistics over every demonstrated action and state.
pub fn compute_norm_stats(ds: &Dataset) -> Result<NormStats> {
    let steps: Vec<_> = ds.episodes.iter().flat_map(|e| e.steps.iter()).collect();
    if steps.is_empty() {
        return Err(Error::Dataset("cannot compute statistics of an empty dataset".into()));
    }
    let actions: Vec<&[f32]> = steps.iter().map(|s| &s.action[..]).collect();
    let states: Vec<&[f32]> = steps.iter().map(|s| s.state.as_slice()).collect();
    let (action_mean, action_std) = moments(&actions);
    let (state_mean, state_std) = moments(&states);
    Ok(NormStats {
        action_mean,
        action_std,
        state_mean,
        state_std,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "single")]
    Single,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::One => "1",
            Stage::Two => "2",
            Stage::Single => "single",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Stage::One),
            "2" => Ok(Stage::Two),
            "single" => Ok(Stage::Single),
            _ => Err(Error::Config(format!("stage must be 1, 2 or single, got {s:?}"))),
        }
    }
}

/// One normalized training tuple.
pub struct TrainSample<'a> {
    pub obs: &'a ObservationSet,
    pub instr: &'a Instruction,
    pub state: Vec<f32>,
    /// `H × d_a`.
    pub actions: Tensor<f32>,
}

pub struct TrainData<'a> {
    pub samples: Vec<TrainSample<'a>>,
}

impl<'a> TrainData<'a> {
    pub fn new(ds: &'a Dataset, norm: &NormStats, chunk_h: usize) -> Result<Self> {
        let d_a = norm.action_mean.len();
        let samples: Vec<_> = ds
            .tuple_index()
            .into_iter()
            .map(|(e, t)| {
                let ep = &ds.episodes[e];
                let window: Vec<f32> = ds
                    .action_window(e, t, chunk_h)
                    .iter()
                    .flat_map(|a| norm.normalize_action(a))
                    .collect();
                Ok(TrainSample {
                    obs: &ep.steps[t].obs,
                    instr: &ep.instruction,
                    state: norm.normalize_state(&ep.steps[t].state),
                    actions: Tensor::new(vec![chunk_h, d_a], window)?,
                })
            })
            .collect::<Result<_>>()?;
        if samples.is_empty() {
            return Err(Error::Dataset("no training tuples".into()));
        }
        Ok(TrainData { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Evenly spaced probe inputs for drift measurements.
    pub fn probes(&self, n: usize) -> Vec<(&'a ObservationSet, &'a Instruction)> {
        let n = n.clamp(1, self.samples.len());
        (0..n)
            .map(|i| {
                let s = &self.samples[i * self.samples.len() / n];
                (s.obs, s.instr)
            })
            .collect()
    }
}

/// Everything a checkpoint restores.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: RunConfig,
    pub params: ParamStore<f32>,
    pub norm: NormStats,
    pub rng: Rng,
    /// Optimizer steps taken over the whole run.
    pub step: u64,
    pub stage: Stage,
    /// Steps taken in `stage`.
    pub stage_step: u64,
}

impl TrainState {
    pub fn new(config: RunConfig, norm: NormStats) -> Result<Self> {
        config.validate()?;
        let params = init_model(&config.model(), config.seed)?;
        let rng = Rng::new(config.seed).split(TRAIN_STREAM);
        Ok(TrainState {
            config,
            params,
            norm,
            rng,
            step: 0,
            stage: Stage::One,
            stage_step: 0,
        })
    }

    pub fn model(&self) -> ModelConfig {
        self.config.model()
    }

    /// Enters `stage`, resetting the stage counter unless already in it.
    pub fn begin_stage(&mut self, stage: Stage) {
        if self.stage != stage || self.step == 0 {
            self.stage = stage;
            self.stage_step = 0;
        }
    }

    pub fn stage_budget(&self, stage: Stage) -> u64 {
        let t = &self.config.train;
        (match stage {
            Stage::One => t.stage1_steps,
            Stage::Two => t.stage2_steps,
            Stage::Single => t.single_budget(),
        }) as u64
    }

    fn backbone_frozen(&self, stage: Stage) -> bool {
        match stage {
            Stage::One => true,
            Stage::Two => self.config.train.lr_backbone == 0.0,
            Stage::Single => false,
        }
    }

    fn base_lr(&self, stage: Stage, p: &Param<f32>) -> f64 {
        let t = &self.config.train;
        match stage {
            Stage::One | Stage::Single => t.lr_stage1,
            Stage::Two if p.name.starts_with(BACKBONE_PREFIX) => t.lr_backbone,
            Stage::Two => t.lr_expert,
        }
    }

    fn warmup(&self) -> f64 {
        let w = self.config.train.warmup_steps as f64;
        if w == 0.0 {
            1.0
        } else {
            ((self.stage_step + 1) as f64 / w).min(1.0)
        }
    }

    pub fn backbone_hash(&self) -> u64 {
        self.params.hash_prefix(BACKBONE_PREFIX)
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: Stage,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

fn clip_group(grads: &mut Grads<f32>, max_norm: f64, keep: impl Fn(ParamId) -> bool + Copy) {
    if max_norm <= 0.0 {
        return;
    }
    let n = grads.norm_where(keep) as f64;
    if n > max_norm {
        grads.scale_where((max_norm / n) as f32, keep);
    }
}

/// Runs `stage` until its budget is spent, resuming from `state.stage_step`.
/// `on_step` sees every record; returning an error stops training.
pub fn train_stage(
    state: &mut TrainState,
    data: &TrainData,
    stage: Stage,
    on_step: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<()> {
    state.begin_stage(stage);
    let budget = state.stage_budget(stage);
    let frozen = state.backbone_frozen(stage);
    state.params.set_frozen_prefix(BACKBONE_PREFIX, frozen);
    if state.stage_step >= budget {
        return Ok(());
    }
    let model = state.model();
    let cache = if frozen {
        Some(build_cache(&state.params, &model, data)?)
    } else {
        None
    };
    let backbone_ids: Vec<bool> = state
        .params
        .iter()
        .map(|(_, p)| p.name.starts_with(BACKBONE_PREFIX))
        .collect();
    let flow = state.config.flow.clone();
    let batch = state.config.train.batch_size;
    let clip = state.config.train.grad_clip;
    let opt = state.config.train.optimizer;
    let (h, d_a) = (model.chunk_h, model.action_dim);
    let base_lr: HashMap<String, f64> = state
        .params
        .iter()
        .map(|(_, p)| (p.name.clone(), state.base_lr(stage, p)))
        .collect();

    while state.stage_step < budget {
        let t0 = Instant::now();
        let idx: Vec<usize> = (0..batch).map(|_| state.rng.below(data.len())).collect();
        let mut taus = Vec::with_capacity(batch);
        let mut noisy = Vec::with_capacity(batch * h * d_a);
        let mut target = Vec::with_capacity(batch * h * d_a);
        let mut states = Vec::with_capacity(batch * model.state_dim);
        for &i in &idx {
            let s = &data.samples[i];
            let tau = sample_tau_in(&mut state.rng, flow.beta_alpha, flow.beta_beta, flow.clamp)?;
            let eps: Tensor<f32> = sample_gaussian(&mut state.rng, &[h, d_a]);
            noisy.extend_from_slice(interpolate(&s.actions, &eps, tau as f32)?.data());
            target.extend_from_slice(flow_target(&s.actions, &eps)?.data());
            states.extend_from_slice(&s.state);
            taus.push(tau);
        }

        let mut g = Graph::new();
        let enc = match &cache {
            Some(c) => {
                let ctx: Vec<&CachedContext> = idx.iter().map(|&i| &c[i]).collect();
                encode_cached(&mut g, &model, &ctx)?
            }
            None => {
                let obs: Vec<_> = idx.iter().map(|&i| data.samples[i].obs).collect();
                let ins: Vec<_> = idx.iter().map(|&i| data.samples[i].instr).collect();
                encode(&mut g, &state.params, &model, &obs, &ins)?
            }
        };
        let sv = g.input(Tensor::new(vec![batch, model.state_dim], states)?);
        let xv = g.input(Tensor::new(vec![batch * h, d_a], noisy)?);
        let uv = g.input(Tensor::new(vec![batch * h, d_a], target)?);
        let out = velocity(&mut g, &state.params, &model, &enc, sv, xv, &taus)?;
        let loss_v = mse(&mut g, out.expert.velocity, uv)?;
        let loss = g.value(loss_v).data()[0] as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: state.step });
        }
        let mut grads = g.backward(loss_v)?;
        drop(g);
        clip_group(&mut grads, clip, |id| backbone_ids[id.index()]);
        clip_group(&mut grads, clip, |id| !backbone_ids[id.index()]);

        let warm = state.warmup();
        let lr_expert = match stage {
            Stage::Two => state.config.train.lr_expert,
            _ => state.config.train.lr_stage1,
        } * warm;
        opt.step(&mut state.params, &grads, |p| base_lr[p.name.as_str()] * warm)?;
        state.step += 1;
        state.stage_step += 1;
        on_step(&StepRecord {
            step: state.step,
            stage,
            loss,
            lr: lr_expert,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        })?;
    }
    Ok(())
}

fn build_cache(params: &ParamStore<f32>, model: &ModelConfig, data: &TrainData) -> Result<Vec<CachedContext>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(CACHE_BATCH) {
        let obs: Vec<_> = chunk.iter().map(|s| s.obs).collect();
        let ins: Vec<_> = chunk.iter().map(|s| s.instr).collect();
        out.extend(precompute_context(params, model, &obs, &ins)?);
    }
    Ok(out)
}

/// Head-averaged self-attention of every backbone layer for one input,
/// flattened per layer.
pub fn attention_maps(
    params: &ParamStore<f32>,
    model: &ModelConfig,
    obs: &ObservationSet,
    instr: &Instruction,
) -> Result<Vec<Vec<f32>>> {
    let st = backbone_states(params, &model.backbone, obs, instr, model.backbone.layers)?;
    Ok(st.attention.into_iter().map(|m| m.weights.into_data()).collect())
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if a == b {
        return 1.0;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

fn check_same_backbone(a: &ParamStore<f32>, b: &ParamStore<f32>) -> Result<()> {
    let shapes = |s: &ParamStore<f32>| -> Vec<(String, Vec<usize>)> {
        s.iter()
            .filter(|(_, p)| p.name.starts_with(BACKBONE_PREFIX))
            .map(|(_, p)| (p.name.clone(), p.value.shape().to_vec()))
            .collect()
    };
    if shapes(a) != shapes(b) {
        return Err(Error::Config(
            "attention drift needs identical backbone architectures".into(),
        ));
    }
    Ok(())
}

/// Mean cosine similarity of the attention maps of every backbone layer over
/// the probes; entry `l-1` is layer `l`.
pub fn attention_drift_per_layer(
    model: &ModelConfig,
    reference: &ParamStore<f32>,
    candidate: &ParamStore<f32>,
    probes: &[(&ObservationSet, &Instruction)],
) -> Result<Vec<f64>> {
    check_same_backbone(reference, candidate)?;
    if probes.is_empty() {
        return Err(Error::InvalidArgument("empty probe set".into()));
    }
    let mut sums = vec![0.0; model.backbone.layers];
    for (obs, instr) in probes {
        let a = attention_maps(reference, model, obs, instr)?;
        let b = attention_maps(candidate, model, obs, instr)?;
        for (l, (x, y)) in a.iter().zip(&b).enumerate() {
            sums[l] += cosine(x, y);
        }
    }
    Ok(sums.into_iter().map(|s| s / probes.len() as f64).collect())
}

/// Drift score at the extraction layer: 1.0 means perfectly preserved.
pub fn attention_drift(
    model: &ModelConfig,
    reference: &ParamStore<f32>,
    candidate: &ParamStore<f32>,
    probes: &[(&ObservationSet, &Instruction)],
) -> Result<f64> {
    let per = attention_drift_per_layer(model, reference, candidate, probes)?;
    Ok(per[model.backbone.extract_layer - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_demos, Episode, Step};
    use crate::env::{EnvConfig, Task};

    fn tiny_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.apply_overrides(&[
            "backbone.d_z=32",
            "backbone.layers=2",
            "backbone.extract_layer=2",
            "backbone.heads=2",
            "backbone.d_patch=8",
            "dit.width=32",
            "dit.depth=2",
            "dit.heads=2",
            "dit.time_dim=16",
            "chunk.h=4",
            "train.batch_size=4",
            "train.warmup_steps=5",
        ])
        .unwrap();
        c
    }

    fn fake_dataset(actions: &[[f32; 3]], states: &[[f32; 4]]) -> Dataset {
        let mut ds = generate_demos(&EnvConfig::default(), Task::Reach, 1, 0, 4).unwrap();
        let obs = ds.episodes[0].steps[0].obs.clone();
        ds.episodes = vec![Episode {
            seed: 0,
            instruction: ds.episodes[0].instruction.clone(),
            steps: actions
                .iter()
                .zip(states)
                .map(|(a, s)| Step {
                    obs: obs.clone(),
                    state: s.to_vec(),
                    action: *a,
                })
                .collect(),
            success: true,
        }];
        ds
    }

    #[test]
    fn norm_stats_examples() {
        let ds = fake_dataset(&[[0.0, 5.0, 1.0], [2.0, 5.0, 1.0]], &[[0.0; 4], [2.0; 4]]);
        let n = compute_norm_stats(&ds).unwrap();
        assert_eq!(n.action_mean, vec![1.0, 5.0, 1.0]);
        assert_eq!(n.action_std[0], 1.0);
        assert_eq!(n.action_std[1], NORM_STD_FLOOR as f32);
        assert_eq!(n.normalize_action(&[2.0, 5.0, 1.0])[1], 0.0);
        assert_eq!(n.state_mean, vec![1.0; 4]);

        let one = fake_dataset(&[[0.3, -0.2, 1.0]], &[[0.1, 0.2, 0.0, 1.0]]);
        let n1 = compute_norm_stats(&one).unwrap();
        assert_eq!(n1.action_mean, vec![0.3, -0.2, 1.0]);

        let mut empty = one.clone();
        empty.episodes[0].steps.clear();
        assert!(compute_norm_stats(&empty).is_err());
    }

    #[test]
    fn normalization_round_trip() {
        let ds = generate_demos(&EnvConfig::default(), Task::PickPlace, 3, 5, 4).unwrap();
        let n = compute_norm_stats(&ds).unwrap();
        for ep in &ds.episodes {
            for s in &ep.steps {
                let back = n.denormalize_action(&n.normalize_action(&s.action));
                for (x, y) in back.iter().zip(&s.action) {
                    assert!((x - y).abs() < 1e-6);
                }
                let back = n.denormalize_state(&n.normalize_state(&s.state));
                for (x, y) in back.iter().zip(&s.state) {
                    assert!((x - y).abs() < 1e-6);
                }
            }
        }
    }

    fn setup(cfg: RunConfig) -> (Dataset, TrainState) {
        let ds = generate_demos(&cfg.env, Task::Reach, 3, 1, cfg.chunk.h).unwrap();
        let norm = compute_norm_stats(&ds).unwrap();
        (ds, TrainState::new(cfg, norm).unwrap())
    }

    fn run(state: &mut TrainState, ds: &Dataset, stage: Stage) -> Vec<StepRecord> {
        let data = TrainData::new(ds, &state.norm, state.config.chunk.h).unwrap();
        let mut log = Vec::new();
        train_stage(state, &data, stage, &mut |r| {
            log.push(r.clone());
            Ok(())
        })
        .unwrap();
        log
    }

    #[test]
    fn stage_one_freezes_backbone_and_moves_expert() {
        let mut cfg = tiny_config();
        cfg.train.stage1_steps = 5;
        let (ds, mut st) = setup(cfg);
        let before = st.params.clone();
        let log = run(&mut st, &ds, Stage::One);
        assert_eq!(log.len(), 5);
        assert!(log.iter().all(|r| r.loss.is_finite() && r.stage == Stage::One));
        assert_eq!(st.backbone_hash(), before.hash_prefix(BACKBONE_PREFIX));
        assert_ne!(st.params.hash_prefix("expert."), before.hash_prefix("expert."));
        assert_ne!(
            st.params.hash_prefix("integration."),
            before.hash_prefix("integration.")
        );
    }

    #[test]
    fn stage_two_moves_backbone_unless_its_lr_is_zero() {
        let mut cfg = tiny_config();
        cfg.train.stage1_steps = 2;
        cfg.train.stage2_steps = 2;
        let (ds, mut st) = setup(cfg.clone());
        run(&mut st, &ds, Stage::One);
        let h1 = st.backbone_hash();
        let mut frozen = st.clone();
        run(&mut st, &ds, Stage::Two);
        assert_ne!(st.backbone_hash(), h1);

        frozen.config.train.lr_backbone = 0.0;
        let mut reference = frozen.clone();
        run(&mut frozen, &ds, Stage::Two);
        assert_eq!(frozen.backbone_hash(), h1);
        // The same two steps as a continued stage 1 at the expert rate.
        reference.config.train.lr_stage1 = reference.config.train.lr_expert;
        reference.config.train.stage1_steps = 2;
        reference.stage_step = 0;
        run(&mut reference, &ds, Stage::One);
        assert_eq!(reference.params, frozen.params);
    }

    #[test]
    fn single_stage_trains_everything_from_step_zero() {
        let mut cfg = tiny_config();
        cfg.train.stage1_steps = 1;
        cfg.train.single_steps = 1;
        let (ds, two) = setup(cfg);
        let mut one = two.clone();
        let mut single = two.clone();
        run(&mut one, &ds, Stage::One);
        let data = TrainData::new(&ds, &single.norm, 4).unwrap();
        single.params.set_frozen_prefix(BACKBONE_PREFIX, false);
        assert_eq!(single.params.trainable_count(), single.params.total_count());
        train_stage(&mut single, &data, Stage::Single, &mut |_| Ok(())).unwrap();
        assert_eq!(single.params.trainable_count(), single.params.total_count());
        // The zero-initialized output head blocks every upstream gradient on
        // the first step, so both runs take the same first update.
        assert_eq!(one.params.hash_prefix(""), single.params.hash_prefix(""));
        // The second step reaches the backbone in the single-stage run only.
        one.config.train.stage1_steps = 2;
        single.config.train.single_steps = 2;
        run(&mut one, &ds, Stage::One);
        train_stage(&mut single, &data, Stage::Single, &mut |_| Ok(())).unwrap();
        assert_ne!(one.backbone_hash(), single.backbone_hash());
        assert_ne!(single.backbone_hash(), two.backbone_hash());
    }

    #[test]
    fn nan_loss_aborts_with_step() {
        let mut cfg = tiny_config();
        cfg.train.stage1_steps = 3;
        let (ds, mut st) = setup(cfg);
        let id = st.params.id("expert.final.out.b").unwrap();
        st.params.value_mut(id).data_mut()[0] = f32::NAN;
        let data = TrainData::new(&ds, &st.norm, 4).unwrap();
        match train_stage(&mut st, &data, Stage::One, &mut |_| Ok(())) {
            Err(Error::NonFiniteLoss { step }) => assert_eq!(step, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn drift_self_is_one_and_reinit_is_lower() {
        let cfg = tiny_config();
        let (ds, st) = setup(cfg.clone());
        let data = TrainData::new(&ds, &st.norm, 4).unwrap();
        let probes = data.probes(4);
        let model = st.model();
        assert_eq!(attention_drift(&model, &st.params, &st.params, &probes).unwrap(), 1.0);
        let other = init_model::<f32>(&model, 777).unwrap();
        assert!(attention_drift(&model, &st.params, &other, &probes).unwrap() < 1.0);
        let mut small = cfg;
        small.backbone.layers = 3;
        let mismatched = init_model::<f32>(&small.model(), 0).unwrap();
        assert!(attention_drift(&model, &st.params, &mismatched, &probes).is_err());
    }
}
