//! Integration-variant ablation and the two-stage vs single-stage comparison.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{generate_demos, Dataset};
use crate::env::Task;
use crate::error::{Error, Result};
use crate::eval::{evaluate, LearnedPolicy};
use crate::integration::Variant;
use crate::model::init_model;
use crate::trainer::{attention_drift, compute_norm_stats, train_stage, Stage, StepRecord, TrainData, TrainState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Paradigm {
    TwoStage,
    Single,
}

/// Trains a fresh model on `ds` and returns the final state.
pub fn train_run(
    cfg: &RunConfig,
    ds: &Dataset,
    paradigm: Paradigm,
    on_step: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<TrainState> {
    let norm = compute_norm_stats(ds)?;
    let mut st = TrainState::new(cfg.clone(), norm)?;
    let data = TrainData::new(ds, &st.norm, cfg.chunk.h)?;
    match paradigm {
        Paradigm::TwoStage => {
            train_stage(&mut st, &data, Stage::One, on_step)?;
            train_stage(&mut st, &data, Stage::Two, on_step)?;
        }
        Paradigm::Single => train_stage(&mut st, &data, Stage::Single, on_step)?,
    }
    Ok(st)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub tasks: Vec<Task>,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub n_demos: usize,
    /// Shared by every cell so all variants see the same demonstrations.
    pub data_seed: u64,
    pub trials: usize,
    pub eval_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub task: Task,
    pub variant: Variant,
    pub seed: u64,
    /// `None` when training aborted.
    pub success_rate: Option<f64>,
    pub steps_trained: u64,
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationAggregate {
    pub task: Task,
    pub variant: Variant,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
    pub completed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub aggregates: Vec<AblationAggregate>,
}

pub fn ablate_integration(
    base: &RunConfig,
    spec: &AblationSpec,
    on_row: &mut dyn FnMut(&AblationRow),
) -> Result<AblationTable> {
    if spec.seeds.is_empty() || spec.variants.is_empty() || spec.tasks.is_empty() {
        return Err(Error::InvalidArgument(
            "ablation needs at least one task, variant and seed".into(),
        ));
    }
    let mut rows = Vec::new();
    for &task in &spec.tasks {
        let ds = generate_demos(&base.env, task, spec.n_demos, spec.data_seed, base.chunk.h)?;
        for &variant in &spec.variants {
            for &seed in &spec.seeds {
                let mut cfg = base.clone();
                cfg.integration.variant = variant;
                cfg.seed = seed;
                let mut steps = 0;
                let row = match train_run(&cfg, &ds, Paradigm::TwoStage, &mut |r| {
                    steps = r.step;
                    Ok(())
                }) {
                    Ok(st) => {
                        let mut policy = LearnedPolicy::from_state(&st);
                        let rep = evaluate(&mut policy, &cfg.env, task, spec.trials, spec.eval_seed, None)?;
                        AblationRow {
                            task,
                            variant,
                            seed,
                            success_rate: Some(rep.success_rate),
                            steps_trained: st.step,
                            status: "ok".into(),
                        }
                    }
                    Err(e @ Error::NonFiniteLoss { .. }) => AblationRow {
                        task,
                        variant,
                        seed,
                        success_rate: None,
                        steps_trained: steps,
                        status: format!("failed: {e}"),
                    },
                    Err(e) => return Err(e),
                };
                on_row(&row);
                rows.push(row);
            }
        }
    }
    Ok(AblationTable {
        aggregates: aggregate(&rows, spec),
        rows,
    })
}

fn aggregate(rows: &[AblationRow], spec: &AblationSpec) -> Vec<AblationAggregate> {
    let mut out = Vec::new();
    for &task in &spec.tasks {
        for &variant in &spec.variants {
            let xs: Vec<f64> = rows
                .iter()
                .filter(|r| r.task == task && r.variant == variant)
                .filter_map(|r| r.success_rate)
                .collect();
            let n = xs.len();
            let mean = if n == 0 {
                f64::NAN
            } else {
                xs.iter().sum::<f64>() / n as f64
            };
            let std = if n < 2 {
                0.0
            } else {
                (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            };
            out.push(AblationAggregate {
                task,
                variant,
                mean,
                std,
                completed: n,
            });
        }
    }
    out
}

fn rate(r: Option<f64>) -> String {
    r.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,variant,seed,success_rate,steps_trained,status\n");
        for r in &self.rows {
            let rate = r.success_rate.map_or(String::new(), |x| format!("{x}"));
            let _ = writeln!(
                s,
                "{},{},{},{rate},{},{}",
                r.task, r.variant, r.seed, r.steps_trained, r.status
            );
        }
        s
    }

    /// Column-aligned rows followed by per-variant mean ± std.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<10} {:>7} {:>6} {:>8} {:>7}  {}\n",
            "task", "variant", "seed", "success", "steps", "status"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:>7} {:>6} {:>8} {:>7}  {}",
                r.task.to_string(),
                r.variant.to_string(),
                r.seed,
                rate(r.success_rate),
                r.steps_trained,
                r.status
            );
        }
        s.push('\n');
        for a in &self.aggregates {
            let _ = writeln!(
                s,
                "{:<10} {:>7}  mean {:.3} ± {:.3}  ({} runs)",
                a.task.to_string(),
                a.variant.to_string(),
                a.mean,
                a.std,
                a.completed
            );
        }
        s
    }
}

/// Backbone attention preservation and success of both training paradigms
/// on one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParadigmRow {
    pub task: Task,
    pub seed: u64,
    pub two_stage_drift: f64,
    pub single_stage_drift: f64,
    pub two_stage_success: f64,
    pub single_stage_success: f64,
}

/// Drift is measured against the shared initialization on probes drawn
/// from the training data.
pub fn compare_paradigms(base: &RunConfig, spec: &AblationSpec, n_probes: usize) -> Result<Vec<ParadigmRow>> {
    let mut out = Vec::new();
    for &task in &spec.tasks {
        let ds = generate_demos(&base.env, task, spec.n_demos, spec.data_seed, base.chunk.h)?;
        for &seed in &spec.seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            let init = init_model(&cfg.model(), seed)?;
            let norm = compute_norm_stats(&ds)?;
            let data = TrainData::new(&ds, &norm, cfg.chunk.h)?;
            let probes = data.probes(n_probes);
            let mut res = Vec::new();
            for paradigm in [Paradigm::TwoStage, Paradigm::Single] {
                let st = train_run(&cfg, &ds, paradigm, &mut |_| Ok(()))?;
                let drift = attention_drift(&cfg.model(), &init, &st.params, &probes)?;
                let mut policy = LearnedPolicy::from_state(&st);
                let rep = evaluate(&mut policy, &cfg.env, task, spec.trials, spec.eval_seed, None)?;
                res.push((drift, rep.success_rate));
            }
            out.push(ParadigmRow {
                task,
                seed,
                two_stage_drift: res[0].0,
                single_stage_drift: res[1].0,
                two_stage_success: res[0].1,
                single_stage_success: res[1].1,
            });
        }
    }
    Ok(out)
}
