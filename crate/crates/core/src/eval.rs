//! Closed-loop evaluation.

use serde::{Deserialize, Serialize};

use crate::backbone::{Instruction, ObservationSet};
use crate::env::{expert_action, Env, EnvConfig, EnvState, Task};
use crate::error::{Error, Result};
use crate::flow::SamplerConfig;
use crate::model::{predict_normalized, ModelConfig};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::trainer::{NormStats, TrainState};

/// Anything that maps an observation to a sequence of actions.
pub trait Policy {
    /// Actions to execute, in environment units.
    fn act(
        &mut self,
        obs: &ObservationSet,
        instr: &Instruction,
        env: &EnvState,
        rng: &mut Rng,
    ) -> Result<Vec<[f32; 3]>>;
}

/// Learned policy with denormalization at the environment boundary.
#[derive(Clone, Debug)]
pub struct LearnedPolicy {
    pub model: ModelConfig,
    pub params: ParamStore<f32>,
    pub norm: NormStats,
    pub sampler: SamplerConfig,
}

impl LearnedPolicy {
    pub fn from_state(st: &TrainState) -> Self {
        LearnedPolicy {
            model: st.model(),
            params: st.params.clone(),
            norm: st.norm.clone(),
            sampler: st.config.sampler.clone(),
        }
    }

    /// One denormalized `H × d_a` chunk.
    pub fn predict_chunk(
        &self,
        obs: &ObservationSet,
        instr: &Instruction,
        state: &[f32],
        rng: &mut Rng,
    ) -> Result<Vec<Vec<f32>>> {
        let s = self.norm.normalize_state(state);
        let a = predict_normalized(&self.params, &self.model, obs, instr, &s, &self.sampler, rng)?;
        Ok((0..a.rows()).map(|r| self.norm.denormalize_action(a.row(r))).collect())
    }
}

impl Policy for LearnedPolicy {
    fn act(
        &mut self,
        obs: &ObservationSet,
        instr: &Instruction,
        env: &EnvState,
        rng: &mut Rng,
    ) -> Result<Vec<[f32; 3]>> {
        let chunk = self.predict_chunk(obs, instr, &env.robot_state().values, rng)?;
        chunk
            .into_iter()
            .map(|a| {
                <[f32; 3]>::try_from(a.as_slice())
                    .map_err(|_| Error::Config(format!("policy emits {}-d actions, environment needs 3", a.len())))
            })
            .collect()
    }
}

/// The scripted controller, one action per call.
pub struct ExpertPolicy;

impl Policy for ExpertPolicy {
    fn act(&mut self, _: &ObservationSet, _: &Instruction, env: &EnvState, _: &mut Rng) -> Result<Vec<[f32; 3]>> {
        Ok(vec![expert_action(env)])
    }
}

/// Uniform actions in `[-1, 1]³`.
pub struct RandomPolicy {
    pub chunk: usize,
}

impl Policy for RandomPolicy {
    fn act(&mut self, _: &ObservationSet, _: &Instruction, _: &EnvState, rng: &mut Rng) -> Result<Vec<[f32; 3]>> {
        Ok((0..self.chunk)
            .map(|_| [0; 3].map(|_: i32| rng.range(-1.0, 1.0) as f32))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub env_seed: u64,
    pub success: bool,
    pub steps: usize,
    pub replans: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub trials: usize,
    pub seed: u64,
    pub replan_every: Option<usize>,
    pub successes: usize,
    pub success_rate: f64,
    pub episodes: Vec<EpisodeLog>,
}

const EPISODE_STREAM: u64 = 1 << 40;
const POLICY_STREAM: u64 = 1 << 32;

/// Environment seed of evaluation episode `i`. Drawn from a stream that
/// demonstration generation never uses, so no seed replays the demos.
pub fn episode_seed(seed: u64, i: usize) -> u64 {
    Rng::new(seed).split(EPISODE_STREAM | i as u64).next_u64()
}

/// Closed-loop rollouts. Each call to the policy yields a chunk; the first
/// `replan_every` actions of it (all of them when `None`) are executed
/// before asking again.
pub fn evaluate(
    policy: &mut dyn Policy,
    cfg: &EnvConfig,
    task: Task,
    trials: usize,
    seed: u64,
    replan_every: Option<usize>,
) -> Result<EvalReport> {
    if trials == 0 || replan_every == Some(0) {
        return Err(Error::InvalidArgument(
            "trials and replan interval must be positive".into(),
        ));
    }
    let mut episodes = Vec::with_capacity(trials);
    for i in 0..trials {
        let env_seed = episode_seed(seed, i);
        // Policy randomness gets its own stream per episode.
        let mut rng = Rng::new(seed).split(POLICY_STREAM | i as u64);
        let (mut env, mut obs, instr) = Env::reset(cfg, task, env_seed)?;
        let mut replans = 0;
        'episode: while !env.state.done {
            let chunk = policy.act(&obs, &instr, &env.state, &mut rng)?;
            replans += 1;
            let n = replan_every.map_or(chunk.len(), |k| k.min(chunk.len()));
            if n == 0 {
                return Err(Error::InvalidArgument("policy returned an empty chunk".into()));
            }
            for a in &chunk[..n] {
                obs = env.step(a)?.obs;
                if env.state.done {
                    break 'episode;
                }
            }
        }
        episodes.push(EpisodeLog {
            episode: i,
            env_seed,
            success: env.state.success,
            steps: env.state.t,
            replans,
        });
    }
    let successes = episodes.iter().filter(|e| e.success).count();
    Ok(EvalReport {
        task,
        trials,
        seed,
        replan_every,
        successes,
        success_rate: successes as f64 / trials as f64,
        episodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expert_policy_succeeds_on_reach() {
        let r = evaluate(&mut ExpertPolicy, &EnvConfig::default(), Task::Reach, 100, 3, None).unwrap();
        assert!(r.success_rate >= 0.99, "{}", r.success_rate);
    }

    #[test]
    fn random_policy_mostly_fails_on_reach() {
        let r = evaluate(
            &mut RandomPolicy { chunk: 8 },
            &EnvConfig::default(),
            Task::Reach,
            100,
            3,
            None,
        )
        .unwrap();
        assert!(r.success_rate < 0.1, "{}", r.success_rate);
    }

    #[test]
    fn evaluation_is_reproducible() {
        let go = || {
            evaluate(
                &mut RandomPolicy { chunk: 4 },
                &EnvConfig::default(),
                Task::Push,
                20,
                9,
                Some(2),
            )
            .unwrap()
        };
        assert_eq!(go(), go());
        assert_eq!(go().episodes.len(), 20);
    }

    #[test]
    fn evaluation_episodes_differ_from_demos_with_the_same_seed() {
        let ds = crate::dataset::generate_demos(&EnvConfig::default(), Task::Reach, 20, 4, 8).unwrap();
        let demo: Vec<u64> = ds.episodes.iter().map(|e| e.seed).collect();
        assert!((0..20).all(|i| !demo.contains(&episode_seed(4, i))));
    }

    #[test]
    fn replan_interval_controls_policy_calls() {
        let cfg = EnvConfig {
            t_max: 12,
            ..EnvConfig::default()
        };
        let mut p = RandomPolicy { chunk: 4 };
        let open = evaluate(&mut p, &cfg, Task::PickPlace, 5, 1, None).unwrap();
        let dense = evaluate(&mut p, &cfg, Task::PickPlace, 5, 1, Some(1)).unwrap();
        for (o, d) in open.episodes.iter().zip(&dense.episodes) {
            if !o.success {
                assert_eq!(o.replans, 3);
            }
            if !d.success {
                assert_eq!(d.replans, 12);
            }
        }
        assert!(evaluate(&mut p, &cfg, Task::Reach, 0, 1, None).is_err());
    }
}
