//! Inference latency and memory.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{Instruction, ObservationSet};
use crate::error::{Error, Result};
use crate::eval::LearnedPolicy;
use crate::rng::Rng;

pub const MIN_ITERS: usize = 10;
pub const TIMING_SCOPE: &str =
    "policy only: one full H-step chunk prediction per iteration, environment stepping excluded";

/// Peak-memory source. The CLI installs a counting global allocator; library
/// callers fall back to the OS resident-set high-water mark.
pub trait MemoryProbe {
    fn method(&self) -> &'static str;
    fn reset_peak(&self);
    fn peak_bytes(&self) -> Option<u64>;
}

/// `VmHWM` from `/proc/self/status`, reset through `clear_refs` when the
/// kernel allows it.
pub struct RssProbe;

impl MemoryProbe for RssProbe {
    fn method(&self) -> &'static str {
        "os-rss-high-water"
    }

    fn reset_peak(&self) {
        // Best effort; unprivileged containers may refuse.
        let _ = std::fs::write("/proc/self/clear_refs", "5");
    }

    fn peak_bytes(&self) -> Option<u64> {
        let status = std::fs::read_to_string("/proc/self/status").ok()?;
        let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
        let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
        Some(kb * 1024)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model_id: String,
    pub param_count: usize,
    pub sampler_steps: usize,
    pub chunk_h: usize,
    pub n_warmup: usize,
    pub n_iters: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    /// `1000 / mean_ms`.
    pub frequency_hz: f64,
    pub peak_memory_mb: Option<f64>,
    pub memory_method: String,
    pub hardware: String,
    pub timing_scope: String,
}

pub fn hardware_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{cpu}; {threads} hardware threads; {}-{}; single-threaded run",
        std::env::consts::ARCH,
        std::env::consts::OS
    )
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Times `n_iters` chunk predictions after `n_warmup` untimed ones.
pub fn benchmark_inference(
    policy: &LearnedPolicy,
    model_id: &str,
    input: (&ObservationSet, &Instruction, &[f32]),
    n_warmup: usize,
    n_iters: usize,
    probe: &dyn MemoryProbe,
) -> Result<BenchReport> {
    if n_iters < MIN_ITERS {
        return Err(Error::InvalidArgument(format!(
            "n_iters must be at least {MIN_ITERS}, got {n_iters}"
        )));
    }
    let (obs, instr, state) = input;
    let mut rng = Rng::new(0);
    for _ in 0..n_warmup {
        policy.predict_chunk(obs, instr, state, &mut rng)?;
    }
    probe.reset_peak();
    let mut times = Vec::with_capacity(n_iters);
    for _ in 0..n_iters {
        let t = Instant::now();
        std::hint::black_box(policy.predict_chunk(obs, instr, state, &mut rng)?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let peak = probe.peak_bytes();
    let mean_ms = times.iter().sum::<f64>() / n_iters as f64;
    times.sort_by(f64::total_cmp);
    Ok(BenchReport {
        model_id: model_id.to_string(),
        param_count: policy.params.total_count(),
        sampler_steps: policy.sampler.steps,
        chunk_h: policy.model.chunk_h,
        n_warmup,
        n_iters,
        mean_ms,
        median_ms: median(&times),
        frequency_hz: 1000.0 / mean_ms,
        peak_memory_mb: peak.map(|b| b as f64 / (1024.0 * 1024.0)),
        memory_method: if peak.is_some() { probe.method() } else { "unavailable" }.to_string(),
        hardware: hardware_descriptor(),
        timing_scope: TIMING_SCOPE.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::env::{Env, EnvConfig, Task};
    use crate::flow::SamplerConfig;
    use crate::model::init_model;
    use crate::trainer::NormStats;

    fn policy(steps: usize) -> LearnedPolicy {
        let mut c = RunConfig::default();
        c.apply_overrides(&["backbone.d_z=32", "backbone.d_patch=8", "dit.width=32", "dit.depth=2"])
            .unwrap();
        LearnedPolicy {
            model: c.model(),
            params: init_model(&c.model(), 0).unwrap(),
            norm: NormStats::identity(3, 4),
            sampler: SamplerConfig { steps },
        }
    }

    #[test]
    fn frequency_is_reciprocal_and_few_iters_rejected() {
        let (env, obs, instr) = Env::reset(&EnvConfig::default(), Task::Reach, 1).unwrap();
        let s = env.state.robot_state().values;
        let p = policy(2);
        let r = benchmark_inference(&p, "tiny", (&obs, &instr, &s), 1, 10, &RssProbe).unwrap();
        assert_eq!(r.frequency_hz, 1000.0 / r.mean_ms);
        assert_eq!(r.n_iters, 10);
        assert!(r.median_ms > 0.0);
        assert!(benchmark_inference(&p, "tiny", (&obs, &instr, &s), 0, 9, &RssProbe).is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[1.0, 2.0, 9.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 4.0, 9.0]), 3.0);
    }
}
