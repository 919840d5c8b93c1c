//! Acceptance criteria for the toyvla workspace, each a function returning
//! a one-line summary on success and the reason on failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use toyvla_core::ablation::{ablate_integration, compare_paradigms, train_run, AblationSpec, Paradigm};
use toyvla_core::bench::benchmark_inference;
use toyvla_core::checkpoint::{checkpoint_hash, load_checkpoint, save_checkpoint};
use toyvla_core::config::RunConfig;
use toyvla_core::dataset::{generate_demos, Dataset};
use toyvla_core::env::{Env, Task};
use toyvla_core::eval::{evaluate, LearnedPolicy};
use toyvla_core::flow::{euler_integrate, flow_target, interpolate, sample_tau, TRAIN_TAU_RANGE};
use toyvla_core::gradcheck::{check_pipeline, tiny_pipeline};
use toyvla_core::graph::AttnKind;
use toyvla_core::heap::HeapProbe;
use toyvla_core::integration::Variant;
use toyvla_core::model::{encode, init_model, velocity};
use toyvla_core::trainer::{
    attention_drift, attention_maps, compute_norm_stats, train_stage, NormStats, Stage, StepRecord, TrainData,
    TrainState,
};
use toyvla_core::{Error, Graph, Rng, Tensor};

pub type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T>(r: toyvla_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn c1_gradients() -> Outcome {
    let t = Instant::now();
    let r = ok(check_pipeline(&tiny_pipeline(Variant::A), 11))?;
    let secs = t.elapsed().as_secs_f64();
    let detail = format!(
        "max rel error {:.2e} over {} entries in {secs:.1} s",
        r.max_rel_error, r.entries
    );
    ensure!(r.max_rel_error < 1e-5, "{detail}, worst {:?}", r.worst);
    ensure!(secs < 60.0, "{detail}");
    Ok(detail)
}

fn c2_flow_identities() -> Outcome {
    let mut rng = Rng::new(7);
    let a = Tensor::<f32>::from_fn(&[8, 3], |_| rng.gaussian() as f32);
    let eps = Tensor::<f32>::from_fn(&[8, 3], |_| rng.gaussian() as f32);
    ensure!(
        ok(interpolate(&a, &eps, 0.0))? == eps,
        "tau = 0 does not give the noise bitwise"
    );
    ensure!(
        ok(interpolate(&a, &eps, 1.0))? == a,
        "tau = 1 does not give the actions bitwise"
    );

    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let a = Tensor::<f64>::from_fn(&[4, 3], |_| rng.gaussian() * 2.0);
        let eps = Tensor::<f64>::from_fn(&[4, 3], |_| rng.gaussian());
        let tau = rng.uniform();
        let at = ok(interpolate(&a, &eps, tau))?;
        let u = ok(flow_target(&a, &eps))?;
        for i in 0..a.len() {
            // Oracle written out independently of the library.
            let lhs = at.data()[i] + (1.0 - tau) * u.data()[i];
            worst = worst.max((lhs - a.data()[i]).abs());
            let expect_at = tau * a.data()[i] + (1.0 - tau) * eps.data()[i];
            worst = worst.max((at.data()[i] - expect_at).abs());
        }
    }
    ensure!(worst < 1e-6, "interpolation identity off by {worst:e}");

    let mut step_err = 0.0f64;
    for _ in 0..100 {
        let target = Tensor::<f64>::from_fn(&[8, 3], |_| rng.gaussian());
        let eps = Tensor::<f64>::from_fn(&[8, 3], |_| rng.gaussian());
        let out = ok(euler_integrate(eps.clone(), 1, |x, _| {
            Ok(Tensor::from_fn(x.shape(), |i| target.data()[i] - x.data()[i]))
        }))?;
        step_err = step_err.max(out.max_abs_diff(&target));
    }
    ensure!(step_err <= 1e-15, "one-step Euler misses by {step_err:e}");
    Ok(format!(
        "identity error {worst:.1e} over 10^4 triples, one-step Euler error {step_err:.1e}"
    ))
}

fn c3_sampler_order() -> Outcome {
    let a0 = Tensor::<f64>::from_fn(&[4, 2], |i| 0.5 + i as f64 * 0.25);
    let exact: Vec<f64> = a0.data().iter().map(|x| x * (-1.0f64).exp()).collect();
    let err = |s: usize| -> Result<f64, String> {
        let out = ok(euler_integrate(a0.clone(), s, |x, _| {
            Ok(Tensor::from_fn(x.shape(), |i| -x.data()[i]))
        }))?;
        // Closed form of forward Euler on dA/dτ = −A.
        let closed = (1.0 - 1.0 / s as f64).powi(s as i32);
        for (i, (&x, &a)) in out.data().iter().zip(a0.data()).enumerate() {
            if (x - a * closed).abs() > 1e-12 {
                return Err(format!("S={s}: entry {i} is {x}, closed form {}", a * closed));
            }
        }
        Ok(out
            .data()
            .iter()
            .zip(&exact)
            .map(|(x, e)| (x - e).abs())
            .fold(0.0, f64::max))
    };
    let mut ratios = Vec::new();
    for s in [5usize, 10, 20] {
        let r = err(s)? / err(2 * s)?;
        ensure!((1.7..=2.3).contains(&r), "ratio {r:.3} for S={s}");
        ratios.push(format!("S={s}: {r:.3}"));
    }
    Ok(format!("error ratios {}", ratios.join(", ")))
}

fn c4_tau_sampling() -> Outcome {
    let [lo, hi] = TRAIN_TAU_RANGE;
    let mut rng = Rng::new(3);
    for i in 0..1_000_000 {
        let t = ok(sample_tau(&mut rng, 1.5, 1.0))?;
        ensure!((lo..=hi).contains(&t), "draw {i} is {t}");
    }
    let mut sum = 0.0;
    for i in 0..1_000_000 {
        let t = ok(sample_tau(&mut rng, 1.0, 1.0))?;
        ensure!((lo..=hi).contains(&t), "uniform draw {i} is {t}");
        sum += t;
    }
    let mean = sum / 1e6;
    ensure!((mean - 0.5).abs() <= 0.005, "Beta(1,1) clamped mean {mean}");
    Ok(format!(
        "2·10^6 draws in [{lo}, {hi}], Beta(1,1) clamped mean {mean:.5}"
    ))
}

fn c5_stage1_freeze() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.train.stage1_steps = 500;
    let ds = ok(generate_demos(&cfg.env, Task::Reach, 20, 5, cfg.chunk.h))?;
    let norm = ok(compute_norm_stats(&ds))?;
    let mut st = ok(TrainState::new(cfg.clone(), norm))?;
    let init = st.params.clone();
    let hash0 = st.backbone_hash();
    let data = ok(TrainData::new(&ds, &st.norm, cfg.chunk.h))?;
    let probes = data.probes(8);
    let model = cfg.model();
    let maps0: Vec<_> = probes
        .iter()
        .map(|(o, i)| attention_maps(&init, &model, o, i))
        .collect::<Result<_, _>>()
        .map_err(|e: Error| e.to_string())?;
    ok(train_stage(&mut st, &data, Stage::One, &mut |_| Ok(())))?;
    ensure!(st.step == 500, "trained {} steps", st.step);
    ensure!(st.params != init, "expert did not move");
    ensure!(st.backbone_hash() == hash0, "backbone hash changed");
    let maps1: Vec<_> = probes
        .iter()
        .map(|(o, i)| attention_maps(&st.params, &model, o, i))
        .collect::<Result<_, _>>()
        .map_err(|e: Error| e.to_string())?;
    ensure!(maps0 == maps1, "attention maps differ");
    let drift = ok(attention_drift(&model, &init, &st.params, &probes))?;
    ensure!(drift == 1.0, "drift {drift}");
    Ok(format!(
        "backbone hash {hash0:016x} unchanged, maps on 8 probes bitwise equal, drift {drift}"
    ))
}

fn train_and_eval(cfg: &RunConfig, task: Task, n_demos: usize) -> Result<(TrainState, f64, usize), String> {
    let ds = ok(generate_demos(&cfg.env, task, n_demos, cfg.seed, cfg.chunk.h))?;
    let st = ok(train_run(cfg, &ds, Paradigm::TwoStage, &mut |_| Ok(())))?;
    let mut policy = LearnedPolicy::from_state(&st);
    let rep = ok(evaluate(&mut policy, &cfg.env, task, 50, cfg.seed + 1000, None))?;
    Ok((st, rep.success_rate, rep.successes))
}

fn c6_toy_learning() -> Outcome {
    let cfg = RunConfig::default();
    let t = Instant::now();
    let (reach, reach_rate, _) = train_and_eval(&cfg, Task::Reach, 50)?;
    let (_, pick_rate, _) = train_and_eval(&cfg, Task::PickPlace, 100)?;
    let mins = t.elapsed().as_secs_f64() / 60.0;

    // Same checkpoint and evaluation seed must give the same episodes.
    let mut p = LearnedPolicy::from_state(&reach);
    let a = ok(evaluate(&mut p, &cfg.env, Task::Reach, 10, cfg.seed + 1000, None))?;
    let b = ok(evaluate(&mut p, &cfg.env, Task::Reach, 10, cfg.seed + 1000, None))?;
    let detail = format!(
        "Reach {:.0}% (need 90%), PickPlace {:.0}% (need 70%), {mins:.1} min (limit 15), budget {}+{} steps",
        reach_rate * 100.0,
        pick_rate * 100.0,
        cfg.train.stage1_steps,
        cfg.train.stage2_steps
    );
    ensure!(a == b, "{detail}; repeated evaluation differs");
    ensure!(reach_rate >= 0.9 && pick_rate >= 0.7 && mins <= 15.0, "{detail}");
    Ok(detail)
}

fn c7_architecture() -> Outcome {
    let base = RunConfig::default();
    let (_, o1, i1) = ok(Env::reset(&base.env, Task::PickPlace, 1))?;
    let (_, o2, i2) = ok(Env::reset(&base.env, Task::Push, 2))?;
    let mut notes = Vec::new();
    for variant in Variant::ALL {
        let mut cfg = base.model();
        cfg.variant = variant;
        let store = ok(init_model::<f32>(&cfg, 3))?;
        let mut g = Graph::<f32>::new();
        let enc = ok(encode(&mut g, &store, &cfg, &[&o1, &o2], &[&i1, &i2]))?;
        let s = g.input(Tensor::zeros(&[2, cfg.state_dim]));
        let x = g.input(Tensor::zeros(&[2 * cfg.chunk_h, cfg.action_dim]));
        let out = ok(velocity(&mut g, &store, &cfg, &enc, s, x, &[0.3, 0.7]))?;
        let expert: Vec<_> = g
            .attention_records()
            .iter()
            .filter(|r| r.kind != AttnKind::Backbone)
            .collect();
        ensure!(
            expert.len() == cfg.dit.depth,
            "{variant}: {} expert attention ops",
            expert.len()
        );
        let depth = cfg.dit.depth;
        match variant {
            Variant::A => {
                for r in &expert {
                    ensure!(
                        r.kind == AttnKind::Cross && r.query_source != r.kv_source,
                        "A: action self-attention found"
                    );
                    for (k, seg) in r.segments.iter().enumerate() {
                        ensure!(seg.kv_len == enc.segments[k].1 + 1, "A: keys include action rows");
                    }
                }
                notes.push(format!("A: {depth} cross, 0 self"));
            }
            Variant::B => {
                for (l, r) in expert.iter().enumerate() {
                    let want = if l % 2 == 0 {
                        AttnKind::Cross
                    } else {
                        AttnKind::SelfAction
                    };
                    ensure!(r.kind == want, "B: block {l} is {:?}", r.kind);
                }
                notes.push("B: cross/self alternating".into());
            }
            Variant::C => {
                let mut prov = out.bundle.provenance.clone();
                prov.sort_unstable();
                prov.dedup();
                ensure!(
                    prov.len() == depth,
                    "C: {} distinct layers for depth {depth}",
                    prov.len()
                );
                let mut kv: Vec<_> = expert.iter().map(|r| r.kv_source).collect();
                kv.sort_by_key(|v| format!("{v:?}"));
                kv.dedup();
                ensure!(kv.len() == depth, "C: {} distinct key sources", kv.len());
                notes.push(format!("C: layers {:?}", out.bundle.provenance));
            }
            Variant::D => {
                for r in &expert {
                    for (k, seg) in r.segments.iter().enumerate() {
                        let want = enc.segments[k].1 + 1 + cfg.chunk_h;
                        ensure!(seg.kv_len == want, "D: bundle length {} != T+1+H = {want}", seg.kv_len);
                    }
                }
                notes.push(format!("D: T+1+H = {}", enc.segments[0].1 + 1 + cfg.chunk_h));
            }
        }
    }
    Ok(notes.join("; "))
}

fn c8_ablation() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.train.stage1_steps = 60;
    cfg.train.stage2_steps = 20;
    cfg.train.warmup_steps = 10;
    let spec = AblationSpec {
        tasks: vec![Task::PickPlace],
        variants: Variant::ALL.to_vec(),
        seeds: vec![0, 1, 2],
        n_demos: 10,
        data_seed: 0,
        trials: 10,
        eval_seed: 0,
    };
    let table = ok(ablate_integration(&cfg, &spec, &mut |_| {}))?;
    ensure!(table.rows.len() == 12, "{} table rows", table.rows.len());
    ensure!(
        table.rows.iter().all(|r| r.status == "ok"),
        "a cell failed:\n{}",
        table.to_text()
    );
    let csv = table.to_csv();
    let mut lines = csv.lines();
    let width = lines.next().unwrap_or_default().split(',').count();
    ensure!(lines.clone().count() == 12, "csv has {} data rows", lines.count());
    ensure!(lines.all(|l| l.split(',').count() == width), "ragged csv");
    let json = serde_json::to_value(&table).map_err(|e| e.to_string())?;
    ensure!(
        json["rows"].as_array().is_some_and(|r| r.len() == 12),
        "rows do not serialize"
    );
    print!(
        "{}",
        table
            .to_text()
            .lines()
            .map(|l| format!("    {l}\n"))
            .collect::<String>()
    );

    let paradigms = ok(compare_paradigms(&cfg, &spec, 8))?;
    ensure!(paradigms.len() == 3, "{} paradigm rows", paradigms.len());
    let mean_of = |v: Variant| {
        table
            .aggregates
            .iter()
            .find(|a| a.variant == v)
            .map_or(f64::NAN, |a| a.mean)
    };
    let means: Vec<String> = Variant::ALL.iter().map(|&v| format!("{v} {:.3}", mean_of(v))).collect();
    let drift: Vec<String> = paradigms
        .iter()
        .map(|r| {
            format!(
                "seed {}: {:.4} vs {:.4}",
                r.seed, r.two_stage_drift, r.single_stage_drift
            )
        })
        .collect();
    Ok(format!(
        "12 cells; mean success {}; drift two-stage vs single-stage {}",
        means.join(", "),
        drift.join(", ")
    ))
}

fn persistence_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.stage1_steps = 60;
    cfg.train.stage2_steps = 60;
    cfg.train.warmup_steps = 10;
    cfg
}

fn run_both(st: &mut TrainState, ds: &Dataset, stop_at: Option<u64>) -> toyvla_core::Result<()> {
    let data = TrainData::new(ds, &st.norm, st.config.chunk.h)?;
    let mut hook = |r: &StepRecord| match stop_at {
        Some(s) if r.step >= s => Err(Error::InvalidArgument("interrupted".into())),
        _ => Ok(()),
    };
    if st.stage != Stage::Two {
        train_stage(st, &data, Stage::One, &mut hook)?;
    }
    train_stage(st, &data, Stage::Two, &mut hook)
}

fn c9_persistence() -> Outcome {
    let cfg = persistence_config();
    let ds = ok(generate_demos(&cfg.env, Task::Reach, 10, 4, cfg.chunk.h))?;
    let fresh = || TrainState::new(cfg.clone(), compute_norm_stats(&ds)?);

    let stage1 = || -> toyvla_core::Result<u64> {
        let mut st = fresh()?;
        let data = TrainData::new(&ds, &st.norm, cfg.chunk.h)?;
        train_stage(&mut st, &data, Stage::One, &mut |_| Ok(()))?;
        Ok(checkpoint_hash(&st))
    };
    let (h1, h2) = (ok(stage1())?, ok(stage1())?);
    ensure!(h1 == h2, "hash {h1:016x} vs {h2:016x}");

    let mut straight = ok(fresh())?;
    ok(run_both(&mut straight, &ds, None))?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("mid.ckpt");
    let mut first = ok(fresh())?;
    ensure!(run_both(&mut first, &ds, Some(20)).is_err(), "interrupt hook ignored");
    ok(save_checkpoint(&first, &path))?;
    let mut resumed = ok(load_checkpoint(&path))?;
    ok(run_both(&mut resumed, &ds, None))?;
    ensure!(
        resumed.step == 120 && resumed.step - first.step == 100,
        "resumed for {} steps",
        resumed.step - first.step
    );
    ensure!(resumed.params == straight.params, "parameters differ after resume");
    ensure!(
        checkpoint_hash(&resumed) == checkpoint_hash(&straight),
        "checkpoint hash differs after resume"
    );

    let good = std::fs::read(&path).map_err(|e| e.to_string())?;
    let mut refused = 0;
    for (name, bytes) in [
        ("flipped byte", {
            let mut b = good.clone();
            let mid = b.len() / 2;
            b[mid] ^= 0x5a;
            b
        }),
        ("truncated", good[..good.len() - 7].to_vec()),
        ("bad magic", {
            let mut b = good.clone();
            b[0] = b'X';
            b
        }),
    ] {
        std::fs::write(&path, &bytes).map_err(|e| e.to_string())?;
        ensure!(load_checkpoint(&path).is_err(), "{name} checkpoint accepted");
        refused += 1;
    }
    Ok(format!(
        "hash {h1:016x} reproduced, 100 resumed steps bitwise equal across the stage boundary, {refused} corruptions refused"
    ))
}

fn c10_bench() -> Outcome {
    let cfg = RunConfig::default();
    let mut policy = LearnedPolicy {
        model: cfg.model(),
        params: ok(init_model(&cfg.model(), cfg.seed))?,
        norm: NormStats::identity(cfg.action.dim, cfg.state.dim),
        sampler: cfg.sampler.clone(),
    };
    let (env, obs, instr) = ok(Env::reset(&cfg.env, Task::Reach, cfg.seed))?;
    let state = env.state.robot_state().values;
    let keys = [
        "model_id",
        "param_count",
        "sampler_steps",
        "chunk_h",
        "n_warmup",
        "n_iters",
        "mean_ms",
        "median_ms",
        "frequency_hz",
        "peak_memory_mb",
        "memory_method",
        "hardware",
        "timing_scope",
    ];
    let mut means = Vec::new();
    for s in [5, 10, 20] {
        policy.sampler.steps = s;
        let r = ok(benchmark_inference(
            &policy,
            "init",
            (&obs, &instr, &state),
            3,
            20,
            &HeapProbe,
        ))?;
        let v = serde_json::to_value(&r).map_err(|e| e.to_string())?;
        let obj = v.as_object().ok_or("report is not an object")?;
        for k in keys {
            ensure!(obj.contains_key(k), "missing {k}");
        }
        ensure!(obj.len() == keys.len(), "unexpected keys in {v}");
        ensure!(r.sampler_steps == s, "report for {} steps", r.sampler_steps);
        ensure!(
            r.frequency_hz == 1000.0 / r.mean_ms,
            "frequency {} vs mean {}",
            r.frequency_hz,
            r.mean_ms
        );
        ensure!(
            r.memory_method == "allocator-high-water",
            "memory method {}",
            r.memory_method
        );
        ensure!(r.peak_memory_mb.is_some_and(|m| m > 0.0), "no memory figure");
        means.push((s, r.mean_ms, r.peak_memory_mb.unwrap_or_default()));
    }
    let detail = means
        .iter()
        .map(|(s, m, mb)| format!("S={s}: {m:.1} ms, {mb:.1} MB"))
        .collect::<Vec<_>>()
        .join("; ");
    ensure!(
        means.windows(2).all(|w| w[1].1 > w[0].1),
        "latency not monotone: {detail}"
    );
    Ok(detail)
}

pub type Criterion = (&'static str, fn() -> Outcome);

pub const CRITERIA: [Criterion; 10] = [
    ("gradient correctness", c1_gradients),
    ("flow identities", c2_flow_identities),
    ("sampler convergence", c3_sampler_order),
    ("tau sampling", c4_tau_sampling),
    ("stage-1 freeze", c5_stage1_freeze),
    ("end-to-end toy learning", c6_toy_learning),
    ("architecture assertions", c7_architecture),
    ("ablation harness", c8_ablation),
    ("determinism and persistence", c9_persistence),
    ("bench report", c10_bench),
];

/// Runs the selected criteria (all when `only` is `None`), printing one
/// line each. Returns the number of failures.
pub fn run(only: Option<&[usize]>) -> usize {
    let mut failed = 0;
    for (i, (name, f)) in CRITERIA.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(d) => println!("PASS {n:>2} {name}: {d} [{secs:.1} s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {d} [{secs:.1} s]");
            }
        }
    }
    failed
}
