use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

use toyvla_core::ablation::{ablate_integration, compare_paradigms, AblationSpec};
use toyvla_core::attnviz::dump_attention_pgm;
use toyvla_core::backbone::backbone_states;
use toyvla_core::bench::benchmark_inference;
use toyvla_core::checkpoint::{load_checkpoint, save_checkpoint};
use toyvla_core::config::RunConfig;
use toyvla_core::dataset::{generate_demos, load_dataset, save_dataset, sidecar_path};
use toyvla_core::env::{Env, Task};
use toyvla_core::eval::{evaluate, LearnedPolicy};
use toyvla_core::heap::{HeapProbe, TrackingAllocator};
use toyvla_core::integration::Variant;
use toyvla_core::model::init_model;
use toyvla_core::trainer::{
    attention_drift_per_layer, compute_norm_stats, train_stage, Stage, StepRecord, TrainData, TrainState,
};
use toyvla_core::Error;

#[global_allocator]
static GLOBAL: TrackingAllocator = TrackingAllocator;

#[derive(Parser)]
#[command(
    name = "toyvla",
    version,
    about = "Train and evaluate a desk-scale vision-language-action policy"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON config file; keys not given keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; each run writes to <out>/<run-id>/.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// Dotted-key override such as `train.stage1_steps=500`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the scripted expert and write a dataset.
    GenData {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        n: usize,
    },
    /// Run one training stage.
    Train {
        /// 1, 2 or single.
        #[arg(long)]
        stage: Stage,
        /// Dataset written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to continue from; required for stage 2.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Closed-loop evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: Task,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        /// Execute this many actions of each chunk before replanning.
        #[arg(long)]
        replan_every: Option<usize>,
    },
    /// Train every integration variant on shared data and tabulate success.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "pickplace")]
        tasks: Vec<Task>,
        #[arg(long, value_delimiter = ',', default_value = "A,B,C,D")]
        variants: Vec<Variant>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 100)]
        n_demos: usize,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        /// Also compare two-stage and single-stage training per seed.
        #[arg(long)]
        paradigms: bool,
    },
    /// Time chunk prediction and record peak memory.
    Bench {
        /// Checkpoint to time; a fresh model otherwise.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        /// Sampler step counts to sweep.
        #[arg(long, value_delimiter = ',', default_value = "5,10,20")]
        steps: Vec<usize>,
    },
    /// Attention drift between two checkpoints plus PGM dumps.
    InspectAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        ckpt_ref: PathBuf,
        #[arg(long, default_value = "reach")]
        task: Task,
        #[arg(long, default_value_t = 8)]
        probes: usize,
        /// Query token index; the last instruction token by default.
        #[arg(long)]
        query: Option<usize>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFiniteLoss { .. }
        | Error::NonFiniteVelocity { .. }
        | Error::ExpertFailure { .. }
        | Error::EpisodeDone
        | Error::Shape { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

type Res<T = ()> = toyvla_core::Result<T>;

fn resolve(g: &Global, base: Option<RunConfig>) -> Res<RunConfig> {
    let mut cfg = match (base, &g.config) {
        (Some(c), _) => c,
        (None, Some(p)) => RunConfig::load(p)?,
        (None, None) => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out_dir = o.to_string_lossy().into_owned();
    }
    if let Some(r) = &g.run_id {
        cfg.run_id = r.clone();
    }
    cfg.apply_overrides(&g.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir(cfg: &RunConfig) -> Res<PathBuf> {
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.json"), cfg.to_json())?;
    Ok(dir)
}

fn file_sha256(paths: &[&Path]) -> Res<String> {
    let mut h = Sha256::new();
    for p in paths {
        h.update(fs::read(p)?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Res {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn run(cli: Cli) -> Res {
    let g = &cli.global;
    match cli.command {
        Command::GenData { task, n } => {
            if n == 0 {
                return Err(Error::Config("--n must be at least 1".into()));
            }
            let cfg = resolve(g, None)?;
            let dir = run_dir(&cfg)?;
            let ds = generate_demos(&cfg.env, task, n, cfg.seed, cfg.chunk.h)?;
            let path = dir.join(format!("{task}.jsonl"));
            save_dataset(&ds, &path)?;
            let norm = compute_norm_stats(&ds)?;
            println!("dataset   {}", path.display());
            println!("episodes  {} ({} attempts)", ds.episodes.len(), ds.header.attempts);
            println!("tuples    {}", ds.tuple_count());
            println!("action    mean {:?} std {:?}", norm.action_mean, norm.action_std);
            println!("state     mean {:?} std {:?}", norm.state_mean, norm.state_std);
            println!("sha256    {}", file_sha256(&[&path, &sidecar_path(&path)])?);
        }
        Command::Train { stage, data, from } => train(g, stage, &data, from.as_deref())?,
        Command::Eval {
            ckpt,
            task,
            trials,
            replan_every,
        } => {
            let st = load_checkpoint(&ckpt)?;
            let cfg = resolve(g, Some(st.config.clone()))?;
            let dir = run_dir(&cfg)?;
            let mut policy = LearnedPolicy::from_state(&st);
            policy.sampler = cfg.sampler.clone();
            let rep = evaluate(&mut policy, &cfg.env, task, trials, cfg.seed, replan_every)?;
            let log = dir.join(format!("eval-{task}-episodes.jsonl"));
            let mut w = BufWriter::new(File::create(&log)?);
            for e in &rep.episodes {
                writeln!(w, "{}", serde_json::to_string(e)?)?;
            }
            w.flush()?;
            write_json(&dir.join(format!("eval-{task}.json")), &rep)?;
            println!(
                "{task}: success {}/{} = {:.3}  (seed {}, episodes in {})",
                rep.successes,
                rep.trials,
                rep.success_rate,
                rep.seed,
                log.display()
            );
        }
        Command::Ablate {
            tasks,
            variants,
            seeds,
            n_demos,
            trials,
            paradigms,
        } => {
            let cfg = resolve(g, None)?;
            let dir = run_dir(&cfg)?;
            let spec = AblationSpec {
                tasks,
                variants,
                seeds,
                n_demos,
                data_seed: cfg.seed,
                trials,
                eval_seed: cfg.seed,
            };
            let rows_path = dir.join("ablation.jsonl");
            let mut rows = BufWriter::new(File::create(&rows_path)?);
            let table = ablate_integration(&cfg, &spec, &mut |r| {
                eprintln!(
                    "{} {} seed {}: {:?} {}",
                    r.task, r.variant, r.seed, r.success_rate, r.status
                );
                let _ = writeln!(rows, "{}", serde_json::to_string(r).expect("row serializes"));
            })?;
            rows.flush()?;
            fs::write(dir.join("ablation.csv"), table.to_csv())?;
            fs::write(dir.join("ablation.txt"), table.to_text())?;
            write_json(&dir.join("ablation.json"), &table)?;
            print!("{}", table.to_text());
            if paradigms {
                let rows = compare_paradigms(&cfg, &spec, 8)?;
                write_json(&dir.join("paradigms.json"), &rows)?;
                for r in &rows {
                    println!(
                        "{} seed {}: drift two-stage {:.4} single {:.4}; success two-stage {:.3} single {:.3}",
                        r.task,
                        r.seed,
                        r.two_stage_drift,
                        r.single_stage_drift,
                        r.two_stage_success,
                        r.single_stage_success
                    );
                }
            }
        }
        Command::Bench {
            ckpt,
            iters,
            warmup,
            steps,
        } => {
            let (cfg, mut policy, id) = match &ckpt {
                Some(p) => {
                    let st = load_checkpoint(p)?;
                    let cfg = resolve(g, Some(st.config.clone()))?;
                    (cfg, LearnedPolicy::from_state(&st), p.display().to_string())
                }
                None => {
                    let cfg = resolve(g, None)?;
                    let policy = LearnedPolicy {
                        model: cfg.model(),
                        params: init_model(&cfg.model(), cfg.seed)?,
                        norm: toyvla_core::trainer::NormStats::identity(cfg.action.dim, cfg.state.dim),
                        sampler: cfg.sampler.clone(),
                    };
                    let id = format!("init-seed-{}", cfg.seed);
                    (cfg, policy, id)
                }
            };
            let dir = run_dir(&cfg)?;
            let (env, obs, instr) = Env::reset(&cfg.env, Task::Reach, cfg.seed)?;
            let state = env.state.robot_state().values;
            let path = dir.join("bench.jsonl");
            let mut w = BufWriter::new(File::create(&path)?);
            for s in steps {
                policy.sampler.steps = s;
                let r = benchmark_inference(&policy, &id, (&obs, &instr, &state), warmup, iters, &HeapProbe)?;
                writeln!(w, "{}", serde_json::to_string(&r)?)?;
                println!("{}", serde_json::to_string_pretty(&r)?);
            }
            w.flush()?;
            eprintln!("reports in {}", path.display());
        }
        Command::InspectAttn {
            ckpt,
            ckpt_ref,
            task,
            probes,
            query,
        } => {
            let st = load_checkpoint(&ckpt)?;
            let reference = load_checkpoint(&ckpt_ref)?;
            let cfg = resolve(g, Some(st.config.clone()))?;
            let dir = run_dir(&cfg)?;
            let model = cfg.model();
            let inputs = (0..probes.max(1))
                .map(|i| Env::reset(&cfg.env, task, cfg.seed.wrapping_add(i as u64)).map(|(_, o, ins)| (o, ins)))
                .collect::<Res<Vec<_>>>()?;
            let refs: Vec<_> = inputs.iter().map(|(o, i)| (o, i)).collect();
            let per_layer = attention_drift_per_layer(&model, &reference.params, &st.params, &refs)?;
            let k = model.backbone.extract_layer;
            let attn = dir.join("attn");
            let (obs, instr) = &inputs[0];
            let grid = model.backbone.tokens_per_view().isqrt();
            for (name, params) in [("ckpt", &st.params), ("ref", &reference.params)] {
                let states = backbone_states(params, &model.backbone, obs, instr, k)?;
                let map = &states.attention[k - 1];
                let q = query.unwrap_or(map.weights.rows() - 1);
                for (v, img) in obs.views.iter().enumerate() {
                    dump_attention_pgm(map, q, img, v, grid, &attn, &format!("{name}_layer{k}_view{v}"))?;
                }
            }
            let report = json!({
                "drift": per_layer[k - 1],
                "extract_layer": k,
                "per_layer": per_layer,
                "probes": probes.max(1),
                "task": task,
            });
            write_json(&attn.join("drift.json"), &report)?;
            println!("attention drift at layer {k}: {:.6}", per_layer[k - 1]);
            for (l, d) in per_layer.iter().enumerate() {
                println!("  layer {}: {d:.6}", l + 1);
            }
            println!("maps in {}", attn.display());
        }
    }
    Ok(())
}

fn train(g: &Global, stage: Stage, data: &Path, from: Option<&Path>) -> Res {
    let ds = load_dataset(data)?;
    let mut st = match from {
        Some(p) => {
            let prev = load_checkpoint(p)?;
            let cfg = resolve(g, Some(prev.config.clone()))?;
            if cfg.model() != prev.config.model() {
                return Err(Error::Config(
                    "overrides may not change the architecture of a checkpoint".into(),
                ));
            }
            TrainState { config: cfg, ..prev }
        }
        None if stage == Stage::Two => {
            return Err(Error::Config(
                "stage 2 needs a stage-1 checkpoint: pass --from <ckpt>".into(),
            ));
        }
        None => {
            let cfg = resolve(g, None)?;
            TrainState::new(cfg, compute_norm_stats(&ds)?)?
        }
    };
    if ds.header.chunk_h != st.config.chunk.h {
        return Err(Error::Config(format!(
            "dataset chunk length {} differs from chunk.h {}",
            ds.header.chunk_h, st.config.chunk.h
        )));
    }
    let dir = run_dir(&st.config)?;
    if from.is_none() {
        save_checkpoint(&st, &dir.join("init.ckpt"))?;
    }
    let tdata = TrainData::new(&ds, &st.norm, st.config.chunk.h)?;
    let manifest = dir.join("manifest.jsonl");
    let mut m = BufWriter::new(OpenOptions::new().create(true).append(true).open(&manifest)?);
    writeln!(
        m,
        "{}",
        json!({"kind": "config", "stage": stage.to_string(), "config": st.config})
    )?;
    let every = st.config.train.log_every.max(1) as u64;
    let mut last = None;
    let result = train_stage(&mut st, &tdata, stage, &mut |r: &StepRecord| {
        writeln!(
            m,
            "{}",
            json!({"step": r.step, "stage": r.stage.to_string(), "loss": r.loss, "lr": r.lr, "wall_ms": r.wall_ms})
        )?;
        if r.step.is_multiple_of(every) {
            eprintln!(
                "step {:>6}  stage {}  loss {:.5}  lr {:.2e}",
                r.step, r.stage, r.loss, r.lr
            );
        }
        last = Some(r.loss);
        Ok(())
    });
    m.flush()?;
    result?;
    let name = match stage {
        Stage::One => "stage1.ckpt",
        Stage::Two => "stage2.ckpt",
        Stage::Single => "single.ckpt",
    };
    let path = dir.join(name);
    let hash = save_checkpoint(&st, &path)?;
    if stage != Stage::One {
        let init = init_model(&st.model(), st.config.seed)?;
        let per_layer = attention_drift_per_layer(&st.model(), &init, &st.params, &tdata.probes(8))?;
        writeln!(
            m,
            "{}",
            json!({"kind": "drift", "stage": stage.to_string(), "per_layer": per_layer})
        )?;
        m.flush()?;
        println!("attention similarity to init per layer: {per_layer:.4?}");
    }
    println!(
        "stage {stage}: {} steps total, last loss {}, checkpoint {} ({hash:016x})",
        st.step,
        last.map_or("-".into(), |l| format!("{l:.5}")),
        path.display()
    );
    Ok(())
}
