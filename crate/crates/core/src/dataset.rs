//! Scripted demonstrations and their on-disk format.
//!
//! A dataset is a JSON-lines file plus a sidecar of raw little-endian f32
//! image planes. The first line is a header; each episode contributes one
//! `episode` record followed by one `tuple` record per time step. A tuple
//! carries the executed action and the padded `H`-step action window, and
//! points at its images by float offset into the sidecar.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{Image, Instruction, ObservationSet};
use crate::env::{expert_action, observe, reset_state, transition, EnvConfig, Task, PALETTE_NAMES};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const ACTION_DIM: usize = 3;
pub const STATE_DIM: usize = 4;
/// Attempts before the failure rate is judged.
const MIN_ATTEMPTS_FOR_ABORT: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub obs: ObservationSet,
    pub state: Vec<f32>,
    pub action: [f32; ACTION_DIM],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub seed: u64,
    pub instruction: Instruction,
    pub steps: Vec<Step>,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub task: Task,
    pub chunk_h: usize,
    pub action_dim: usize,
    pub state_dim: usize,
    pub views: usize,
    pub image_size: usize,
    pub palette: Vec<String>,
    pub seed: u64,
    pub episodes: usize,
    pub tuples: usize,
    pub attempts: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    /// `(episode, t)` for every step.
    pub fn tuple_index(&self) -> Vec<(usize, usize)> {
        self.episodes
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.steps.len()).map(move |t| (e, t)))
            .collect()
    }

    pub fn tuple_count(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }

    /// Actions `t..t+h` of one episode, padded by repeating the last action.
    pub fn action_window(&self, episode: usize, t: usize, h: usize) -> Vec<[f32; ACTION_DIM]> {
        action_window(&self.episodes[episode].steps, t, h)
    }
}

pub fn action_window(steps: &[Step], t: usize, h: usize) -> Vec<[f32; ACTION_DIM]> {
    let last = steps.len() - 1;
    (t..t + h).map(|i| steps[i.min(last)].action).collect()
}

/// Rolls out the expert once.
pub fn expert_episode(cfg: &EnvConfig, task: Task, seed: u64) -> Result<Episode> {
    let mut s = reset_state(cfg, task, seed)?;
    let instruction = s.instruction(cfg.views);
    let mut steps = Vec::new();
    while !s.done {
        let action = expert_action(&s);
        steps.push(Step {
            obs: observe(cfg, &s)?,
            state: s.robot_state().values,
            action,
        });
        s = transition(cfg, &s, &action)?;
    }
    Ok(Episode {
        seed,
        instruction,
        steps,
        success: s.success,
    })
}

/// `n` successful expert episodes; failures are discarded and redrawn.
pub fn generate_demos(cfg: &EnvConfig, task: Task, n: usize, seed: u64, chunk_h: usize) -> Result<Dataset> {
    if n == 0 || chunk_h == 0 {
        return Err(Error::InvalidArgument(
            "need at least one episode and chunk length".into(),
        ));
    }
    let root = Rng::new(seed);
    let mut episodes = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while episodes.len() < n {
        let ep_seed = root.split(attempts as u64).next_u64();
        attempts += 1;
        let ep = expert_episode(cfg, task, ep_seed)?;
        if ep.success {
            episodes.push(ep);
        }
        let failures = attempts - episodes.len();
        let rate = failures as f64 / attempts as f64;
        if attempts >= MIN_ATTEMPTS_FOR_ABORT && rate > 0.5 {
            return Err(Error::ExpertFailure { rate });
        }
    }
    let tuples = episodes.iter().map(|e| e.steps.len()).sum();
    Ok(Dataset {
        header: DatasetHeader {
            format_version: DATASET_FORMAT_VERSION,
            task,
            chunk_h,
            action_dim: ACTION_DIM,
            state_dim: STATE_DIM,
            views: cfg.views,
            image_size: cfg.image_size,
            palette: PALETTE_NAMES.iter().map(|s| s.to_string()).collect(),
            seed,
            episodes: n,
            tuples,
            attempts,
        },
        episodes,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum Record {
    Header(DatasetHeader),
    Episode {
        index: usize,
        seed: u64,
        instruction: Vec<u32>,
        length: usize,
        success: bool,
    },
    Tuple {
        episode: usize,
        t: usize,
        state: Vec<f32>,
        action: [f32; ACTION_DIM],
        window: Vec<[f32; ACTION_DIM]>,
        image_offset: u64,
        image_floats: u64,
    },
}

/// Sidecar path for a dataset file: `demos.jsonl` → `demos.bin`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut meta = BufWriter::new(File::create(path)?);
    let mut blob = BufWriter::new(File::create(sidecar_path(path))?);
    let line = |w: &mut BufWriter<File>, r: &Record| -> Result<()> {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
        Ok(())
    };
    line(&mut meta, &Record::Header(ds.header.clone()))?;
    let mut offset = 0u64;
    for (index, ep) in ds.episodes.iter().enumerate() {
        line(
            &mut meta,
            &Record::Episode {
                index,
                seed: ep.seed,
                instruction: ep.instruction.tokens.clone(),
                length: ep.steps.len(),
                success: ep.success,
            },
        )?;
        for (t, step) in ep.steps.iter().enumerate() {
            let mut floats = 0u64;
            for view in &step.obs.views {
                for v in &view.data {
                    blob.write_all(&v.to_le_bytes())?;
                }
                floats += view.data.len() as u64;
            }
            line(
                &mut meta,
                &Record::Tuple {
                    episode: index,
                    t,
                    state: step.state.clone(),
                    action: step.action,
                    window: action_window(&ep.steps, t, ds.header.chunk_h),
                    image_offset: offset,
                    image_floats: floats,
                },
            )?;
            offset += floats;
        }
    }
    meta.flush()?;
    blob.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bad = |m: String| Error::Dataset(format!("{}: {m}", path.display()));
    let mut raw = Vec::new();
    File::open(sidecar_path(path))?.read_to_end(&mut raw)?;
    if raw.len() % 4 != 0 {
        return Err(bad("sidecar length not a multiple of 4".into()));
    }
    let floats: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = match lines.next() {
        Some(l) => match serde_json::from_str::<Record>(&l?)? {
            Record::Header(h) => h,
            _ => return Err(bad("first record is not a header".into())),
        },
        None => return Err(bad("empty file".into())),
    };
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(bad(format!("unsupported version {}", header.format_version)));
    }
    let view_len = header.image_size * header.image_size * 3;
    let mut episodes: Vec<Episode> = Vec::with_capacity(header.episodes);
    for l in lines {
        match serde_json::from_str::<Record>(&l?)? {
            Record::Header(_) => return Err(bad("duplicate header".into())),
            Record::Episode {
                index,
                seed,
                instruction,
                length,
                success,
            } => {
                if index != episodes.len() {
                    return Err(bad(format!("episode {index} out of order")));
                }
                episodes.push(Episode {
                    seed,
                    instruction: Instruction { tokens: instruction },
                    steps: Vec::with_capacity(length),
                    success,
                });
            }
            Record::Tuple {
                episode,
                t,
                state,
                action,
                window,
                image_offset,
                image_floats,
            } => {
                let n_eps = episodes.len();
                let ep = episodes
                    .last_mut()
                    .filter(|_| episode + 1 == n_eps)
                    .ok_or_else(|| bad(format!("tuple for unknown episode {episode}")))?;
                let (start, len) = (image_offset as usize, image_floats as usize);
                if t != ep.steps.len()
                    || window.len() != header.chunk_h
                    || state.len() != header.state_dim
                    || len != view_len * header.views
                    || start + len > floats.len()
                {
                    return Err(bad(format!("malformed tuple ({episode}, {t})")));
                }
                let views = floats[start..start + len]
                    .chunks_exact(view_len)
                    .map(|c| Image::new(header.image_size, header.image_size, c.to_vec()))
                    .collect::<Result<_>>()?;
                ep.steps.push(Step {
                    obs: ObservationSet::new(views)?,
                    state,
                    action,
                });
            }
        }
    }
    if episodes.len() != header.episodes || episodes.iter().map(|e| e.steps.len()).sum::<usize>() != header.tuples {
        return Err(bad("record counts disagree with header".into()));
    }
    Ok(Dataset { header, episodes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    fn hash_files(path: &Path) -> Vec<u8> {
        let mut h = Sha256::new();
        h.update(std::fs::read(path).unwrap());
        h.update(std::fs::read(sidecar_path(path)).unwrap());
        h.finalize().to_vec()
    }

    #[test]
    fn generates_exactly_n_successful_episodes() {
        let ds = generate_demos(&EnvConfig::default(), Task::Reach, 50, 1, 8).unwrap();
        assert_eq!(ds.episodes.len(), 50);
        assert!(ds.episodes.iter().all(|e| e.success));
        assert_eq!(ds.header.tuples, ds.tuple_count());
    }

    #[test]
    fn windows_are_padded_to_h() {
        let ds = generate_demos(&EnvConfig::default(), Task::PickPlace, 3, 2, 8).unwrap();
        for (e, t) in ds.tuple_index() {
            let w = ds.action_window(e, t, 8);
            assert_eq!(w.len(), 8);
            let steps = &ds.episodes[e].steps;
            for (k, a) in w.iter().enumerate() {
                assert_eq!(*a, steps[(t + k).min(steps.len() - 1)].action);
            }
        }
    }

    #[test]
    fn file_round_trip_and_byte_identical_regeneration() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        let cfg = EnvConfig::default();
        let ds = generate_demos(&cfg, Task::Push, 4, 7, 8).unwrap();
        save_dataset(&ds, &p1).unwrap();
        save_dataset(&generate_demos(&cfg, Task::Push, 4, 7, 8).unwrap(), &p2).unwrap();
        assert_eq!(hash_files(&p1), hash_files(&p2));
        assert_eq!(load_dataset(&p1).unwrap(), ds);
    }

    #[test]
    fn misconfigured_environment_aborts() {
        let cfg = EnvConfig {
            t_max: 2,
            ..EnvConfig::default()
        };
        match generate_demos(&cfg, Task::PickPlace, 5, 0, 8) {
            Err(Error::ExpertFailure { rate }) => assert!(rate > 0.5),
            other => panic!("unexpected {other:?}"),
        }
        assert!(generate_demos(&EnvConfig::default(), Task::Reach, 0, 0, 8).is_err());
    }

    #[test]
    fn truncated_sidecar_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        save_dataset(
            &generate_demos(&EnvConfig::default(), Task::Reach, 2, 3, 4).unwrap(),
            &p,
        )
        .unwrap();
        let side = sidecar_path(&p);
        let bytes = std::fs::read(&side).unwrap();
        std::fs::write(&side, &bytes[..bytes.len() - 4 * 3072]).unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Dataset(_))));
    }
}
