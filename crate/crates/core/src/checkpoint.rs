//! Binary checkpoints.
//!
//! ```text
//! magic   b"EVOACT1"            7 bytes
//! version u32
//! hash    u64   first 8 bytes of SHA-256(body), read as little-endian
//! body    config, RNG, norm stats, counters, tensor records
//! ```
//!
//! All integers and floats are little-endian. Strings and blobs carry a
//! `u32` length prefix. The byte layout is spelled out in `docs/formats.md`.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::init_model;
use crate::params::ParamStore;
use crate::rng::{Rng, RngState, RNG_ALGORITHM};
use crate::tensor::Tensor;
use crate::trainer::{NormStats, Stage, TrainState};

pub const MAGIC: &[u8; 7] = b"EVOACT1";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 7 + 4 + 8;

pub fn content_hash(body: &[u8]) -> u64 {
    let d = Sha256::digest(body);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend(v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend(b);
    }
    fn f32s(&mut self, v: &[f32]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend(x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.u64()? as usize;
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

fn stage_code(s: Stage) -> u8 {
    match s {
        Stage::One => 1,
        Stage::Two => 2,
        Stage::Single => 3,
    }
}

fn stage_from_code(c: u8) -> Result<Stage> {
    match c {
        1 => Ok(Stage::One),
        2 => Ok(Stage::Two),
        3 => Ok(Stage::Single),
        _ => Err(Error::Checkpoint(format!("unknown stage code {c}"))),
    }
}

/// Serialized checkpoint, header included.
pub fn encode(state: &TrainState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.bytes(state.config.to_json().as_bytes());
    w.bytes(RNG_ALGORITHM.as_bytes());
    let rs = state.rng.state();
    w.u64(rs.seed);
    w.u64(rs.stream);
    w.u128(rs.word_pos);
    let n = &state.norm;
    for v in [&n.action_mean, &n.action_std, &n.state_mean, &n.state_std] {
        w.f32s(v);
    }
    w.u64(state.step);
    w.u8(stage_code(state.stage));
    w.u64(state.stage_step);
    w.u32(state.params.len() as u32);
    for (_, p) in state.params.iter() {
        w.bytes(p.name.as_bytes());
        w.u8(u8::from(p.frozen));
        w.u32(p.value.shape().len() as u32);
        for d in p.value.shape() {
            w.u64(*d as u64);
        }
        w.u64(p.state.step);
        w.f32s(p.value.data());
        w.f32s(p.state.m.data());
        w.f32s(p.state.v.data());
    }
    let body = w.0;
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend(content_hash(&body).to_le_bytes());
    out.extend(body);
    out
}

/// Parses and verifies a checkpoint. Parameter names and shapes must match
/// the architecture described by the embedded config.
pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < HEADER_LEN || &bytes[..7] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[7..11].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let stored = u64::from_le_bytes(bytes[11..19].try_into().expect("8 bytes"));
    let body = &bytes[HEADER_LEN..];
    let computed = content_hash(body);
    if stored != computed {
        return Err(Error::HashMismatch { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 0 };
    let config_text = r.string()?;
    let config = RunConfig::from_json(&config_text)?;
    config.validate()?;
    let algo = r.string()?;
    if algo != RNG_ALGORITHM {
        return Err(Error::Checkpoint(format!("rng {algo:?} is not {RNG_ALGORITHM:?}")));
    }
    let rng = Rng::from_state(RngState {
        seed: r.u64()?,
        stream: r.u64()?,
        word_pos: r.u128()?,
    });
    let norm = NormStats {
        action_mean: r.f32s()?,
        action_std: r.f32s()?,
        state_mean: r.f32s()?,
        state_std: r.f32s()?,
    };
    if norm.action_mean.len() != config.action.dim || norm.state_mean.len() != config.state.dim {
        return Err(Error::Checkpoint("normalization stats do not match dims".into()));
    }
    let step = r.u64()?;
    let stage = stage_from_code(r.u8()?)?;
    let stage_step = r.u64()?;

    let mut params: ParamStore<f32> = init_model(&config.model(), config.seed)?;
    let count = r.u32()? as usize;
    if count != params.len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, architecture has {}",
            params.len()
        )));
    }
    for id in params.ids().collect::<Vec<_>>() {
        let name = r.string()?;
        let frozen = match r.u8()? {
            0 => false,
            1 => true,
            f => return Err(Error::Checkpoint(format!("bad frozen flag {f} for {name}"))),
        };
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let adam_step = r.u64()?;
        let p = params.param_mut(id);
        if p.name != name || p.value.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} {shape:?} does not match architecture ({} {:?})",
                p.name,
                p.value.shape()
            )));
        }
        p.frozen = frozen;
        p.value = Tensor::new(shape.clone(), r.f32s()?)?;
        p.state.m = Tensor::new(shape.clone(), r.f32s()?)?;
        p.state.v = Tensor::new(shape, r.f32s()?)?;
        p.state.step = adam_step;
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(TrainState {
        config,
        params,
        norm,
        rng,
        step,
        stage,
        stage_step,
    })
}

/// Writes via a temporary file and rename; returns the content hash.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<u64> {
    let bytes = encode(state);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(u64::from_le_bytes(bytes[11..19].try_into().expect("8 bytes")))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode(&std::fs::read(path)?)
}

/// Content hash of a state as it would be written.
pub fn checkpoint_hash(state: &TrainState) -> u64 {
    u64::from_le_bytes(encode(state)[11..19].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainState {
        let mut c = RunConfig::default();
        c.apply_overrides(&[
            "backbone.d_z=16",
            "backbone.layers=2",
            "backbone.extract_layer=1",
            "backbone.heads=2",
            "backbone.d_patch=4",
            "dit.width=16",
            "dit.depth=2",
            "dit.heads=2",
            "dit.time_dim=8",
        ])
        .unwrap();
        TrainState::new(c, NormStats::identity(3, 4)).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let mut st = tiny();
        st.rng.next_u64();
        st.step = 7;
        st.stage = Stage::Two;
        st.stage_step = 3;
        let id = st.params.ids().next().unwrap();
        st.params.param_mut(id).state.step = 5;
        st.params.param_mut(id).frozen = true;
        let a = encode(&st);
        let back = decode(&a).unwrap();
        assert_eq!(encode(&back), a);
        assert_eq!(back.params, st.params);
        assert_eq!(back.rng.state(), st.rng.state());
        assert_eq!((back.step, back.stage, back.stage_step), (7, Stage::Two, 3));
    }

    #[test]
    fn every_corrupted_region_is_refused() {
        let a = encode(&tiny());
        for pos in [0, 8, 12, HEADER_LEN + 3, a.len() / 2, a.len() - 1] {
            let mut b = a.clone();
            b[pos] ^= 0x40;
            assert!(decode(&b).is_err(), "byte {pos}");
        }
        assert!(matches!(
            decode(&{
                let mut b = a.clone();
                b[a.len() - 1] ^= 1;
                b
            }),
            Err(Error::HashMismatch { .. })
        ));
        assert!(decode(&a[..a.len() - 4]).is_err());
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut a = encode(&tiny());
        a[7] = 9;
        let e = decode(&a).unwrap_err().to_string();
        assert!(e.contains("version 9"), "{e}");
    }
}
