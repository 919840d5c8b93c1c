//! Named parameter storage with freeze flags and per-parameter optimizer state.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adaptive-moment state; shapes always match the owning parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub frozen: bool,
    pub state: AdamState<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let state = AdamState {
            m: Tensor::zeros(value.shape()),
            v: Tensor::zeros(value.shape()),
            step: 0,
        };
        self.params.push(Param {
            name: name.to_string(),
            value,
            frozen: false,
            state,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Inserts a parameter drawn from N(0, std²).
    pub fn insert_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut Rng) -> Result<ParamId> {
        let t = Tensor::from_fn(shape, |_| T::lit(rng.gaussian() * std));
        self.insert(name, t)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn insert_full(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        self.insert(name, Tensor::full(shape, T::lit(v)))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    /// Sets the frozen flag on every parameter whose name starts with `prefix`.
    /// Returns the number of parameters touched.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
            n += 1;
        }
        n
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.value.len()).sum()
    }

    /// Same names and values in another precision; optimizer state is reset.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            let id = out.insert(&p.name, p.value.cast()).expect("unique names");
            out.params[id.0].frozen = p.frozen;
        }
        out
    }

    /// SHA-256 over names, shapes and little-endian value bytes of all
    /// parameters under `prefix`, truncated to 64 bits.
    pub fn hash_prefix(&self, prefix: &str) -> u64 {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_f64().unwrap_or(f64::NAN).to_le_bytes());
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert_zeros("a.w", &[2]).unwrap();
        assert!(s.insert_zeros("a.w", &[3]).is_err());
    }

    #[test]
    fn freeze_changes_trainable_not_total() {
        let mut s = ParamStore::<f32>::new();
        s.insert_zeros("backbone.w", &[2, 3]).unwrap();
        s.insert_zeros("expert.w", &[4]).unwrap();
        assert_eq!(s.total_count(), 10);
        assert_eq!(s.set_frozen_prefix("backbone.", true), 1);
        assert_eq!(s.total_count(), 10);
        assert_eq!(s.trainable_count(), 4);
    }

    #[test]
    fn prefix_hash_tracks_values() {
        let mut s = ParamStore::<f32>::new();
        let a = s.insert_zeros("backbone.w", &[2]).unwrap();
        s.insert_zeros("expert.w", &[2]).unwrap();
        let h0 = s.hash_prefix("backbone.");
        s.value_mut(s.id("expert.w").unwrap()).data_mut()[0] = 1.0;
        assert_eq!(h0, s.hash_prefix("backbone."));
        s.value_mut(a).data_mut()[1] = 1.0;
        assert_ne!(h0, s.hash_prefix("backbone."));
    }
}
