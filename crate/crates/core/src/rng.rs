//! Seeded, splittable random number generation.
//!
//! Backed by ChaCha8, a counter-based stream cipher generator. A generator is
//! identified by `(seed, stream)` and its position is the 128-bit word
//! counter, so the full state is three integers and can be persisted in a
//! checkpoint. Splitting derives a new stream id and never consumes output
//! from the parent.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Identifier persisted alongside generator state.
pub const RNG_ALGORITHM: &str = "chacha8/rand_chacha-0.9/seed_from_u64";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { seed, stream, inner }
    }

    /// Independent child generator; a pure function of `(seed, stream, id)`.
    pub fn split(&self, id: u64) -> Rng {
        let stream = splitmix64(self.stream ^ splitmix64(id.wrapping_add(1)));
        Self::with_stream(self.seed, stream)
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.stream,
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = Self::with_stream(state.seed, state.stream);
        rng.inner.set_word_pos(state.word_pos);
        rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn gaussian(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn beta(&mut self, alpha: f64, beta: f64) -> Result<f64> {
        let dist = Beta::new(alpha, beta).map_err(|e| Error::InvalidArgument(format!("beta({alpha}, {beta}): {e}")))?;
        Ok(dist.sample(&mut self.inner))
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// I.i.d. standard normal tensor.
pub fn sample_gaussian<T: Scalar>(rng: &mut Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.gaussian()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_tensor() {
        let a: Tensor<f32> = sample_gaussian(&mut Rng::new(3), &[4, 5]);
        let b: Tensor<f32> = sample_gaussian(&mut Rng::new(3), &[4, 5]);
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a: Tensor<f32> = sample_gaussian(&mut Rng::new(3), &[16]);
        let b: Tensor<f32> = sample_gaussian(&mut Rng::new(4), &[16]);
        assert_ne!(a, b);
    }

    #[test]
    fn gaussian_moments() {
        let t: Tensor<f64> = sample_gaussian(&mut Rng::new(11), &[100_000]);
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!(mean.abs() <= 0.02, "mean {mean}");
        assert!((0.97..=1.03).contains(&var), "var {var}");
    }

    #[test]
    fn state_round_trip_resumes_stream() {
        let mut a = Rng::new(9).split(2);
        for _ in 0..13 {
            a.gaussian();
        }
        let mut b = Rng::from_state(a.state());
        for _ in 0..20 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn split_is_pure_and_distinct() {
        let mut parent = Rng::new(1);
        let c1 = parent.split(5);
        parent.next_u64();
        let c2 = parent.split(5);
        assert_eq!(c1.state(), c2.state());
        assert_ne!(parent.split(6).state().stream, c1.state().stream);
    }

    #[test]
    fn beta_rejects_bad_shape() {
        assert!(Rng::new(0).beta(0.0, 1.0).is_err());
        assert!(Rng::new(0).beta(1.0, -1.0).is_err());
    }
}
