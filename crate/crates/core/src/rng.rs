//! The run's single random stream.
//!
//! ChaCha8 is counter based, so the full state is the seed plus a word
//! position, which is what checkpoints store.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug)]
pub struct RunRng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// Serializable position of a [`RunRng`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Word position as a decimal string (it is a u128).
    pub word_pos: String,
}

impl RunRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            word_pos: self.inner.get_word_pos().to_string(),
        }
    }

    pub fn from_state(state: &RngState) -> Option<Self> {
        let pos: u128 = state.word_pos.parse().ok()?;
        let mut rng = Self::new(state.seed);
        rng.inner.set_word_pos(pos);
        Some(rng)
    }

    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        self.inner.random_range(lo..hi)
    }

    pub fn normal(&mut self, mean: f32, std: f32) -> f32 {
        Normal::new(mean, std).expect("finite std").sample(&mut self.inner)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.inner.random_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }
}
