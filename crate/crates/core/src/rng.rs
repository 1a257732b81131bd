//! Deterministic random source.
//!
//! Every stochastic operation in this crate takes an explicit [`RngState`];
//! there is no global RNG. The generator is a counter-based stream cipher
//! (ChaCha8), so a given seed produces the same stream on every platform.
//! Concurrent use is handled by deriving independent child streams with
//! [`RngState::derive`] rather than by sharing one state.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(GOLDEN);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seedable deterministic random stream.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        // Expand the 64-bit seed into the 256-bit cipher key.
        let mut key = [0u8; 32];
        let mut s = seed;
        for chunk in key.chunks_mut(8) {
            s = splitmix64(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        RngState {
            seed,
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    /// Seed this state was created with.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream. Derivation uses only the construction seed
    /// and the tag, so the result does not depend on how much of the parent
    /// stream has been consumed — safe to call from parallel workers.
    pub fn derive(&self, tag: u64) -> RngState {
        RngState::new(splitmix64(self.seed ^ splitmix64(tag.wrapping_add(1))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform integer in `[0, bound)`.
    pub fn index(&mut self, bound: usize) -> usize {
        self.rng.gen_range(0..bound)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn bernoulli(&mut self, prob_true: f64) -> bool {
        self.rng.gen_bool(prob_true)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }

    /// `count` distinct indices drawn from `[0, n)`, returned in ascending
    /// order. Ascending order makes `count == n` reproduce the untouched
    /// index sequence exactly.
    pub fn sample_indices(&mut self, n: usize, count: usize) -> Vec<usize> {
        assert!(
            count <= n,
            "cannot sample {count} of {n} without replacement"
        );
        let mut all: Vec<usize> = (0..n).collect();
        for i in 0..count {
            let j = i + self.index(n - i);
            all.swap(i, j);
        }
        let mut picked = all[..count].to_vec();
        picked.sort_unstable();
        picked
    }
}
