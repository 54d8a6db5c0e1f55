//! Seedable, splittable randomness.
//!
//! Every stochastic component draws from a [`Stream`] derived from the run
//! seed plus a path of integers (e.g. `(seed, sample_index, t)`), so results
//! are reproducible no matter how work is scheduled across threads.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Mix a 64-bit value (splitmix64 finalizer).
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A counter-based random stream (ChaCha8) addressed by `(seed, path...)`.
#[derive(Debug, Clone)]
pub struct Stream {
    rng: ChaCha8Rng,
    seed: u64,
    path_hash: u64,
}

impl Stream {
    /// Root stream for a run seed.
    pub fn root(seed: u64) -> Self {
        Self::derive(seed, &[])
    }

    /// Derive the substream addressed by `path` under `seed`.
    pub fn derive(seed: u64, path: &[u64]) -> Self {
        let mut h = mix(seed ^ 0x5229_7c62_a3d0_11d7);
        for &p in path {
            h = mix(h ^ mix(p));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        rng.set_stream(mix(h ^ 0xa5a5_a5a5_a5a5_a5a5));
        Stream {
            rng,
            seed,
            path_hash: h,
        }
    }

    /// Child stream; equivalent to extending the derivation path.
    pub fn child(&self, index: u64) -> Self {
        Self::derive(self.path_hash, &[index])
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Standard normal draw.
    pub fn normal_f32(&mut self) -> f32 {
        self.rng.sample(StandardNormal)
    }

    pub fn normal_f64(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [lo, hi] inclusive.
    pub fn int_in(&mut self, lo: u64, hi: u64) -> u64 {
        self.rng.gen_range(lo..=hi)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.gen_range(0..=i) as usize;
            items.swap(i, j);
        }
    }

    /// Restartable position: (word position within the ChaCha stream).
    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Rebuild a stream at an exact saved position.
    pub fn restore(seed: u64, path_hash: u64, word_pos: u128) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(path_hash);
        rng.set_stream(mix(path_hash ^ 0xa5a5_a5a5_a5a5_a5a5));
        rng.set_word_pos(word_pos);
        Stream {
            rng,
            seed,
            path_hash,
        }
    }

    pub fn path_hash(&self) -> u64 {
        self.path_hash
    }
}
