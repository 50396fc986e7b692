//! Deterministic random number generation.
//!
//! Everything random in this crate flows through [`Rng`], a thin wrapper
//! around the ChaCha12 stream cipher RNG. The derivations below are spelled
//! out so that archives, banks, and training runs can be reproduced
//! bit-for-bit by an independent implementation:
//!
//! * stream selection: ChaCha12 seeded with the 64-bit seed written into the
//!   low 8 bytes of a zeroed 32-byte key, `set_stream(stream)` selects a
//!   named substream (see [`Stream`]);
//! * `uniform()`: `(next_u64() >> 11) as f64 * 2^-53`, i.e. 53 uniform bits
//!   in `[0, 1)`;
//! * `normal()`: Box-Muller cosine branch, `sqrt(-2 ln u1) * cos(2 pi u2)`,
//!   where `u1 = ((next_u64() >> 11) + 1) * 2^-53` (in `(0, 1]`, so the log
//!   is finite) and `u2` is a plain `uniform()`. Each normal consumes exactly
//!   two `next_u64` calls; the sine branch is never used;
//! * `below(n)`: rejection-sampled `next_u64() % n` (values at or above
//!   `u64::MAX - u64::MAX % n` are discarded), so the result is exactly
//!   uniform on `0..n`;
//! * `shuffle`: Fisher-Yates from the back, swapping index `i` with
//!   `below(i + 1)` for `i = len-1 .. 1`.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Named substreams so independent uses of one seed cannot collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Speaker centroids and channel offsets of the synthetic generator.
    Synth = 1,
    /// Trial-list sampling for synthetic benchmarks.
    Trials = 2,
    /// Bank initialization (k-means seeding, jitter).
    Init = 3,
    /// Mini-batch construction during fine-tuning.
    Train = 4,
}

/// Seedable, splittable generator (ChaCha12; see module docs).
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha12Rng,
}

impl Rng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut inner = ChaCha12Rng::from_seed(key);
        inner.set_stream(stream as u64);
        Rng { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform f64 in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * 2f64.powi(-53)
    }

    /// Standard normal draw (Box-Muller cosine branch, two u64s consumed).
    pub fn normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * 2f64.powi(-53);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in `0..n` via rejection sampling. `n` must be > 0.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is meaningless");
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.below(i + 1);
            slice.swap(i, j);
        }
    }

    /// `k` distinct indices drawn from `0..n`, in draw order.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} distinct values from 0..{n}");
        let mut pool: Vec<usize> = (0..n).collect();
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            let j = self.below(pool.len());
            out.push(pool.swap_remove(j));
        }
        out
    }

    /// Serializable state: (seed bytes, stream, word position).
    pub fn state(&self) -> ([u8; 32], u64, u128) {
        (
            self.inner.get_seed(),
            self.inner.get_stream(),
            self.inner.get_word_pos(),
        )
    }

    /// Restore a generator captured with [`Rng::state`].
    pub fn from_state(seed: [u8; 32], stream: u64, word_pos: u128) -> Self {
        let mut inner = ChaCha12Rng::from_seed(seed);
        inner.set_stream(stream);
        inner.set_word_pos(word_pos);
        Rng { inner }
    }
}
