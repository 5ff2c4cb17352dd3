//! Counter-based pseudo-random generator with explicit state.
//!
//! Output `i` of a stream with key `k` is `mix64(k + (i + 1) * GAMMA)`, the
//! SplitMix64 finalizer applied to a Weyl sequence. State is the pair
//! `(key, counter)`; nothing is global.
//!
//! Stream splitting: [`CounterRng::split`]`(j)` derives a child stream with
//! key `mix64(key ^ mix64(j + GAMMA))` and counter 0. Batch item `j` of a
//! run seeded with `s` uses `CounterRng::new(s).split(j)`, independent of the
//! order in which items are processed.

use serde::{Deserialize, Serialize};

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over a byte string; stable across platforms and releases.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterRng {
    pub key: u64,
    pub counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self {
            key: mix64(seed),
            counter: 0,
        }
    }

    pub fn split(&self, stream: u64) -> Self {
        Self {
            key: mix64(self.key ^ mix64(stream.wrapping_add(GAMMA))),
            counter: 0,
        }
    }

    /// The value at an arbitrary position, without touching the state.
    pub fn at(&self, counter: u64) -> u64 {
        mix64(self.key.wrapping_add(counter.wrapping_add(1).wrapping_mul(GAMMA)))
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = self.at(self.counter);
        self.counter = self.counter.wrapping_add(1);
        v
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, bound)`. `bound` must be nonzero.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be nonzero");
        // Lemire multiply-shift; bias is < 2^-64 * bound.
        ((u128::from(self.next_u64()) * u128::from(bound)) >> 64) as u64
    }

    /// Standard normal via Box-Muller; consumes two draws, returns one value.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_positional() {
        let mut a = CounterRng::new(7);
        let b = CounterRng::new(7);
        let first: Vec<u64> = (0..5).map(|_| a.next_u64()).collect();
        let direct: Vec<u64> = (0..5).map(|i| b.at(i)).collect();
        assert_eq!(first, direct);
        assert_eq!(a.counter, 5);
    }

    #[test]
    fn split_streams_differ() {
        let root = CounterRng::new(1);
        assert_ne!(root.split(0).at(0), root.split(1).at(0));
        assert_ne!(root.split(0).at(0), root.at(0));
    }

    #[test]
    fn uniform_moments() {
        let mut r = CounterRng::new(3);
        let n = 200_000;
        let mut s = 0.0;
        let mut s2 = 0.0;
        for _ in 0..n {
            let x = r.normal();
            s += x;
            s2 += x * x;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.02, "{var}");
        let u = r.uniform();
        assert!((0.0..1.0).contains(&u));
    }

    #[test]
    fn fnv_known_vector() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}
