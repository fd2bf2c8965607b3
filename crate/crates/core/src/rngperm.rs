//! Keyed random streams and uniform permutations.
//!
//! Every random quantity in the crate is drawn from a stream addressed by a
//! [`StreamKey`]. The key is used verbatim as a ChaCha8 key, so two keys that
//! differ in any field give unrelated streams, and a stream can be entered at
//! any position without generating the prefix. Parallel loops therefore give
//! the same numbers whatever the thread count or schedule.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// What a stream is used for. Part of the key, so the same replication and
/// column never share numbers between purposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Purpose {
    Permutation,
    Jitter,
    Response,
    Oracle,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Permutation => 1,
            Purpose::Jitter => 2,
            Purpose::Response => 3,
            Purpose::Oracle => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub master_seed: u64,
    pub replication_index: u64,
    pub column_index: u64,
    pub purpose: Purpose,
}

impl StreamKey {
    pub fn new(master_seed: u64, purpose: Purpose) -> Self {
        StreamKey {
            master_seed,
            replication_index: 0,
            column_index: 0,
            purpose,
        }
    }

    pub fn with_replication(self, replication_index: u64) -> Self {
        StreamKey {
            replication_index,
            ..self
        }
    }

    pub fn with_column(self, column_index: u64) -> Self {
        StreamKey {
            column_index,
            ..self
        }
    }

    pub fn with_purpose(self, purpose: Purpose) -> Self {
        StreamKey { purpose, ..self }
    }

    /// A fresh key whose master seed hashes this whole key together with
    /// `label`. Replication and column restart at zero, purpose is kept.
    ///
    /// Used to carve independent sub-experiments (sweep cells, Monte Carlo
    /// phases) out of one master seed.
    pub fn subkey(&self, label: u64) -> StreamKey {
        let mut h = splitmix64(self.master_seed ^ 0x6a09_e667_f3bc_c908);
        h = splitmix64(h ^ self.replication_index);
        h = splitmix64(h ^ self.column_index.rotate_left(17));
        h = splitmix64(h ^ self.purpose.tag().rotate_left(41));
        h = splitmix64(h ^ label);
        StreamKey {
            master_seed: h,
            replication_index: 0,
            column_index: 0,
            purpose: self.purpose,
        }
    }

    fn chacha_key(&self) -> [u8; 32] {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&self.master_seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.replication_index.to_le_bytes());
        key[16..24].copy_from_slice(&self.column_index.to_le_bytes());
        key[24..32].copy_from_slice(&self.purpose.tag().to_le_bytes());
        key
    }

    pub fn stream(&self) -> UniformStream {
        UniformStream::new(self)
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sequential reader over a keyed stream.
#[derive(Debug, Clone)]
pub struct UniformStream {
    rng: ChaCha8Rng,
}

impl UniformStream {
    pub fn new(key: &StreamKey) -> Self {
        UniformStream {
            rng: ChaCha8Rng::from_seed(key.chacha_key()),
        }
    }

    /// Position the stream so the next draw is draw number `index`.
    pub fn seek(&mut self, index: u64) {
        self.rng.set_word_pos(2 * index as u128);
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..bound`, exactly unbiased (Lemire's
    /// multiply-shift; the rejection branch fires with probability below
    /// `bound / 2^64`).
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be positive");
        let mut m = (self.rng.next_u64() as u128) * (bound as u128);
        let mut low = m as u64;
        if low < bound {
            let threshold = bound.wrapping_neg() % bound;
            while low < threshold {
                m = (self.rng.next_u64() as u128) * (bound as u128);
                low = m as u64;
            }
        }
        (m >> 64) as u64
    }
}

/// `count` uniforms on [0, 1) from the stream addressed by `key`.
pub fn uniform_stream(key: &StreamKey, count: usize) -> Vec<f64> {
    let mut stream = key.stream();
    (0..count).map(|_| stream.next_f64()).collect()
}

/// Uniform random permutation of `1..=n` (Fisher-Yates).
pub fn random_permutation(key: &StreamKey, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (1..=n).collect();
    let mut stream = key.stream();
    for i in (1..n).rev() {
        let j = stream.next_below(i as u64 + 1) as usize;
        perm.swap(i, j);
    }
    perm
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn key(seed: u64) -> StreamKey {
        StreamKey::new(seed, Purpose::Jitter)
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut sab = 0.0;
        let mut saa = 0.0;
        let mut sbb = 0.0;
        for (x, y) in a.iter().zip(b) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma) * (x - ma);
            sbb += (y - mb) * (y - mb);
        }
        sab / (saa * sbb).sqrt()
    }

    #[test]
    fn same_key_same_values() {
        let k = key(11).with_replication(3).with_column(2);
        assert_eq!(uniform_stream(&k, 3), uniform_stream(&k, 3));
    }

    #[test]
    fn values_in_unit_interval_with_mean_half() {
        let v = uniform_stream(&key(5), 100_000);
        assert!(v.iter().all(|&x| (0.0..1.0).contains(&x)));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean - 0.5).abs() < 0.005, "mean {mean}");
    }

    #[test]
    fn purposes_are_uncorrelated() {
        let a = uniform_stream(&key(9), 100_000);
        let b = uniform_stream(&key(9).with_purpose(Purpose::Response), 100_000);
        let r = correlation(&a, &b);
        assert!(r.abs() < 0.01, "cross correlation {r}");
    }

    #[test]
    fn lagged_and_cross_correlations_bounded() {
        let n = 50_000;
        let bound = 4.0 / (n as f64).sqrt();
        let a = uniform_stream(&key(21).with_column(0), n + 1);
        let b = uniform_stream(&key(21).with_column(1), n);
        assert!(correlation(&a[..n], &a[1..]).abs() < bound);
        assert!(correlation(&a[..n], &b).abs() < bound);
        let c = uniform_stream(&key(21).with_replication(1), n);
        assert!(correlation(&a[..n], &c).abs() < bound);
    }

    #[test]
    fn seek_matches_sequential_draws() {
        let k = key(77);
        let seq = uniform_stream(&k, 40);
        let mut s = k.stream();
        s.seek(17);
        assert_eq!(s.next_f64(), seq[17]);
        s.seek(3);
        assert_eq!(s.next_f64(), seq[3]);
    }

    #[test]
    fn subkeys_differ() {
        let k = key(1);
        assert_ne!(k.subkey(1), k.subkey(2));
        assert_ne!(k.subkey(1), k.with_replication(1).subkey(1));
        assert_eq!(k.subkey(5), k.subkey(5));
    }

    #[test]
    fn permutation_of_one() {
        assert_eq!(random_permutation(&key(3), 1), vec![1]);
    }

    #[test]
    fn permutation_is_bijection() {
        for n in [2usize, 7, 64, 1000] {
            let mut p = random_permutation(&key(n as u64), n);
            p.sort_unstable();
            assert_eq!(p, (1..=n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn permutations_of_four_are_uniform() {
        let reps = 24_000u64;
        let base = key(2024).with_purpose(Purpose::Permutation);
        let mut counts: HashMap<Vec<usize>, u64> = HashMap::new();
        for r in 0..reps {
            *counts
                .entry(random_permutation(&base.with_replication(r), 4))
                .or_default() += 1;
        }
        assert_eq!(counts.len(), 24);
        for c in counts.values() {
            let freq = *c as f64 / reps as f64;
            assert!((freq - 1.0 / 24.0).abs() < 0.01, "frequency {freq}");
        }
    }

    #[test]
    fn next_below_hits_every_value() {
        let mut s = key(4).stream();
        let mut seen = [0u32; 5];
        for _ in 0..5000 {
            seen[s.next_below(5) as usize] += 1;
        }
        assert!(seen.iter().all(|&c| c > 850 && c < 1150), "{seen:?}");
    }
}
