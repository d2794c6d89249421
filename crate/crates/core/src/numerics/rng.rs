//! Counter-keyed random streams.
//!
//! Every random draw in the crate comes from a stream keyed by
//! `(global_seed, purpose, item_index)`, so the values one item sees never
//! depend on how many draws other items made or in which order items were
//! processed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// What a stream is used for. The discriminant is part of the stream key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Corpus = 1,
    Init = 2,
    Timestep = 3,
    Noise = 4,
    Augment = 5,
    Negatives = 6,
    Sampling = 7,
    Batch = 8,
    MonteCarlo = 9,
    Test = 10,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A deterministic random stream.
#[derive(Clone, Debug)]
pub struct RngStream {
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, purpose: Purpose, index: u64) -> Self {
        let mut key = [0u8; 32];
        let words = [
            splitmix64(seed),
            splitmix64(seed ^ splitmix64(purpose as u64)),
            splitmix64(index ^ 0xA076_1D64_78BD_642F),
            splitmix64(seed.rotate_left(17) ^ (purpose as u64) ^ index.rotate_left(41)),
        ];
        for (chunk, w) in key.chunks_mut(8).zip(words) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(purpose as u64);
        Self { inner }
    }

    /// Stream keyed by two indices, e.g. `(step, item)`.
    pub fn keyed(seed: u64, purpose: Purpose, major: u64, minor: u64) -> Self {
        Self::new(seed, purpose, splitmix64(major).wrapping_add(minor.wrapping_mul(0x2545_F491_4F6C_DD1D)))
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform integer in `[lo, hi]` inclusive.
    pub fn int_range(&mut self, lo: i64, hi: i64) -> i64 {
        self.inner.gen_range(lo..=hi)
    }

    /// Uniform index in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map({
            let mut s = RngStream::new(7, Purpose::Noise, 3);
            move |_| s.next_u64()
        }).collect();
        let b: Vec<u64> = (0..4).map({
            let mut s = RngStream::new(7, Purpose::Noise, 3);
            move |_| s.next_u64()
        }).collect();
        assert_eq!(a, b);
        let mut other_item = RngStream::new(7, Purpose::Noise, 4);
        let mut other_purpose = RngStream::new(7, Purpose::Augment, 3);
        assert_ne!(a[0], other_item.next_u64());
        assert_ne!(a[0], other_purpose.next_u64());
    }

    #[test]
    fn normal_moments_are_plausible() {
        let mut s = RngStream::new(1, Purpose::Test, 0);
        let xs = s.normals(200_000);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.01);
    }
}
