//! Seeded, platform-independent randomness.
//!
//! All randomness in the crate flows from one `u64` seed through
//! [`SeededRng`] (ChaCha8 keystream, identical on every platform).
//! Subsystem streams are derived with [`derive_seed`]: the label is hashed
//! with FNV-1a 64 and the result mixed into the seed with one SplitMix64
//! round, so `derive_seed(s, "train") != derive_seed(s, "eval")` while both
//! stay reproducible from `s` alone.

use rand::distr::uniform::{SampleRange, SampleUniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Array, NumError, Scalar};

/// Derives a subsystem seed from a root seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf29ce484222325;
    const FNV_PRIME: u64 = 0x100000001b3;
    let mut h = FNV_OFFSET;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    // one SplitMix64 round over seed ^ label hash
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic random stream: identical seed, identical stream,
/// on every platform.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream for a named subsystem.
    pub fn derive(&self, label: &str) -> SeededRng {
        SeededRng::new(derive_seed(self.seed, label))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn range<T: SampleUniform, R: SampleRange<T>>(&mut self, range: R) -> T {
        self.inner.random_range(range)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        // Fisher-Yates, explicit so the stream usage is pinned down.
        for i in (1..items.len()).rev() {
            let j = self.inner.random_range(0..=i);
            items.swap(i, j);
        }
    }

    /// Array of i.i.d. `Normal(0, sigma^2)` samples.
    pub fn normal_array<T: Scalar>(
        &mut self,
        shape: &[usize],
        sigma: f64,
    ) -> Result<Array<T>, NumError> {
        let count: usize = shape.iter().product();
        let data = (0..count)
            .map(|_| T::of_f64(self.normal() * sigma))
            .collect();
        Array::from_vec(shape, data)
    }
}

/// Samples a `[fan_in, fan_out]` matrix from `Normal(0, 2/(fan_in+fan_out))`.
pub fn xavier_normal_init<T: Scalar>(
    fan_in: usize,
    fan_out: usize,
    rng: &mut SeededRng,
) -> Result<Array<T>, NumError> {
    if fan_in == 0 || fan_out == 0 {
        return Err(NumError::InvalidParam(format!(
            "xavier_normal_init requires positive fans, got ({fan_in}, {fan_out})"
        )));
    }
    let sigma = (2.0 / (fan_in + fan_out) as f64).sqrt();
    rng.normal_array(&[fan_in, fan_out], sigma)
}
