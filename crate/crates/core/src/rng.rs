//! Portable seeded random streams.
//!
//! Every stochastic choice in the crate (random kernels, parameter init,
//! minibatch shuffles, synthetic images) draws from a [`Stream`]: a
//! xoshiro256++ generator whose 256-bit state is expanded from a `u64` with
//! SplitMix64. Sub-streams are keyed by `(seed, tag, index)` so that, for
//! example, image 17 of a source never depends on how many images were
//! generated before it.
//!
//! Draw conventions (part of the reproducibility contract):
//! - `uniform()` is `(next_u64 >> 11) * 2^-53`, in `[0, 1)`.
//! - `uniform_f32()` is `(next_u64 >> 40) * 2^-24`, exactly representable in `f32`.
//! - `below(n)` is `(next_u64 * n) >> 64` (128-bit multiply).
//! - `normal()` is Box-Muller on two `uniform()` draws, cosine branch only.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

#[derive(Clone, Debug)]
pub struct Stream(Xoshiro256PlusPlus);

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed of the sub-stream `(seed, tag, index)`.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    mix64(mix64(seed) ^ mix64(fnv1a(tag)).rotate_left(17) ^ mix64(index).rotate_left(41))
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    pub fn derive(seed: u64, tag: &str, index: u64) -> Self {
        Stream::new(derive_seed(seed, tag, index))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn uniform_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform on `[lo, hi)`.
    #[inline]
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    pub fn normal(&mut self) -> f64 {
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fisher-Yates, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
