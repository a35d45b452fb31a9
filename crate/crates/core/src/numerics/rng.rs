use rand::{RngExt, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::complex::{ComplexVector, C64};
use crate::error::{bail, Result};

/// Seeded random stream.
///
/// Backed by xoshiro256++ whose 256-bit state is expanded from the 64-bit seed
/// with SplitMix64. Uniform reals take the top 53 bits of each output word;
/// standard normals use the ziggurat sampler of `rand_distr`. Both are fixed
/// integer/IEEE algorithms, so a seed yields the same stream on every
/// platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: Xoshiro256PlusPlus,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: Xoshiro256PlusPlus::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform01(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform01()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Circularly symmetric complex Gaussian with `E|z|² = variance`.
    pub fn complex_gaussian(&mut self, variance: f64) -> C64 {
        let s = (variance / 2.0).sqrt();
        let re = self.standard_normal();
        let im = self.standard_normal();
        C64::new(s * re, s * im)
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

pub fn sample_complex_gaussian(rng: &mut Rng, n: usize, variance: f64) -> Result<ComplexVector> {
    if n == 0 {
        bail!(InvalidArgument, "sample count must be positive");
    }
    if !(variance > 0.0) || !variance.is_finite() {
        bail!(InvalidArgument, "variance must be positive and finite, got {}", variance);
    }
    ComplexVector::new((0..n).map(|_| rng.complex_gaussian(variance)).collect())
}
