use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::Scalar;

/// Seeded random stream.
///
/// The same seed always yields the same sequence of draws. Independent
/// consumers derive their own stream with [`NoiseRng::split`].
#[derive(Debug, Clone)]
pub struct NoiseRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl NoiseRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fresh stream for consumer `counter`, seeded with `seed ^ counter`.
    pub fn split(&self, counter: u64) -> Self {
        Self::new(self.seed ^ counter)
    }

    pub fn normal<T: Scalar>(&mut self) -> T {
        T::lit(self.inner.sample::<f64, _>(StandardNormal))
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform draw from `[-bound, bound)`.
    pub fn symmetric<T: Scalar>(&mut self, bound: f64) -> T {
        T::lit(self.inner.random_range(-bound..bound))
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<X>(&mut self, xs: &mut [X]) {
        xs.shuffle(&mut self.inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = NoiseRng::new(7);
        let mut b = NoiseRng::new(7);
        for _ in 0..100 {
            assert_eq!(a.normal::<f64>(), b.normal::<f64>());
        }
    }

    #[test]
    fn split_streams_differ() {
        let root = NoiseRng::new(7);
        let mut a = root.split(1);
        let mut b = root.split(2);
        assert_eq!(a.seed(), 6);
        assert_ne!(a.normal::<f64>(), b.normal::<f64>());
    }
}
