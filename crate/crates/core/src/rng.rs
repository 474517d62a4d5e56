//! Seeded random source.
//!
//! `Rng` wraps ChaCha8 (`rand_chacha::ChaCha8Rng`, the 8-round ChaCha stream
//! cipher keyed by the seed). It is portable: a seed yields the same stream on
//! every platform. Normal draws use the ziggurat sampler from `rand_distr`.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator derived from this one's seed and a stream label.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng {
            seed: self.seed,
            inner,
        }
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.gen::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    pub fn normal_tensor(&mut self, shape: &[usize], sigma: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for x in t.data_mut() {
            *x = sigma * self.standard_normal();
        }
        t
    }
}

/// I.i.d. `U[lo, hi)` entries.
pub fn init_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "uniform range needs lo < hi, got [{lo}, {hi})"
        )));
    }
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        *x = rng.uniform(lo, hi);
    }
    // Rounding in lo + (hi-lo)*u can land on hi for very narrow ranges.
    for x in t.data_mut() {
        if *x >= hi {
            *x = lo;
        }
    }
    Ok(t)
}

/// I.i.d. `N(0, sigma²)` entries.
pub fn init_normal(shape: &[usize], sigma: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "normal init needs sigma > 0, got {sigma}"
        )));
    }
    Ok(rng.normal_tensor(shape, sigma))
}
