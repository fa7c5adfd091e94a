//! Seeded randomness: ChaCha8 streams, and the Gamma/Beta samplers behind
//! the teacher weight and the mixup coefficient.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Deterministic ChaCha8 stream. Identical seeds give identical streams;
/// [`SeededRng::split`] derives independent child streams by tag.
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

    /// Child stream keyed by `(seed, tag)`. Does not advance `self`.
    pub fn split(&self, tag: &str) -> SeededRng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update([0u8]);
        h.update(tag.as_bytes());
        let digest = h.finalize();
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        SeededRng::new(u64::from_le_bytes(b))
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = (self.next_u64() % (i as u64 + 1)) as usize;
            items.swap(i, j);
        }
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

/// Shape parameters of a Beta distribution, both strictly positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let p = BetaParams { alpha, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0 && self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "Beta parameters must be positive, got ({}, {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn variance(&self) -> f64 {
        let s = self.alpha + self.beta;
        self.alpha * self.beta / (s * s * (s + 1.0))
    }
}

/// Uniform draw in `[0, 1)` with 53 random mantissa bits.
pub fn sample_uniform(rng: &mut SeededRng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Gamma(shape, 1) by Marsaglia and Tsang's squeeze method. Shapes below
/// one are drawn at `shape + 1` and scaled by `U^(1/shape)`.
pub fn sample_gamma(shape: f64, rng: &mut SeededRng) -> Result<f64> {
    if !(shape.is_finite() && shape > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma shape must be positive, got {shape}"
        )));
    }
    if shape < 1.0 {
        let g = sample_gamma(shape + 1.0, rng)?;
        let u = 1.0 - sample_uniform(rng);
        return Ok(g * u.powf(1.0 / shape));
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = rng.normal();
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u = 1.0 - sample_uniform(rng);
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return Ok(d * v);
        }
    }
}

/// Beta draw as `g1 / (g1 + g2)`, redrawn until strictly inside `(0, 1)`.
pub fn sample_beta(params: BetaParams, rng: &mut SeededRng) -> Result<f64> {
    params.validate()?;
    loop {
        let g1 = sample_gamma(params.alpha, rng)?;
        let g2 = sample_gamma(params.beta, rng)?;
        let x = g1 / (g1 + g2);
        if x > 0.0 && x < 1.0 {
            return Ok(x);
        }
    }
}
