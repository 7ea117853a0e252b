//! Seeded, splittable randomness.
//!
//! Every random draw in the crate flows through [`RngStream`]. A stream is a
//! ChaCha20 generator whose 256-bit key is the SplitMix64 expansion of a
//! 64-bit stream key. Child streams derive their key from the parent key
//! and an integer id only, never from the parent's position, so the draws
//! a child produces do not depend on how much of the parent was consumed.
//!
//! Gaussian variates use the Box–Muller transform on two uniforms with 53
//! bits of precision; both outputs of each pair are used.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{invalid, Result};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix(a: u64, b: u64) -> u64 {
    let mut s = a ^ b.rotate_left(17);
    let first = splitmix64(&mut s);
    let mut t = first ^ b;
    splitmix64(&mut t)
}

/// A deterministic random stream identified by a 64-bit key.
#[derive(Debug, Clone)]
pub struct RngStream {
    key: u64,
    inner: ChaCha20Rng,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        let mut state = seed;
        let mut bytes = [0u8; 32];
        for chunk in bytes.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        Self {
            key: seed,
            inner: ChaCha20Rng::from_seed(bytes),
            spare_normal: None,
        }
    }

    /// The key this stream was created from.
    pub fn key(&self) -> u64 {
        self.key
    }

    /// Independent child stream labelled `id`.
    pub fn substream(&self, id: u64) -> RngStream {
        RngStream::new(mix(self.key, id))
    }

    /// Child stream reached by following `path` one id at a time, e.g.
    /// `(experiment, image, copy)`.
    pub fn derive(&self, path: &[u64]) -> RngStream {
        let key = path.iter().fold(self.key, |k, &id| mix(k, id));
        RngStream::new(key)
    }

    /// Fresh stream keyed by the next draw of this one. Successive forks
    /// differ, which makes repeated calls with the same `&mut` stream
    /// independent.
    pub fn fork(&mut self) -> RngStream {
        let key = self.inner.next_u64();
        RngStream::new(key)
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `(0, 1]`.
    pub fn uniform_open_low(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` by multiply-and-reject; `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.inner.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }

    /// Standard normal variate (Box–Muller).
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform_open_low();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// Samples an index with probability proportional to `weights`.
    /// Falls back to uniform when the weights carry no mass.
    pub fn weighted_index(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return self.below(weights.len());
        }
        let target = self.uniform() * total;
        let mut acc = 0.0;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if target < acc {
                return i;
            }
        }
        // rounding left `target` at the very top
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// `len` i.i.d. draws from `N(0, stddev²)`.
pub fn gaussian_sample(len: usize, stddev: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
    if !(stddev >= 0.0 && stddev.is_finite()) {
        return Err(invalid(
            "stddev",
            format!("must be finite and non-negative, got {stddev}"),
        ));
    }
    if stddev == 0.0 {
        return Ok(vec![0.0; len]);
    }
    Ok((0..len).map(|_| stddev * rng.standard_normal()).collect())
}
