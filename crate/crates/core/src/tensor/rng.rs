use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Name of the generator behind [`Rng`]; recorded in checkpoints.
pub const RNG_ALGORITHM: &str = "chacha8";

/// Seeded, platform-independent random source.
///
/// Backed by the ChaCha8 stream cipher, so its position can be captured as
/// `(seed, word position)` and restored exactly. Normal variates use the
/// Box-Muller transform and are produced in pairs.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// Serializable position of an [`Rng`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = Rng::new(state.seed);
        rng.inner.set_word_pos(state.word_pos);
        rng
    }

    /// Independent generator derived from this one's seed and a label.
    /// Does not advance `self`.
    pub fn fork(&self, label: u64) -> Rng {
        let mixed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .rotate_left(17)
            ^ label.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        Rng::new(mixed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`, unbiased.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// One pair of independent standard normal variates (Box-Muller).
    pub fn normal_pair(&mut self) -> (f64, f64) {
        // u1 in (0, 1] keeps the logarithm finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        (r * theta.cos(), r * theta.sin())
    }

    pub fn normal(&mut self) -> f64 {
        self.normal_pair().0
    }

    pub fn normal_tensor<T: Real>(&mut self, dims: &[usize], mean: f64, std: f64) -> Result<Tensor<T>> {
        if !(std >= 0.0) {
            return Err(Error::invalid(format!("stddev must be >= 0, got {std}")));
        }
        let mut t = Tensor::zeros(dims)?;
        let data = t.data_mut();
        let mut chunks = data.chunks_mut(2);
        for pair in &mut chunks {
            let (a, b) = self.normal_pair();
            pair[0] = T::of_f64(mean + std * a);
            if pair.len() > 1 {
                pair[1] = T::of_f64(mean + std * b);
            }
        }
        Ok(t)
    }
}
