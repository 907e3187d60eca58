use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::Matrix;

/// Seeded deterministic generator.
///
/// ChaCha8 keystream (counter based) underneath; Gaussian samples come from
/// the Box–Muller transform of two open-interval uniforms so the stream is
/// easy to reproduce elsewhere.
#[derive(Clone, Debug)]
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

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn gaussian(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::index on empty range");
        (self.uniform() * n as f64) as usize % n
    }

    pub fn gaussian_vec(&mut self, len: usize, std: f64) -> Vec<f64> {
        (0..len).map(|_| std * self.gaussian()).collect()
    }

    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        Matrix::from_vec(rows, cols, self.gaussian_vec(rows * cols, std))
            .expect("gaussian samples are finite")
    }

    /// A random probability vector of length `n` (softmax of Gaussian logits
    /// scaled by `sharpness`).
    pub fn simplex(&mut self, n: usize, sharpness: f64) -> Vec<f64> {
        let logits: Vec<f64> = (0..n).map(|_| sharpness * self.gaussian()).collect();
        super::softmax(&logits).expect("finite logits")
    }
}
