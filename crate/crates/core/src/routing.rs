//! Input-conditioned program selection.
//!
//! Each sample is mean-pooled, mapped by an affine task encoder to `N`
//! queries of width `d_k`, and head `h` attends over its own `N` learnable
//! keys. Per-head weights are averaged over the batch before composition.

use crate::error::{Error, Result};
use crate::numerics::{dot, matvec, mean_rows, softmax, Matrix, Rng};

/// Affine map `D → N·d_k`, reshaped row-major to `N × d_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskEncoder {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    num_heads: usize,
    key_dim: usize,
}

/// One `N × d_k` key matrix per head.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyBank {
    pub keys: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingState {
    /// `per_sample_alpha[h][b]` is `α_h⁽ᵇ⁾`.
    pub per_sample_alpha: Vec<Vec<Vec<f64>>>,
    /// `batch_alpha[h]` is `ᾱ_h`.
    pub batch_alpha: Vec<Vec<f64>>,
}

impl TaskEncoder {
    pub fn new(weight: Matrix, bias: Vec<f64>, num_heads: usize, key_dim: usize) -> Result<Self> {
        if weight.rows() != num_heads * key_dim || bias.len() != weight.rows() {
            return Err(Error::ShapeMismatch {
                op: "TaskEncoder::new",
                left: weight.shape(),
                right: (bias.len(), num_heads * key_dim),
            });
        }
        Ok(Self { weight, bias, num_heads, key_dim })
    }

    /// Weight `~ N(0, 1/D)`, zero bias.
    pub fn init(input_dim: usize, num_heads: usize, key_dim: usize, rng: &mut Rng) -> Self {
        let weight = rng.gaussian_matrix(num_heads * key_dim, input_dim, 1.0 / (input_dim as f64).sqrt());
        Self {
            weight,
            bias: vec![0.0; num_heads * key_dim],
            num_heads,
            key_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn key_dim(&self) -> usize {
        self.key_dim
    }
}

impl KeyBank {
    /// Keys `~ N(0, 1/d_k)`.
    pub fn init(num_programs: usize, key_dim: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (key_dim as f64).sqrt();
        Self {
            keys: (0..num_programs)
                .map(|_| rng.gaussian_matrix(num_programs, key_dim, std))
                .collect(),
        }
    }

    pub fn num_heads(&self) -> usize {
        self.keys.len()
    }
}

impl RoutingState {
    pub fn num_heads(&self) -> usize {
        self.batch_alpha.len()
    }

    pub fn batch_size(&self) -> usize {
        self.per_sample_alpha.first().map_or(0, Vec::len)
    }

    /// Entropy of `ᾱ_h` for every head.
    pub fn head_entropies(&self) -> Vec<f64> {
        self.batch_alpha.iter().map(|a| routing_entropy(a)).collect()
    }
}

/// `z = (1/T) Σₜ xₜ`.
pub fn pool_input(x: &Matrix) -> Result<Vec<f64>> {
    mean_rows(x).map_err(|_| Error::EmptyInput("pool_input"))
}

/// `Q = reshape(weight·z + bias, N × d_k)`.
pub fn encode(z: &[f64], enc: &TaskEncoder) -> Result<Matrix> {
    let mut out = matvec(&enc.weight, z)?;
    for (o, b) in out.iter_mut().zip(&enc.bias) {
        *o += b;
    }
    Matrix::from_vec(enc.num_heads, enc.key_dim, out)
}

/// `α_h = softmax(q_h · K_hᵀ)`, no temperature.
pub fn head_attention(q_h: &[f64], keys_h: &Matrix) -> Result<Vec<f64>> {
    if q_h.len() != keys_h.cols() {
        return Err(Error::ShapeMismatch {
            op: "head_attention",
            left: (1, q_h.len()),
            right: keys_h.shape(),
        });
    }
    let logits: Vec<f64> = (0..keys_h.rows()).map(|n| dot(q_h, keys_h.row(n))).collect();
    softmax(&logits)
}

/// Per-sample routing followed by the batch average.
pub fn route_batch(x_batch: &[Matrix], enc: &TaskEncoder, keys: &KeyBank) -> Result<RoutingState> {
    if x_batch.is_empty() {
        return Err(Error::EmptyInput("route_batch"));
    }
    if keys.num_heads() != enc.num_heads() {
        return Err(Error::LengthMismatch {
            op: "route_batch (heads)",
            expected: enc.num_heads(),
            actual: keys.num_heads(),
        });
    }
    let heads = enc.num_heads();
    let mut per_sample: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(x_batch.len()); heads];
    for x in x_batch {
        let q = encode(&pool_input(x)?, enc)?;
        for (h, slot) in per_sample.iter_mut().enumerate() {
            slot.push(head_attention(q.row(h), &keys.keys[h])?);
        }
    }
    let inv_b = 1.0 / x_batch.len() as f64;
    let batch_alpha = per_sample
        .iter()
        .map(|samples| {
            let mut acc = vec![0.0; samples[0].len()];
            for a in samples {
                acc.iter_mut().zip(a).for_each(|(s, v)| *s += v);
            }
            acc.iter_mut().for_each(|s| *s *= inv_b);
            acc
        })
        .collect();
    Ok(RoutingState {
        per_sample_alpha: per_sample,
        batch_alpha,
    })
}

/// Shannon entropy in nats; `0·ln 0` is taken as 0.
pub fn routing_entropy(alpha: &[f64]) -> f64 {
    -alpha.iter().filter(|&&a| a > 0.0).map(|&a| a * a.ln()).sum::<f64>()
}
