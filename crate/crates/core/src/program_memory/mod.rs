//! The persistent adapter `W`, its program-slot view, soft composition,
//! the executing adapter and EMA consolidation.
//!
//! `W` (R×D) is the only persistent tensor. Programs are row blocks of it:
//! slot `n` covers rows `[n·r, (n+1)·r)` with `r = R/N`.

pub(crate) mod checkpoint;

pub use checkpoint::{read_adapter, write_adapter, ADAPTER_MAGIC, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::numerics::{concat_rows, rms, sigmoid, Matrix, MatrixView, Rng};

/// Low-rank factor `W` partitioned into `N` program slots.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterTensor {
    w: Matrix,
    num_programs: usize,
    slot_rows: usize,
}

/// Per-program gate logits `s` and the pre-sigmoid stable-weight logit.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingParams {
    pub s: Vec<f64>,
    pub gamma_logit: f64,
}

/// Frozen copy of the adapter taken at a task boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenAnchor {
    w_orig: Matrix,
    gamma: f64,
}

impl AdapterTensor {
    pub fn new(w: Matrix, num_programs: usize) -> Result<Self> {
        let rows = w.rows();
        if num_programs == 0 || rows == 0 || !rows.is_multiple_of(num_programs) {
            return Err(Error::Config(format!(
                "rank R = {rows} must be a positive multiple of the program count N = {num_programs}"
            )));
        }
        Ok(Self {
            w,
            num_programs,
            slot_rows: rows / num_programs,
        })
    }

    /// Gaussian initialization with standard deviation `1/sqrt(D)`.
    pub fn init(rank: usize, dim: usize, num_programs: usize, rng: &mut Rng) -> Result<Self> {
        let w = rng.gaussian_matrix(rank, dim, 1.0 / (dim as f64).sqrt());
        Self::new(w, num_programs)
    }

    pub fn weight(&self) -> &Matrix {
        &self.w
    }

    /// Raw mutable access for optimizer steps. Shape cannot change.
    pub fn weight_mut(&mut self) -> &mut [f64] {
        self.w.as_mut_slice()
    }

    pub fn num_programs(&self) -> usize {
        self.num_programs
    }

    pub fn slot_rows(&self) -> usize {
        self.slot_rows
    }

    pub fn rank(&self) -> usize {
        self.w.rows()
    }

    pub fn dim(&self) -> usize {
        self.w.cols()
    }

    /// Views over the N program slots in index order. No data is copied.
    pub fn partition(&self) -> Vec<MatrixView<'_>> {
        (0..self.num_programs)
            .map(|n| self.w.row_block(n * self.slot_rows, self.slot_rows))
            .collect()
    }

    /// Mutable slot views; writes land in the corresponding rows of `W`.
    pub fn slots_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        let chunk = self.slot_rows * self.w.cols();
        self.w.as_mut_slice().chunks_mut(chunk)
    }

    /// `W ← (1−λ)·W + λ·W_exec`.
    pub fn consolidate(&mut self, w_exec: &Matrix, lambda: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::invalid("lambda", lambda, "consolidation rate must lie in [0, 1]"));
        }
        if w_exec.shape() != self.w.shape() {
            return Err(Error::ShapeMismatch {
                op: "consolidate",
                left: self.w.shape(),
                right: w_exec.shape(),
            });
        }
        let keep = 1.0 - lambda;
        for (w, e) in self.w.as_mut_slice().iter_mut().zip(w_exec.as_slice()) {
            *w = keep * *w + lambda * e;
        }
        Ok(())
    }
}

impl ScalingParams {
    /// Zero gate logits and `γ₀ = σ(−log RMS(W))`.
    pub fn init(adapter: &AdapterTensor) -> Result<Self> {
        Ok(Self {
            s: vec![0.0; adapter.num_programs()],
            gamma_logit: gamma_logit_for(adapter.weight())?,
        })
    }

    pub fn gamma(&self) -> f64 {
        sigmoid(self.gamma_logit)
    }

    pub fn gates(&self) -> Vec<f64> {
        self.s.iter().map(|&v| sigmoid(v)).collect()
    }
}

impl FrozenAnchor {
    pub fn new(w_orig: Matrix, gamma: f64) -> Self {
        Self { w_orig, gamma }
    }

    pub fn w_orig(&self) -> &Matrix {
        &self.w_orig
    }

    /// Effective γ at snapshot time.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn checksum(&self) -> u64 {
        self.w_orig.checksum() ^ self.gamma.to_bits().rotate_left(17)
    }
}

fn gamma_logit_for(w: &Matrix) -> Result<f64> {
    let r = rms(w)?;
    if r == 0.0 {
        return Err(Error::ZeroRms);
    }
    Ok(-r.ln())
}

/// `γ₀ = σ(−log RMS(W))`.
pub fn init_gamma(w: &Matrix) -> Result<f64> {
    gamma_logit_for(w).map(sigmoid)
}

/// `Ŵ_h = Σₙ ᾱ_{h,n}·σ(s_n)·W⁽ⁿ⁾`.
pub fn compose_head(alpha_bar_h: &[f64], scaling: &ScalingParams, slots: &[MatrixView<'_>]) -> Result<Matrix> {
    let n = slots.len();
    if alpha_bar_h.len() != n {
        return Err(Error::LengthMismatch {
            op: "compose_head",
            expected: n,
            actual: alpha_bar_h.len(),
        });
    }
    if scaling.s.len() != n {
        return Err(Error::LengthMismatch {
            op: "compose_head (gates)",
            expected: n,
            actual: scaling.s.len(),
        });
    }
    let first = slots.first().ok_or(Error::EmptyInput("compose_head"))?;
    let mut out = Matrix::zeros(first.rows(), first.cols());
    for ((slot, &a), &s) in slots.iter().zip(alpha_bar_h).zip(&scaling.s) {
        out.axpy(a * sigmoid(s), slot)?;
    }
    Ok(out)
}

/// `Ŵ = [Ŵ_1; …; Ŵ_N]`, one head per slot-sized row block.
pub fn compose_all_heads(batch_alpha: &[Vec<f64>], scaling: &ScalingParams, adapter: &AdapterTensor) -> Result<Matrix> {
    if batch_alpha.len() != adapter.num_programs() {
        return Err(Error::LengthMismatch {
            op: "compose_all_heads (heads)",
            expected: adapter.num_programs(),
            actual: batch_alpha.len(),
        });
    }
    let slots = adapter.partition();
    let heads = batch_alpha
        .iter()
        .map(|a| compose_head(a, scaling, &slots))
        .collect::<Result<Vec<_>>>()?;
    concat_rows(&heads)
}

/// `W_exec = γ·W_orig + Ŵ`.
pub fn compose_exec(anchor: &FrozenAnchor, gamma: f64, w_hat: &Matrix) -> Result<Matrix> {
    if anchor.w_orig.shape() != w_hat.shape() {
        return Err(Error::ShapeMismatch {
            op: "compose_exec",
            left: anchor.w_orig.shape(),
            right: w_hat.shape(),
        });
    }
    let mut out = w_hat.clone();
    out.axpy(gamma, &anchor.w_orig.view())?;
    Ok(out)
}

/// Deep copy of the current adapter and effective γ.
pub fn snapshot_anchor(adapter: &AdapterTensor, scaling: &ScalingParams) -> FrozenAnchor {
    FrozenAnchor {
        w_orig: adapter.weight().clone(),
        gamma: scaling.gamma(),
    }
}
