//! Central finite differences over any trainable leaf, used as the oracle
//! for the hand-written backward pass.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::training::{backward, forward, loss_mse, Batch, Leaf, Mode, ModelState};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const SECONDARY_EPSILON: f64 = 1e-6;

fn probe_loss(state: &ModelState, batch: &Batch, mode: Mode) -> Result<f64> {
    let pass = forward(state, &batch.inputs, mode)?;
    let loss = loss_mse(&pass.y, &batch.targets)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("finite_diff_gradient loss"));
    }
    Ok(loss)
}

/// `(L(θ+ε) − L(θ−ε)) / 2ε` for every coordinate of `leaf`, rerunning the
/// full forward for each probe. Returned flat, in the leaf's storage order.
pub fn finite_diff_gradient(state: &ModelState, batch: &Batch, leaf: Leaf, epsilon: f64, mode: Mode) -> Result<Vec<f64>> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::invalid("epsilon", epsilon, "must be finite and > 0"));
    }
    let mut probe = state.clone();
    let len = probe.leaf_mut(leaf).len();
    let mut grad = Vec::with_capacity(len);
    for i in 0..len {
        let original = probe.leaf_mut(leaf)[i];
        probe.leaf_mut(leaf)[i] = original + epsilon;
        let plus = probe_loss(&probe, batch, mode)?;
        probe.leaf_mut(leaf)[i] = original - epsilon;
        let minus = probe_loss(&probe, batch, mode)?;
        probe.leaf_mut(leaf)[i] = original;
        grad.push((plus - minus) / (2.0 * epsilon));
    }
    Ok(grad)
}

/// Agreement is `|a − n| ≤ max(rel_tol·max(|a|, |n|), abs_floor)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Tolerance {
    pub rel_tol: f64,
    pub abs_floor: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { rel_tol: 1e-4, abs_floor: 1e-7 }
    }
}

impl Tolerance {
    pub fn agrees(&self, analytic: f64, numeric: f64) -> bool {
        let diff = (analytic - numeric).abs();
        diff <= (self.rel_tol * analytic.abs().max(numeric.abs())).max(self.abs_floor)
    }

    /// Relative error with the absolute floor as the smallest denominator.
    pub fn relative_error(&self, analytic: f64, numeric: f64) -> f64 {
        let scale = analytic.abs().max(numeric.abs()).max(self.abs_floor / self.rel_tol);
        (analytic - numeric).abs() / scale
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LeafCheck {
    pub leaf: String,
    pub coordinates: usize,
    pub max_relative_error: f64,
    /// Worst disagreement between the two finite-difference step sizes.
    pub max_epsilon_disagreement: f64,
    pub passed: bool,
}

/// Compares `backward` against finite differences on every leaf that is
/// live in `mode`. The secondary step size only flags cancellation; the
/// verdict uses the primary step.
pub fn check_gradients(state: &ModelState, batch: &Batch, mode: Mode, tol: Tolerance) -> Result<Vec<LeafCheck>> {
    let pass = forward(state, &batch.inputs, mode)?;
    let grads = backward(state, batch, &pass)?;
    let leaves: Vec<Leaf> = match mode {
        Mode::Train => Leaf::all(state.num_programs()),
        Mode::Infer => vec![Leaf::Adapter, Leaf::LoraA],
    };
    leaves
        .into_iter()
        .map(|leaf| {
            let analytic = grads.leaf(leaf);
            let coarse = finite_diff_gradient(state, batch, leaf, DEFAULT_EPSILON, mode)?;
            let fine = finite_diff_gradient(state, batch, leaf, SECONDARY_EPSILON, mode)?;
            let mut max_rel: f64 = 0.0;
            let mut max_eps: f64 = 0.0;
            let mut passed = true;
            for ((&a, &n), &f) in analytic.iter().zip(&coarse).zip(&fine) {
                max_rel = max_rel.max(tol.relative_error(a, n));
                max_eps = max_eps.max(tol.relative_error(n, f));
                passed &= tol.agrees(a, n);
            }
            Ok(LeafCheck {
                leaf: format!("{leaf:?}"),
                coordinates: analytic.len(),
                max_relative_error: max_rel,
                max_epsilon_disagreement: max_eps,
                passed,
            })
        })
        .collect()
}
