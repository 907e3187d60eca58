//! Consolidation as an EMA towards the expected executing adapter.
//!
//! With routing, gates and the anchor frozen and gradient updates disabled,
//! `W ← (1−λ)·W + λ·(γ·W_orig + Δ(x_t))` is a linear recursion whose mean
//! error against `W* = γ·W_orig + E[Δ(x)]` contracts by `(1−λ)` per step.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};
use crate::program_memory::compose_all_heads;
use crate::routing::route_batch;
use crate::training::ModelState;

/// A finite input distribution: batches with nonnegative weights.
#[derive(Clone, Debug)]
pub struct InputDistribution {
    batches: Vec<Vec<Matrix>>,
    weights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl InputDistribution {
    pub fn new(batches: Vec<Vec<Matrix>>, weights: Vec<f64>) -> Result<Self> {
        if batches.is_empty() {
            return Err(Error::EmptyInput("InputDistribution"));
        }
        if batches.len() != weights.len() {
            return Err(Error::LengthMismatch {
                op: "InputDistribution",
                expected: batches.len(),
                actual: weights.len(),
            });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("weights", format!("{weights:?}"), "finite and >= 0"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("weights", total, "must have a positive sum"));
        }
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let cumulative = weights
            .iter()
            .scan(0.0, |acc, w| {
                *acc += w;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            batches,
            weights,
            cumulative,
        })
    }

    pub fn uniform(batches: Vec<Vec<Matrix>>) -> Result<Self> {
        let n = batches.len();
        Self::new(batches, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    /// Normalized weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn batches(&self) -> &[Vec<Matrix>] {
        &self.batches
    }

    fn sample(&self, rng: &mut Rng) -> usize {
        let u = rng.uniform();
        self.cumulative.partition_point(|c| *c < u).min(self.batches.len() - 1)
    }
}

/// `Δ(x) = Ŵ(x)`, the routed composition for one batch. Does not touch the
/// op counter.
pub fn routed_delta(state: &ModelState, batch: &[Matrix]) -> Result<Matrix> {
    let routing = route_batch(batch, &state.encoder, &state.keys)?;
    compose_all_heads(&routing.batch_alpha, &state.scaling, &state.adapter)
}

/// `W* = γ·W_orig + Σ_i p_i·Δ(x_i)`, exact over the finite distribution.
pub fn consolidation_fixed_point(state: &ModelState, dist: &InputDistribution) -> Result<Matrix> {
    let deltas = dist
        .batches()
        .iter()
        .map(|b| routed_delta(state, b))
        .collect::<Result<Vec<_>>>()?;
    fixed_point_from_deltas(state, &deltas, dist.weights())
}

fn fixed_point_from_deltas(state: &ModelState, deltas: &[Matrix], weights: &[f64]) -> Result<Matrix> {
    let mut w_star = state.anchor.w_orig().scale(state.scaling.gamma());
    for (d, p) in deltas.iter().zip(weights) {
        w_star.axpy(*p, &d.view())?;
    }
    Ok(w_star)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecursionSettings {
    pub lambda: f64,
    pub t_max: usize,
    pub n_runs: usize,
    pub base_seed: u64,
    /// Fit only while `‖E[E^(t)]‖` exceeds this many Monte-Carlo standard
    /// errors.
    pub snr_threshold: f64,
}

impl Default for RecursionSettings {
    fn default() -> Self {
        Self {
            lambda: 0.9,
            t_max: 30,
            n_runs: 200,
            base_seed: 0,
            snr_threshold: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConsolidationTrace {
    pub lambda: f64,
    pub n_runs: usize,
    #[serde(skip)]
    pub w_star: Matrix,
    /// `‖mean_runs W^(t) − W*‖_F` for `t = 0..=t_max`.
    pub error_norms: Vec<f64>,
    /// Standard error of the Monte-Carlo mean, per `t`, in Frobenius norm.
    pub standard_errors: Vec<f64>,
    /// Largest per-run deviation from `(1−λ)^t·E^(0)`, relative to
    /// `‖E^(0)‖`. Zero up to rounding for single-input distributions.
    pub max_per_run_deviation: f64,
    /// Steps `0..fit_window` used by the log-linear fit.
    pub fit_window: usize,
    /// Slope of `ln ‖E[E^(t)]‖` against `t`; compare with `ln(1−λ)`.
    pub fitted_decay_rate: Option<f64>,
}

/// Least-squares slope of `ln y` against `t` for `t = 0..y.len()`.
pub fn log_linear_slope(y: &[f64]) -> Option<f64> {
    if y.len() < 2 || y.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return None;
    }
    let n = y.len() as f64;
    let t_mean = (n - 1.0) / 2.0;
    let l: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let l_mean = l.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (t, lv) in l.iter().enumerate() {
        let dt = t as f64 - t_mean;
        num += dt * (lv - l_mean);
        den += dt * dt;
    }
    Some(num / den)
}

/// Runs `n_runs` independent input streams from `start` with routing and
/// gates frozen, tracking the Monte-Carlo mean error against `W*`. Run `k`
/// draws its stream from seed `base_seed + k`.
pub fn consolidation_recursion_check(
    state: &ModelState,
    dist: &InputDistribution,
    start: &Matrix,
    settings: &RecursionSettings,
) -> Result<ConsolidationTrace> {
    let lambda = settings.lambda;
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::invalid("lambda", lambda, "must lie in (0, 1)"));
    }
    if settings.n_runs == 0 {
        return Err(Error::invalid("n_runs", settings.n_runs, "must be positive"));
    }
    if start.shape() != state.adapter.weight().shape() {
        return Err(Error::ShapeMismatch {
            op: "consolidation_recursion_check",
            left: start.shape(),
            right: state.adapter.weight().shape(),
        });
    }
    let deltas = dist
        .batches()
        .iter()
        .map(|b| routed_delta(state, b))
        .collect::<Result<Vec<_>>>()?;
    let w_star = fixed_point_from_deltas(state, &deltas, dist.weights())?;
    let prior = state.anchor.w_orig().scale(state.scaling.gamma());
    let targets = deltas.iter().map(|d| prior.add(d)).collect::<Result<Vec<_>>>()?;

    let steps = settings.t_max + 1;
    let len = start.len();
    let mut sum = vec![vec![0.0; len]; steps];
    let mut sum_sq = vec![vec![0.0; len]; steps];
    let e0 = start.sub(&w_star)?;
    let e0_norm = e0.frobenius_norm();
    let mut max_dev: f64 = 0.0;

    for run in 0..settings.n_runs {
        let mut rng = Rng::new(settings.base_seed.wrapping_add(run as u64));
        let mut w = start.clone();
        for t in 0..steps {
            if t > 0 {
                let target = &targets[dist.sample(&mut rng)];
                for (wv, tv) in w.as_mut_slice().iter_mut().zip(target.as_slice()) {
                    *wv = (1.0 - lambda) * *wv + lambda * tv;
                }
            }
            let decay = (1.0 - lambda).powi(t as i32);
            let mut dev_sq = 0.0;
            for (i, ((wv, ws), e)) in w.as_slice().iter().zip(w_star.as_slice()).zip(e0.as_slice()).enumerate() {
                sum[t][i] += wv;
                sum_sq[t][i] += wv * wv;
                let d = (wv - ws) - decay * e;
                dev_sq += d * d;
            }
            if e0_norm > 0.0 {
                max_dev = max_dev.max(dev_sq.sqrt() / e0_norm);
            }
        }
    }

    let runs = settings.n_runs as f64;
    let mut error_norms = Vec::with_capacity(steps);
    let mut standard_errors = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut err_sq = 0.0;
        let mut var_sum = 0.0;
        for (i, ws) in w_star.as_slice().iter().enumerate() {
            let mean = sum[t][i] / runs;
            err_sq += (mean - ws).powi(2);
            if settings.n_runs > 1 {
                let var = ((sum_sq[t][i] - runs * mean * mean) / (runs - 1.0)).max(0.0);
                var_sum += var / runs;
            }
        }
        error_norms.push(err_sq.sqrt());
        standard_errors.push(var_sum.sqrt());
    }

    let fit_window = error_norms
        .iter()
        .zip(&standard_errors)
        .take_while(|(e, se)| **e > 0.0 && **e > settings.snr_threshold * **se)
        .count();
    Ok(ConsolidationTrace {
        lambda,
        n_runs: settings.n_runs,
        w_star,
        fitted_decay_rate: log_linear_slope(&error_norms[..fit_window]),
        error_norms,
        standard_errors,
        max_per_run_deviation: max_dev,
        fit_window,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program_memory::compose_exec;
    use crate::training::{forward, Mode, TrainConfig};

    fn setup(seed: u64) -> (ModelState, Vec<Vec<Matrix>>) {
        let cfg = TrainConfig { rank: 4, num_programs: 2, key_dim: 3, ..Default::default() };
        let mut rng = Rng::new(seed);
        let mut state = ModelState::init(3, 2, &cfg, &mut rng).unwrap();
        state.scaling.s = rng.gaussian_vec(2, 1.0);
        let batches = (0..4)
            .map(|_| (0..2).map(|_| rng.gaussian_matrix(2, 3, 2.0)).collect())
            .collect();
        (state, batches)
    }

    #[test]
    fn single_input_fixed_point_is_its_exec_adapter() {
        let (state, batches) = setup(1);
        let dist = InputDistribution::uniform(vec![batches[0].clone()]).unwrap();
        let w_star = consolidation_fixed_point(&state, &dist).unwrap();
        let w_exec = forward(&state, &batches[0], Mode::Train).unwrap().w_exec;
        assert!(w_star.sub(&w_exec).unwrap().frobenius_norm() < 1e-14);
    }

    #[test]
    fn two_equal_inputs_average_deltas() {
        let (state, batches) = setup(2);
        let d1 = routed_delta(&state, &batches[0]).unwrap();
        let d2 = routed_delta(&state, &batches[1]).unwrap();
        let dist = InputDistribution::uniform(batches[..2].to_vec()).unwrap();
        let w_star = consolidation_fixed_point(&state, &dist).unwrap();
        let expect = compose_exec(&state.anchor, state.scaling.gamma(), &d1.add(&d2).unwrap().scale(0.5)).unwrap();
        assert!(w_star.sub(&expect).unwrap().frobenius_norm() < 1e-14);
    }

    #[test]
    fn weighted_fixed_point_matches_oracle() {
        let (state, batches) = setup(3);
        let weights = vec![1.0, 3.0, 0.5, 2.5];
        let dist = InputDistribution::new(batches.clone(), weights.clone()).unwrap();
        let w_star = consolidation_fixed_point(&state, &dist).unwrap();
        let total: f64 = weights.iter().sum();
        let mut expect = state.anchor.w_orig().scale(state.scaling.gamma());
        for (b, w) in batches.iter().zip(&weights) {
            let d = routed_delta(&state, b).unwrap();
            for (e, v) in expect.as_mut_slice().iter_mut().zip(d.as_slice()) {
                *e += w / total * v;
            }
        }
        assert!(w_star.sub(&expect).unwrap().frobenius_norm() < 1e-13);
    }

    #[test]
    fn empty_distribution_is_rejected() {
        assert!(InputDistribution::uniform(vec![]).is_err());
        assert!(InputDistribution::new(vec![vec![Matrix::zeros(1, 1)]], vec![0.0]).is_err());
    }

    #[test]
    fn deterministic_stream_decays_exactly() {
        let (state, batches) = setup(4);
        let dist = InputDistribution::uniform(vec![batches[0].clone()]).unwrap();
        let start = Matrix::filled(4, 3, 1.5);
        let settings = RecursionSettings { lambda: 0.1, t_max: 50, n_runs: 2, ..Default::default() };
        let trace = consolidation_recursion_check(&state, &dist, &start, &settings).unwrap();
        let e0 = trace.error_norms[0];
        for (t, e) in trace.error_norms.iter().enumerate() {
            let expect = 0.9f64.powi(t as i32) * e0;
            assert!((e - expect).abs() <= 1e-12 * expect, "t={t}: {e} vs {expect}");
        }
        assert!(trace.max_per_run_deviation < 1e-12);
    }

    #[test]
    fn starting_at_fixed_point_stays_at_noise_floor() {
        let (state, batches) = setup(5);
        let dist = InputDistribution::uniform(batches).unwrap();
        let w_star = consolidation_fixed_point(&state, &dist).unwrap();
        let settings = RecursionSettings { n_runs: 100, t_max: 10, ..Default::default() };
        let trace = consolidation_recursion_check(&state, &dist, &w_star, &settings).unwrap();
        assert!(trace.error_norms[0] < 1e-13);
        for (e, se) in trace.error_norms.iter().zip(&trace.standard_errors).skip(1) {
            assert!(*e <= 5.0 * se + 1e-12, "{e} vs se {se}");
        }
        assert_eq!(trace.fit_window, 0);
        assert_eq!(trace.fitted_decay_rate, None);
    }

    #[test]
    fn rejects_lambda_outside_open_interval() {
        let (state, batches) = setup(6);
        let dist = InputDistribution::uniform(batches).unwrap();
        let start = state.adapter.weight().clone();
        for lambda in [0.0, 1.0, -0.5] {
            let s = RecursionSettings { lambda, ..Default::default() };
            assert!(consolidation_recursion_check(&state, &dist, &start, &s).is_err());
        }
    }

    #[test]
    fn slope_of_exact_geometric_sequence() {
        let y: Vec<f64> = (0..10).map(|t| 3.0 * 0.5f64.powi(t)).collect();
        assert!((log_linear_slope(&y).unwrap() - 0.5f64.ln()).abs() < 1e-12);
        assert_eq!(log_linear_slope(&[1.0]), None);
    }
}
