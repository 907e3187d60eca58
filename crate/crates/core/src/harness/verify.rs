//! Randomized suites over the theory checks, shared by the CLI and the
//! acceptance tests.

use serde::Serialize;

use crate::error::Result;
use crate::numerics::{sigmoid, Matrix, Rng};
use crate::program_memory::{AdapterTensor, FrozenAnchor, ScalingParams};
use crate::routing::{KeyBank, TaskEncoder};
use crate::theory::{
    check_gradients, check_interference_bound, consolidation_fixed_point, consolidation_recursion_check,
    linear_model_record, ConsolidationTrace, InputDistribution, RecursionSettings, TaskGradientRecord, Tolerance,
};
use crate::training::{Batch, Mode, ModelState};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientSuite {
    pub instances: usize,
    pub leaves_checked: usize,
    pub max_relative_error: f64,
    pub max_epsilon_disagreement: f64,
    pub failures: Vec<String>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecompositionSuite {
    pub instances: usize,
    pub max_residual: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundSuite {
    pub pairs: usize,
    /// `max(J − max β · S)`; must not exceed the tolerance.
    pub max_excess: f64,
    pub min_beta: f64,
    pub max_beta: f64,
    pub disjoint_pairs: usize,
    pub max_disjoint_j: f64,
    pub min_identical_slack: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeterministicDecay {
    pub lambda: f64,
    pub t_max: usize,
    /// `max_t |‖E^(t)‖ − (1−λ)^t‖E^(0)‖| / ((1−λ)^t‖E^(0)‖)`.
    pub max_pointwise_relative: f64,
    /// Same deviation divided by `‖E^(0)‖` instead.
    pub max_normalized: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConsolidationSuite {
    pub deterministic: Vec<DeterministicDecay>,
    pub stochastic: ConsolidationTrace,
    pub target_rate: f64,
    pub rate_relative_error: Option<f64>,
    /// Largest `‖E[E^(t)]‖ / se_t` for `t ≥ 1` when starting at `W*`.
    pub fixed_point_max_snr: f64,
    pub passed: bool,
}

pub const DECOMPOSITION_TOL: f64 = 1e-10;
pub const BOUND_TOL: f64 = 1e-10;
pub const DECAY_TOL: f64 = 1e-12;
pub const RATE_TOL: f64 = 0.05;

/// Random harness-model instance with non-trivial routing, gates, `γ` and
/// an anchor that differs from `W`.
pub fn random_instance(rng: &mut Rng, d: usize, rank: usize, n: usize, batch: usize) -> Result<(ModelState, Batch)> {
    let d_out = 2 + rng.index(2);
    let dk = 2 + rng.index(3);
    let w0 = rng.gaussian_matrix(d_out, d, 1.0);
    let a = rng.gaussian_matrix(d_out, rank, 0.7);
    let adapter = AdapterTensor::new(rng.gaussian_matrix(rank, d, 0.7), n)?;
    let encoder = TaskEncoder::new(rng.gaussian_matrix(n * dk, d, 1.0), rng.gaussian_vec(n * dk, 0.5), n, dk)?;
    let keys = KeyBank {
        keys: (0..n).map(|_| rng.gaussian_matrix(n, dk, 0.8)).collect(),
    };
    let mut state = ModelState::from_parts(w0, a, adapter, encoder, keys)?;
    state.scaling.s = rng.gaussian_vec(n, 1.0);
    state.scaling.gamma_logit = rng.gaussian();
    let w_orig = state.adapter.weight().add(&rng.gaussian_matrix(rank, d, 0.3))?;
    state.anchor = FrozenAnchor::new(w_orig, sigmoid(rng.gaussian()));
    let tokens = 1 + rng.index(3);
    let inputs = (0..batch).map(|_| rng.gaussian_matrix(tokens, d, 1.0)).collect();
    let targets = rng.gaussian_matrix(batch, d_out, 1.0);
    Ok((state, Batch::new(inputs, targets)?))
}

/// Every leaf of `instances` random models (D 3–6, R 4–8, N 2–4, B 1–4) in
/// both modes against central differences.
pub fn gradient_suite(seed: u64, instances: usize, tol: Tolerance) -> Result<GradientSuite> {
    let mut rng = Rng::new(seed);
    let mut out = GradientSuite {
        instances,
        leaves_checked: 0,
        max_relative_error: 0.0,
        max_epsilon_disagreement: 0.0,
        failures: Vec::new(),
        passed: true,
    };
    for i in 0..instances {
        let d = 3 + rng.index(4);
        let (n, rank) = match rng.index(3) {
            0 => (2, 2 * (2 + rng.index(3))),
            1 => (3, 6),
            _ => (4, 4 * (1 + rng.index(2))),
        };
        let b = 1 + rng.index(4);
        let (state, batch) = random_instance(&mut rng, d, rank, n, b)?;
        for mode in [Mode::Train, Mode::Infer] {
            for check in check_gradients(&state, &batch, mode, tol)? {
                out.leaves_checked += 1;
                out.max_relative_error = out.max_relative_error.max(check.max_relative_error);
                out.max_epsilon_disagreement = out.max_epsilon_disagreement.max(check.max_epsilon_disagreement);
                if !check.passed {
                    out.passed = false;
                    out.failures.push(format!(
                        "instance {i} (D={d} R={rank} N={n} B={b}) {mode:?} {}: rel {:.3e}",
                        check.leaf, check.max_relative_error
                    ));
                }
            }
        }
    }
    Ok(out)
}

/// Linear-model record for task `task`: random inputs, targets, gates and
/// routing over a shared adapter and anchor.
pub fn random_record(
    rng: &mut Rng,
    task: usize,
    adapter: &AdapterTensor,
    anchor: &FrozenAnchor,
    alpha_bar: Option<Vec<Vec<f64>>>,
) -> Result<TaskGradientRecord> {
    let n = adapter.num_programs();
    let b = 1 + rng.index(4);
    let x = rng.gaussian_matrix(b, adapter.dim(), 1.0);
    let y_star = rng.gaussian_matrix(b, adapter.rank(), 1.0);
    let scaling = ScalingParams {
        s: rng.gaussian_vec(n, 2.0),
        gamma_logit: 0.0,
    };
    let alpha = alpha_bar.unwrap_or_else(|| {
        let sharp = 0.5 + 3.0 * rng.uniform();
        (0..n).map(|_| rng.simplex(n, sharp)).collect()
    });
    linear_model_record(task, &x, &y_star, anchor, adapter, &scaling, alpha)
}

fn shared_memory(rng: &mut Rng, rank: usize, d: usize, n: usize) -> Result<(AdapterTensor, FrozenAnchor)> {
    let adapter = AdapterTensor::new(rng.gaussian_matrix(rank, d, 1.0), n)?;
    let anchor = FrozenAnchor::new(rng.gaussian_matrix(rank, d, 1.0), sigmoid(rng.gaussian()));
    Ok((adapter, anchor))
}

pub fn decomposition_suite(seed: u64, instances: usize, rank: usize, n: usize, d: usize) -> Result<DecompositionSuite> {
    let mut rng = Rng::new(seed);
    let mut max_residual: f64 = 0.0;
    for _ in 0..instances {
        let (adapter, anchor) = shared_memory(&mut rng, rank, d, n)?;
        let t = random_record(&mut rng, 0, &adapter, &anchor, None)?;
        let t2 = random_record(&mut rng, 1, &adapter, &anchor, None)?;
        max_residual = max_residual.max(crate::theory::check_decomposition(&t, &t2)?);
    }
    Ok(DecompositionSuite {
        instances,
        max_residual,
        passed: max_residual <= DECOMPOSITION_TOL,
    })
}

fn one_hot_routing(n: usize, slot: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..n).map(|k| if k == slot { 1.0 } else { 0.0 }).collect()).collect()
}

/// `pairs` random routing/gate pairs with `N ∈ {1, 2, 4}`, `R = 8`, `D = 6`,
/// plus disjoint one-hot pairs and identical-task pairs.
pub fn bound_suite(seed: u64, pairs: usize) -> Result<BoundSuite> {
    let mut rng = Rng::new(seed);
    let mut out = BoundSuite {
        pairs,
        max_excess: f64::NEG_INFINITY,
        min_beta: f64::INFINITY,
        max_beta: f64::NEG_INFINITY,
        disjoint_pairs: 0,
        max_disjoint_j: 0.0,
        min_identical_slack: f64::INFINITY,
        passed: true,
    };
    for i in 0..pairs {
        let n = [1, 2, 4][rng.index(3)];
        let (adapter, anchor) = shared_memory(&mut rng, 8, 6, n)?;
        let t = random_record(&mut rng, 0, &adapter, &anchor, None)?;
        let t2 = random_record(&mut rng, 1, &adapter, &anchor, None)?;
        let rep = check_interference_bound(&t, &t2)?;
        out.max_excess = out.max_excess.max(rep.j_procl - rep.bound_rhs);
        for b in &rep.beta {
            out.min_beta = out.min_beta.min(*b);
            out.max_beta = out.max_beta.max(*b);
        }
        out.passed &= rep.holds(BOUND_TOL);

        if i % 10 == 0 {
            let same = check_interference_bound(&t, &t)?;
            out.min_identical_slack = out.min_identical_slack.min(same.slack);
            out.passed &= same.holds(BOUND_TOL);
        }
        if n > 1 && i % 10 == 1 {
            let s1 = rng.index(n);
            let s2 = (s1 + 1 + rng.index(n - 1)) % n;
            let d1 = random_record(&mut rng, 0, &adapter, &anchor, Some(one_hot_routing(n, s1)))?;
            let d2 = random_record(&mut rng, 1, &adapter, &anchor, Some(one_hot_routing(n, s2)))?;
            let rep = check_interference_bound(&d1, &d2)?;
            out.disjoint_pairs += 1;
            out.max_disjoint_j = out.max_disjoint_j.max(rep.j_procl);
            out.passed &= rep.j_procl <= BOUND_TOL && rep.holds(BOUND_TOL);
        }
    }
    Ok(out)
}

fn consolidation_setup(rng: &mut Rng) -> Result<(ModelState, InputDistribution)> {
    let (d, rank, n) = (6, 8, 4);
    let (state, _) = random_instance(rng, d, rank, n, 1)?;
    let batches = (0..8)
        .map(|k| {
            let scale = 0.5 + 0.25 * k as f64;
            (0..2).map(|_| rng.gaussian_matrix(2, d, scale)).collect()
        })
        .collect();
    Ok((state, InputDistribution::uniform(batches)?))
}

fn deterministic_decay(state: &ModelState, dist: &InputDistribution, start: &Matrix, lambda: f64, t_max: usize) -> Result<DeterministicDecay> {
    let single = InputDistribution::uniform(vec![dist.batches()[0].clone()])?;
    let settings = RecursionSettings {
        lambda,
        t_max,
        n_runs: 1,
        ..Default::default()
    };
    let trace = consolidation_recursion_check(state, &single, start, &settings)?;
    let e0 = trace.error_norms[0];
    let mut pointwise: f64 = 0.0;
    let mut normalized: f64 = 0.0;
    for (t, e) in trace.error_norms.iter().enumerate() {
        let expect = (1.0 - lambda).powi(t as i32) * e0;
        let dev = (e - expect).abs();
        pointwise = pointwise.max(dev / expect);
        normalized = normalized.max(dev / e0);
    }
    Ok(DeterministicDecay {
        lambda,
        t_max,
        max_pointwise_relative: pointwise,
        max_normalized: normalized.max(trace.max_per_run_deviation),
    })
}

/// Deterministic single-input decay for several `λ`, the stochastic
/// 200-run fit at `λ = 0.9`, and the fixed-point noise floor.
pub fn consolidation_suite(seed: u64, n_runs: usize) -> Result<ConsolidationSuite> {
    let mut rng = Rng::new(seed);
    let (state, dist) = consolidation_setup(&mut rng)?;
    let w_star = consolidation_fixed_point(&state, &dist)?;
    let start = w_star.add(&rng.gaussian_matrix(w_star.rows(), w_star.cols(), 5.0))?;

    let deterministic = [0.1, 0.5, 0.9]
        .iter()
        .map(|&l| deterministic_decay(&state, &dist, &start, l, 50))
        .collect::<Result<Vec<_>>>()?;

    let settings = RecursionSettings {
        lambda: 0.9,
        t_max: 30,
        n_runs,
        base_seed: seed.wrapping_mul(1_000_003),
        ..Default::default()
    };
    let stochastic = consolidation_recursion_check(&state, &dist, &start, &settings)?;
    let target_rate = (1.0 - settings.lambda).ln();
    let rate_relative_error = stochastic
        .fitted_decay_rate
        .map(|r| ((r - target_rate) / target_rate).abs());

    let at_fixed = consolidation_recursion_check(&state, &dist, &w_star, &settings)?;
    let fixed_point_max_snr = at_fixed
        .error_norms
        .iter()
        .zip(&at_fixed.standard_errors)
        .skip(1)
        .map(|(e, se)| if *se > 0.0 { e / se } else { 0.0 })
        .fold(0.0, f64::max);

    let deterministic_ok = deterministic.iter().all(|d| d.max_normalized <= DECAY_TOL)
        && deterministic[0].max_pointwise_relative <= DECAY_TOL;
    let passed = deterministic_ok
        && rate_relative_error.is_some_and(|e| e <= RATE_TOL)
        && at_fixed.error_norms[0] <= 1e-12
        && fixed_point_max_snr < 6.0;
    Ok(ConsolidationSuite {
        deterministic,
        stochastic,
        target_rate,
        rate_relative_error,
        fixed_point_max_snr,
        passed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoryReport {
    pub gradients: GradientSuite,
    pub decomposition: DecompositionSuite,
    pub bound: BoundSuite,
    pub consolidation: ConsolidationSuite,
}

impl TheoryReport {
    pub fn passed(&self) -> bool {
        self.gradients.passed && self.decomposition.passed && self.bound.passed && self.consolidation.passed
    }
}

pub fn run_theory_suites(seed: u64) -> Result<TheoryReport> {
    Ok(TheoryReport {
        gradients: gradient_suite(seed, 20, Tolerance::default())?,
        decomposition: decomposition_suite(seed.wrapping_add(1), 100, 8, 4, 6)?,
        bound: bound_suite(seed.wrapping_add(2), 10_000)?,
        consolidation: consolidation_suite(seed.wrapping_add(3), 200)?,
    })
}
