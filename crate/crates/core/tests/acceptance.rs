//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use procl::harness::verify::{bound_suite, consolidation_suite, decomposition_suite, gradient_suite, DECAY_TOL, RATE_TOL};
use procl::harness::{
    average_accuracy, evaluate, forgetting_first_task, median, null_writer, prepare, run_arm, AccuracyMatrix,
    ExperimentConfig,
};
use procl::numerics::{Matrix, Rng};
use procl::program_memory::FrozenAnchor;
use procl::routing::route_batch;
use procl::theory::Tolerance;
use procl::training::{
    train_sequence, train_task, Dataset, Method, ModelState, TaskData, TrainConfig,
};

struct Outcome {
    passed: bool,
    detail: String,
}

type Criterion = (&'static str, Option<Duration>, fn() -> Outcome);

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut out = f();
    let elapsed = start.elapsed();
    out.detail = format!("{}; {:.2?}", out.detail, elapsed);
    if let Some(limit) = limit {
        if elapsed > limit {
            out.passed = false;
            out.detail = format!("{} (limit {:?})", out.detail, limit);
        }
    }
    out
}

fn gradient_fidelity() -> Outcome {
    let suite = gradient_suite(2024, 20, Tolerance { rel_tol: 1e-4, abs_floor: 1e-7 }).unwrap();
    Outcome {
        passed: suite.passed && suite.instances == 20,
        detail: format!(
            "{} instances, {} leaf checks, max relative error {:.2e}, eps disagreement {:.2e}{}",
            suite.instances,
            suite.leaves_checked,
            suite.max_relative_error,
            suite.max_epsilon_disagreement,
            if suite.failures.is_empty() { String::new() } else { format!(", failures: {:?}", suite.failures) }
        ),
    }
}

fn decomposition_identity() -> Outcome {
    let suite = decomposition_suite(7, 100, 8, 4, 6).unwrap();
    Outcome {
        passed: suite.passed && suite.max_residual <= 1e-10,
        detail: format!("{} instances (R=8, N=4, D=6), max residual {:.2e}", suite.instances, suite.max_residual),
    }
}

fn interference_bound() -> Outcome {
    let suite = bound_suite(11, 10_000).unwrap();
    let beta_ok = suite.min_beta >= 0.0 && suite.max_beta <= 1.0;
    Outcome {
        passed: suite.passed && beta_ok && suite.max_excess <= 1e-10 && suite.max_disjoint_j <= 1e-10,
        detail: format!(
            "{} pairs, max J - bound {:.2e}, beta in [{:.3}, {:.3}], {} disjoint pairs with max J {:.2e}",
            suite.pairs, suite.max_excess, suite.min_beta, suite.max_beta, suite.disjoint_pairs, suite.max_disjoint_j
        ),
    }
}

fn consolidation_decay() -> Outcome {
    let suite = consolidation_suite(5, 200).unwrap();
    let det = &suite.deterministic;
    let exact_slow = det.iter().find(|d| d.lambda == 0.1).unwrap();
    let det_ok = exact_slow.max_pointwise_relative <= DECAY_TOL && det.iter().all(|d| d.max_normalized <= DECAY_TOL);
    let rate_ok = suite.rate_relative_error.is_some_and(|e| e <= RATE_TOL);
    let normalized: Vec<String> = det
        .iter()
        .map(|d| format!("lambda {} {:.1e}", d.lambda, d.max_normalized))
        .collect();
    Outcome {
        passed: det_ok && rate_ok && suite.stochastic.n_runs == 200 && suite.stochastic.lambda == 0.9,
        detail: format!(
            "deterministic t<=50: pointwise relative {:.1e} (lambda 0.1), normalized [{}]; stochastic 200 runs lambda 0.9: fitted rate {:.5} vs {:.5} ({:.2}% off, window {})",
            exact_slow.max_pointwise_relative,
            normalized.join(", "),
            suite.stochastic.fitted_decay_rate.unwrap_or(f64::NAN),
            suite.target_rate,
            100.0 * suite.rate_relative_error.unwrap_or(f64::NAN),
            suite.stochastic.fit_window
        ),
    }
}

fn toy_tasks(rng: &mut Rng, count: usize, d: usize, d_out: usize, n: usize) -> Vec<TaskData> {
    let mk = |rng: &mut Rng, shift: f64| {
        let inputs: Vec<Matrix> = (0..n)
            .map(|_| {
                let mut x = rng.gaussian_matrix(3, d, 1.0);
                x.as_mut_slice().iter_mut().for_each(|v| *v += shift);
                x
            })
            .collect();
        Dataset::new(inputs, rng.gaussian_matrix(n, d_out, 1.0)).unwrap()
    };
    (0..count)
        .map(|t| TaskData {
            train: mk(rng, t as f64),
            eval: mk(rng, t as f64),
        })
        .collect()
}

/// Reference `W_exec` for one batch, composed slot by slot from the routing
/// weights without going through the library's composition code.
fn reference_exec(state: &ModelState, w: &Matrix, inputs: &[Matrix]) -> Matrix {
    let routing = route_batch(inputs, &state.encoder, &state.keys).unwrap();
    let n = state.num_programs();
    let r = w.rows() / n;
    let gamma = state.scaling.gamma();
    let mut out = Matrix::zeros(w.rows(), w.cols());
    for h in 0..n {
        for k in 0..n {
            let c = routing.batch_alpha[h][k] / (1.0 + (-state.scaling.s[k]).exp());
            for i in 0..r {
                for j in 0..w.cols() {
                    let v = out.get(h * r + i, j) + c * w.get(k * r + i, j);
                    out.set(h * r + i, j, v);
                }
            }
        }
    }
    for i in 0..w.rows() {
        for j in 0..w.cols() {
            out.set(i, j, out.get(i, j) + gamma * state.anchor.w_orig().get(i, j));
        }
    }
    out
}

fn algorithm_conformance() -> Outcome {
    let cfg = TrainConfig {
        rank: 8,
        num_programs: 4,
        key_dim: 5,
        lambda: 0.9,
        learning_rate: 0.0,
        epochs_per_task: 2,
        batch_size: 3,
        ..Default::default()
    };
    let mut rng = Rng::new(99);
    let mut state = ModelState::init(5, 2, &cfg, &mut rng).unwrap();
    state.a = rng.gaussian_matrix(2, 8, 1.0);
    state.scaling.s = rng.gaussian_vec(4, 1.0);
    state.anchor = FrozenAnchor::new(rng.gaussian_matrix(8, 5, 1.0), 0.6);
    let tasks = toy_tasks(&mut rng, 3, 5, 2, 8);

    // Closed-form EMA unroll: W_K = (1-λ)^K W_0 + Σ_j λ(1-λ)^(K-1-j) W_exec_j.
    let w0 = state.adapter.weight().clone();
    let mut execs = Vec::new();
    let mut w_iter = w0.clone();
    for _ in 0..cfg.epochs_per_task {
        for batch in tasks[0].train.batches(cfg.batch_size).unwrap() {
            let e = reference_exec(&state, &w_iter, &batch.inputs);
            w_iter = w_iter.scale(0.1).add(&e.scale(0.9)).unwrap();
            execs.push(e);
        }
    }
    let k = execs.len() as i32;
    let mut closed = w0.scale(0.1f64.powi(k));
    for (j, e) in execs.iter().enumerate() {
        closed = closed.add(&e.scale(0.9 * 0.1f64.powi(k - 1 - j as i32))).unwrap();
    }
    let mut trained = state.clone();
    let log = train_task(&mut trained, &tasks[0].train, &cfg, 0).unwrap();
    let unroll_err = trained
        .adapter
        .weight()
        .as_slice()
        .iter()
        .zip(closed.as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let untouched = trained.a == state.a && trained.scaling == state.scaling && trained.encoder == state.encoder;
    let anchor_fixed = log.batches.iter().all(|b| b.anchor_checksum == state.anchor.checksum());

    // Anchor refresh exactly at task boundaries, with a nonzero learning rate.
    let seq_cfg = TrainConfig { learning_rate: 0.02, ..cfg.clone() };
    let eval = |s: &ModelState, d: &Dataset| evaluate(s, d, procl::harness::Metric::Mse);
    let mut run_state = state.clone();
    let run = train_sequence(&mut run_state, &tasks, &seq_cfg, eval).unwrap();
    let mut boundary_ok = run.anchor_checksums.len() == 3;
    for (t, task_log) in run.tasks.iter().enumerate() {
        boundary_ok &= task_log.batches.iter().all(|b| b.anchor_checksum == run.anchor_checksums[t]);
        let mut prefix = state.clone();
        if t > 0 {
            train_sequence(&mut prefix, &tasks[..t], &seq_cfg, eval).unwrap();
        }
        let expected = FrozenAnchor::new(prefix.adapter.weight().clone(), prefix.scaling.gamma()).checksum();
        boundary_ok &= run.anchor_checksums[t] == expected;
        if t > 0 {
            boundary_ok &= run.anchor_checksums[t] != run.anchor_checksums[t - 1];
        }
    }
    Outcome {
        passed: unroll_err <= 1e-12 && untouched && anchor_fixed && boundary_ok,
        detail: format!(
            "lr=0 unroll over {k} batches max abs error {unroll_err:.1e}, other leaves untouched {untouched}, anchor constant within task {anchor_fixed}, refresh at boundaries {boundary_ok}"
        ),
    }
}

fn inference_cost() -> Outcome {
    let cfg = ExperimentConfig::default();
    let prepared = prepare(&cfg).unwrap();
    let arm = run_arm(&prepared, &cfg, Method::Procl, &mut null_writer()).unwrap();
    let routed = arm.state.ops.routing_evaluations();
    let composed = arm.state.ops.compositions();
    for task in &prepared.tasks {
        evaluate(&arm.state, &task.eval, prepared.metric).unwrap();
    }
    let extra_routing = arm.state.ops.routing_evaluations() - routed;
    let extra_compose = arm.state.ops.compositions() - composed;
    Outcome {
        passed: routed > 0 && extra_routing == 0 && extra_compose == 0 && arm.summary.inference_routing_evaluations == 0,
        detail: format!(
            "training routed {routed} times; post-training inference on {} tasks added {extra_routing} routing evaluations and {extra_compose} compositions",
            prepared.tasks.len()
        ),
    }
}

fn directional_forgetting() -> Outcome {
    let base = ExperimentConfig::default();
    assert_eq!((base.train.num_programs, base.train.key_dim, base.train.lambda), (4, 16, 0.9));
    let mut procl = Vec::new();
    let mut seq = Vec::new();
    for seed in 0..10 {
        let mut cfg = base.clone();
        cfg.train.seed = seed;
        let prepared = prepare(&cfg).unwrap();
        for (method, sink) in [(Method::Procl, &mut procl), (Method::SeqLora, &mut seq)] {
            let arm = run_arm(&prepared, &cfg, method, &mut null_writer()).unwrap();
            sink.push(forgetting_first_task(&arm.log.accuracy).unwrap());
        }
    }
    let (mp, ms) = (median(&procl).unwrap(), median(&seq).unwrap());
    Outcome {
        passed: mp < ms,
        detail: format!("3 orthogonal tasks, 10 seeds, N=4 d_k=16 lambda=0.9: median forgetting procl {mp:.4} vs seq_lora {ms:.4}"),
    }
}

fn metric_arithmetic() -> Outcome {
    let f = AccuracyMatrix::from_rounds(vec![vec![70.0], vec![65.0, 50.0], vec![60.0, 55.0, 40.0]]).unwrap();
    let a = AccuracyMatrix::from_rounds(vec![vec![0.6], vec![0.8, 0.4]]).unwrap();
    let fv = forgetting_first_task(&f).unwrap();
    let av = average_accuracy(&a).unwrap();
    Outcome {
        passed: fv == 7.5 && (av - 0.6).abs() <= 1e-15,
        detail: format!("70/65/60 -> {fv}, [[0.6],[0.8,0.4]] -> {av}"),
    }
}

fn run_cli(args: &[&str]) -> (bool, Vec<u8>) {
    let out = Command::new(env!("CARGO_BIN_EXE_procl")).args(args).output().unwrap();
    (out.status.success(), out.stdout)
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn cli_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("exp.toml");
    std::fs::write(&config, "[tasks]\nn_train = 128\nn_eval = 64\n").unwrap();
    let config = config.to_str().unwrap();
    let mut all_ok = true;
    let mut compared = 0;
    let invocations: [(&str, Vec<&str>); 3] = [
        ("train", vec!["train", "--config", config]),
        ("verify-theory", vec!["verify-theory", "--seed", "3"]),
        ("bench-forgetting", vec!["bench-forgetting", "--config", config, "--seeds", "2"]),
    ];
    for (name, args) in invocations {
        let mut outputs = Vec::new();
        for run in 0..2 {
            let dir = tmp.path().join(format!("{name}-{run}"));
            let mut full = args.clone();
            full.extend(["--out", dir.to_str().unwrap()]);
            let (ok, stdout) = run_cli(&full);
            all_ok &= ok;
            outputs.push((stdout, read_all(&dir)));
        }
        compared += outputs[0].1.len();
        all_ok &= !outputs[0].1.is_empty() && outputs[0] == outputs[1];
    }
    Outcome {
        passed: all_ok,
        detail: format!("train, verify-theory and bench-forgetting each run twice; {compared} output files plus stdout byte-identical: {all_ok}"),
    }
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("1 gradient fidelity", Some(Duration::from_secs(10)), gradient_fidelity),
        ("2 decomposition identity", Some(Duration::from_secs(5)), decomposition_identity),
        ("3 interference bound", Some(Duration::from_secs(30)), interference_bound),
        ("4 consolidation decay", Some(Duration::from_secs(60)), consolidation_decay),
        ("5 training-loop conformance", None, algorithm_conformance),
        ("6 routing-free inference", None, inference_cost),
        ("7 directional forgetting", Some(Duration::from_secs(600)), directional_forgetting),
        ("8 metric arithmetic", None, metric_arithmetic),
        ("9 CLI determinism", None, cli_determinism),
    ];
    let mut failed = 0;
    for (name, limit, check) in criteria {
        let out = timed(limit, check);
        println!("{} [{name}] {}", if out.passed { "PASS" } else { "FAIL" }, out.detail);
        failed += usize::from(!out.passed);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
