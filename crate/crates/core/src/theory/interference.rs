//! Cross-task gradient interaction under program routing.
//!
//! A task's exec-space gradient splits into per-head row blocks `g̃_h`
//! (embedded in the full R×D space, so blocks of different heads have
//! disjoint support). Routing hands head `h`'s block to program `n` with
//! weight `σ(s_n)·ᾱ_{h,n}`. The routed gradient keeps one R×D component per
//! program, holding those weighted head blocks side by side, so that
//!
//! ```text
//! ⟨G^t, G^t'⟩ = Σ_n Σ_h σ_{n,t}σ_{n,t'}ᾱ_{h,n,t}ᾱ_{h,n,t'}⟨g̃_{h,t}, g̃_{h,t'}⟩
//!             = Σ_h β_h ⟨g̃_{h,t}, g̃_{h,t'}⟩.
//! ```
//!
//! Summing a program's component over its head blocks gives that program's
//! slot gradient `σ(s_n)·Σ_h ᾱ_{h,n}·[∂L/∂W_exec]_h`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{frobenius_inner, matmul, matmul_nt, matmul_tn, Matrix};
use crate::program_memory::{compose_all_heads, AdapterTensor, FrozenAnchor, ScalingParams};

#[derive(Clone, Debug, PartialEq)]
pub struct TaskGradientRecord {
    pub task: usize,
    /// `alpha_bar[h][n]`.
    pub alpha_bar: Vec<Vec<f64>>,
    /// Effective gates `σ(s_n)`.
    pub gates: Vec<f64>,
    /// Per-head blocks `g̃_h`, each R×D with support on rows of head `h`.
    pub head_grads: Vec<Matrix>,
    /// Routed gradient, `(N·R) × D`: program `n` occupies rows `[n·R, (n+1)·R)`.
    pub routed: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InterferenceReport {
    pub beta: Vec<f64>,
    pub j_procl: f64,
    pub s: f64,
    pub bound_rhs: f64,
    pub slack: f64,
    pub decomposition_residual: f64,
    pub beta_in_range: bool,
}

impl InterferenceReport {
    /// Bound holds to `tol` and every `β_h ∈ [0, 1]`.
    pub fn holds(&self, tol: f64) -> bool {
        self.beta_in_range && self.slack >= -tol
    }
}

impl TaskGradientRecord {
    /// Builds a record from an exec-space gradient (R×D), splitting it into
    /// head blocks of `slot_rows` rows.
    pub fn from_exec_gradient(
        task: usize,
        exec_grad: &Matrix,
        slot_rows: usize,
        alpha_bar: Vec<Vec<f64>>,
        gates: Vec<f64>,
    ) -> Result<Self> {
        let n = gates.len();
        if n == 0 || exec_grad.rows() != n * slot_rows {
            return Err(Error::ShapeMismatch {
                op: "TaskGradientRecord::from_exec_gradient",
                left: exec_grad.shape(),
                right: (n * slot_rows, exec_grad.cols()),
            });
        }
        let head_grads = (0..n)
            .map(|h| {
                let mut g = Matrix::zeros(exec_grad.rows(), exec_grad.cols());
                for row in h * slot_rows..(h + 1) * slot_rows {
                    g.row_mut(row).copy_from_slice(exec_grad.row(row));
                }
                g
            })
            .collect();
        Self::from_head_grads(task, head_grads, alpha_bar, gates)
    }

    pub fn from_head_grads(task: usize, head_grads: Vec<Matrix>, alpha_bar: Vec<Vec<f64>>, gates: Vec<f64>) -> Result<Self> {
        let n = gates.len();
        if head_grads.len() != n || alpha_bar.len() != n || alpha_bar.iter().any(|a| a.len() != n) {
            return Err(Error::LengthMismatch {
                op: "TaskGradientRecord (heads)",
                expected: n,
                actual: head_grads.len(),
            });
        }
        let (rows, cols) = head_grads[0].shape();
        if head_grads.iter().any(|g| g.shape() != (rows, cols)) {
            return Err(Error::ShapeMismatch {
                op: "TaskGradientRecord (head blocks)",
                left: (rows, cols),
                right: head_grads.iter().find(|g| g.shape() != (rows, cols)).unwrap().shape(),
            });
        }
        let mut routed = Matrix::zeros(n * rows, cols);
        for program in 0..n {
            let component = &mut routed.as_mut_slice()[program * rows * cols..(program + 1) * rows * cols];
            for (h, g) in head_grads.iter().enumerate() {
                let w = gates[program] * alpha_bar[h][program];
                for (o, v) in component.iter_mut().zip(g.as_slice()) {
                    *o += w * v;
                }
            }
        }
        Ok(Self {
            task,
            alpha_bar,
            gates,
            head_grads,
            routed,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.gates.len()
    }

    /// Collapses each program's component over its head blocks: the slot
    /// gradient of program `n`, `slot_rows × D`.
    pub fn program_gradients(&self, slot_rows: usize) -> Vec<Matrix> {
        let n = self.num_heads();
        let (rows, cols) = self.head_grads[0].shape();
        (0..n)
            .map(|program| {
                let mut out = Matrix::zeros(slot_rows, cols);
                for h in 0..n {
                    let block = self.routed.row_block(program * rows + h * slot_rows, slot_rows);
                    out.axpy(1.0, &block).expect("slot shapes agree");
                }
                out
            })
            .collect()
    }
}

/// `r = y* − γ·x·(A·W_orig)ᵀ`. With `A = I` this is the linear-model
/// residual.
pub fn residual_target(y_star: &Matrix, x: &Matrix, a: &Matrix, anchor: &FrozenAnchor) -> Result<Matrix> {
    let prior = matmul(a, anchor.w_orig())?;
    let explained = matmul_nt(x, &prior)?.scale(anchor.gamma());
    y_star.sub(&explained)
}

/// Gradient record for the linear model `y = x·W_execᵀ` (`x` is B×D, `y*`
/// is B×R) under the half batch-mean squared loss:
/// `∂L/∂W_exec = (1/B)·(x·Ŵᵀ − r)ᵀ·x`.
pub fn linear_model_record(
    task: usize,
    x: &Matrix,
    y_star: &Matrix,
    anchor: &FrozenAnchor,
    adapter: &AdapterTensor,
    scaling: &ScalingParams,
    alpha_bar: Vec<Vec<f64>>,
) -> Result<TaskGradientRecord> {
    let w_hat = compose_all_heads(&alpha_bar, scaling, adapter)?;
    let identity = Matrix::identity(adapter.rank());
    let r = residual_target(y_star, x, &identity, anchor)?;
    let err = matmul_nt(x, &w_hat)?.sub(&r)?;
    let g_exec = matmul_tn(&err, x)?.scale(1.0 / x.rows() as f64);
    TaskGradientRecord::from_exec_gradient(task, &g_exec, adapter.slot_rows(), alpha_bar, scaling.gates())
}

/// `β_h = Σ_n σ(s_{n,t})σ(s_{n,t'})ᾱ_{h,n,t}ᾱ_{h,n,t'}`.
pub fn beta(h: usize, rec_t: &TaskGradientRecord, rec_t2: &TaskGradientRecord) -> Result<f64> {
    let n = rec_t.num_heads();
    if rec_t2.num_heads() != n {
        return Err(Error::LengthMismatch {
            op: "beta",
            expected: n,
            actual: rec_t2.num_heads(),
        });
    }
    if h >= n {
        return Err(Error::invalid("head", h, "head index out of range"));
    }
    Ok((0..n)
        .map(|k| rec_t.gates[k] * rec_t2.gates[k] * rec_t.alpha_bar[h][k] * rec_t2.alpha_bar[h][k])
        .sum())
}

/// `J(t, t') = |⟨G^t, G^t'⟩_F|`.
pub fn cross_task_j(g_t: &Matrix, g_t2: &Matrix) -> Result<f64> {
    Ok(frobenius_inner(g_t, g_t2)?.abs())
}

/// `S(t, t') = Σ_h |⟨g̃_{h,t}, g̃_{h,t'}⟩_F|`.
pub fn per_head_s(rec_t: &TaskGradientRecord, rec_t2: &TaskGradientRecord) -> Result<f64> {
    head_inners(rec_t, rec_t2).map(|v| v.iter().map(|x| x.abs()).sum())
}

fn head_inners(rec_t: &TaskGradientRecord, rec_t2: &TaskGradientRecord) -> Result<Vec<f64>> {
    if rec_t.num_heads() != rec_t2.num_heads() {
        return Err(Error::LengthMismatch {
            op: "per_head_s",
            expected: rec_t.num_heads(),
            actual: rec_t2.num_heads(),
        });
    }
    rec_t
        .head_grads
        .iter()
        .zip(&rec_t2.head_grads)
        .map(|(a, b)| frobenius_inner(a, b))
        .collect()
}

/// `|⟨G^t, G^t'⟩ − Σ_h β_h⟨g̃_{h,t}, g̃_{h,t'}⟩|`.
pub fn check_decomposition(rec_t: &TaskGradientRecord, rec_t2: &TaskGradientRecord) -> Result<f64> {
    let full = frobenius_inner(&rec_t.routed, &rec_t2.routed)?;
    let inners = head_inners(rec_t, rec_t2)?;
    let mut decomposed = 0.0;
    for (h, inner) in inners.iter().enumerate() {
        decomposed += beta(h, rec_t, rec_t2)? * inner;
    }
    Ok((full - decomposed).abs())
}

/// Evaluates `J ≤ max_h β_h · S` for a pair of task records.
pub fn check_interference_bound(rec_t: &TaskGradientRecord, rec_t2: &TaskGradientRecord) -> Result<InterferenceReport> {
    let beta_v = (0..rec_t.num_heads())
        .map(|h| beta(h, rec_t, rec_t2))
        .collect::<Result<Vec<_>>>()?;
    let j_procl = cross_task_j(&rec_t.routed, &rec_t2.routed)?;
    let s = per_head_s(rec_t, rec_t2)?;
    let max_beta = beta_v.iter().copied().fold(0.0, f64::max);
    let bound_rhs = max_beta * s;
    Ok(InterferenceReport {
        beta_in_range: beta_v.iter().all(|b| (0.0..=1.0).contains(b)),
        beta: beta_v,
        j_procl,
        s,
        bound_rhs,
        slack: bound_rhs - j_procl,
        decomposition_residual: check_decomposition(rec_t, rec_t2)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn one_hot(n: usize, k: usize) -> Vec<f64> {
        (0..n).map(|i| if i == k { 1.0 } else { 0.0 }).collect()
    }

    fn random_record(rng: &mut Rng, task: usize, rank: usize, d: usize, n: usize) -> TaskGradientRecord {
        let g = rng.gaussian_matrix(rank, d, 1.0);
        let alpha = (0..n).map(|_| rng.simplex(n, 1.5)).collect();
        let gates = (0..n).map(|_| crate::numerics::sigmoid(2.0 * rng.gaussian())).collect();
        TaskGradientRecord::from_exec_gradient(task, &g, rank / n, alpha, gates).unwrap()
    }

    #[test]
    fn beta_examples() {
        let mut rng = Rng::new(0);
        let g = rng.gaussian_matrix(4, 3, 1.0);
        let half = vec![0.5, 0.5];
        let r1 = TaskGradientRecord::from_exec_gradient(0, &g, 2, vec![one_hot(2, 0), one_hot(2, 0)], half.clone()).unwrap();
        let r2 = TaskGradientRecord::from_exec_gradient(1, &g, 2, vec![one_hot(2, 1), one_hot(2, 1)], half.clone()).unwrap();
        assert_eq!(beta(0, &r1, &r2).unwrap(), 0.0);
        assert_eq!(beta(0, &r1, &r1).unwrap(), 0.25);
        assert!(beta(2, &r1, &r2).is_err());

        let a = random_record(&mut rng, 0, 8, 3, 4);
        let b = random_record(&mut rng, 1, 8, 3, 4);
        for h in 0..4 {
            let mut expect = 0.0;
            for k in 0..4 {
                expect += a.gates[k] * b.gates[k] * a.alpha_bar[h][k] * b.alpha_bar[h][k];
            }
            let got = beta(h, &a, &b).unwrap();
            assert!((got - expect).abs() < 1e-15);
            assert!((0.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn j_examples() {
        let mut rng = Rng::new(1);
        let g = rng.gaussian_matrix(4, 3, 1.0);
        assert_eq!(cross_task_j(&g, &Matrix::zeros(4, 3)).unwrap(), 0.0);
        assert!((cross_task_j(&g, &g).unwrap() - g.frobenius_norm().powi(2)).abs() < 1e-12);
        let rec = TaskGradientRecord::from_exec_gradient(0, &g, 2, vec![vec![0.5; 2]; 2], vec![0.5; 2]).unwrap();
        assert_eq!(cross_task_j(&rec.head_grads[0], &rec.head_grads[1]).unwrap(), 0.0);
    }

    #[test]
    fn s_examples() {
        let mut rng = Rng::new(2);
        let zero = TaskGradientRecord::from_exec_gradient(0, &Matrix::zeros(4, 2), 2, vec![vec![0.5; 2]; 2], vec![0.5; 2]).unwrap();
        let a = random_record(&mut rng, 1, 4, 2, 2);
        assert_eq!(per_head_s(&zero, &a).unwrap(), 0.0);

        let g1 = rng.gaussian_matrix(2, 3, 1.0);
        let g2 = rng.gaussian_matrix(2, 3, 1.0);
        let s1 = TaskGradientRecord::from_exec_gradient(0, &g1, 2, vec![vec![1.0]], vec![0.7]).unwrap();
        let s2 = TaskGradientRecord::from_exec_gradient(1, &g2, 2, vec![vec![1.0]], vec![0.4]).unwrap();
        assert!((per_head_s(&s1, &s2).unwrap() - frobenius_inner(&g1, &g2).unwrap().abs()).abs() < 1e-15);

        let b = random_record(&mut rng, 2, 4, 2, 2);
        let expect: f64 = (0..2)
            .map(|h| frobenius_inner(&a.head_grads[h], &b.head_grads[h]).unwrap().abs())
            .sum();
        assert!((per_head_s(&a, &b).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn decomposition_examples() {
        let z = TaskGradientRecord::from_exec_gradient(0, &Matrix::zeros(4, 2), 2, vec![vec![0.5; 2]; 2], vec![0.5; 2]).unwrap();
        assert_eq!(check_decomposition(&z, &z).unwrap(), 0.0);

        let mut rng = Rng::new(3);
        let g1 = rng.gaussian_matrix(2, 3, 1.0);
        let g2 = rng.gaussian_matrix(2, 3, 1.0);
        let s1 = TaskGradientRecord::from_exec_gradient(0, &g1, 2, vec![vec![1.0]], vec![0.3]).unwrap();
        let s2 = TaskGradientRecord::from_exec_gradient(1, &g2, 2, vec![vec![1.0]], vec![0.9]).unwrap();
        assert!(check_decomposition(&s1, &s2).unwrap() < 1e-15);
    }

    #[test]
    fn routed_program_gradients_match_slot_gradient_formula() {
        let mut rng = Rng::new(4);
        let rec = random_record(&mut rng, 0, 6, 4, 3);
        let g_exec = rec.head_grads.iter().fold(Matrix::zeros(6, 4), |acc, g| acc.add(g).unwrap());
        let progs = rec.program_gradients(2);
        for (n, pg) in progs.iter().enumerate() {
            let mut expect = Matrix::zeros(2, 4);
            for h in 0..3 {
                expect.axpy(rec.gates[n] * rec.alpha_bar[h][n], &g_exec.row_block(2 * h, 2)).unwrap();
            }
            assert!(pg.sub(&expect).unwrap().frobenius_norm() < 1e-14);
        }
    }

    #[test]
    fn residual_target_examples() {
        let mut rng = Rng::new(5);
        let x = rng.gaussian_matrix(3, 4, 1.0);
        let a = rng.gaussian_matrix(2, 4, 1.0);
        let w_orig = rng.gaussian_matrix(4, 4, 1.0);
        let anchor = FrozenAnchor::new(w_orig.clone(), 0.4);
        let explained = matmul_nt(&x, &matmul(&a, &w_orig).unwrap()).unwrap().scale(0.4);
        let r = residual_target(&explained, &x, &a, &anchor).unwrap();
        assert!(r.frobenius_norm() < 1e-14);

        let zero_anchor = FrozenAnchor::new(Matrix::zeros(4, 4), 0.4);
        let y = rng.gaussian_matrix(3, 2, 1.0);
        assert_eq!(residual_target(&y, &x, &a, &zero_anchor).unwrap(), y);

        let r = residual_target(&y, &x, &a, &anchor).unwrap();
        for b in 0..3 {
            for o in 0..2 {
                let mut e = 0.0;
                for k in 0..4 {
                    for c in 0..4 {
                        e += x.get(b, c) * a.get(o, k) * w_orig.get(k, c);
                    }
                }
                assert!((r.get(b, o) - (y.get(b, o) - 0.4 * e)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bound_is_tight_for_single_head_identical_routing() {
        let mut rng = Rng::new(6);
        let g1 = rng.gaussian_matrix(3, 2, 1.0);
        let g2 = rng.gaussian_matrix(3, 2, 1.0);
        let r1 = TaskGradientRecord::from_exec_gradient(0, &g1, 3, vec![vec![1.0]], vec![0.6]).unwrap();
        let r2 = TaskGradientRecord::from_exec_gradient(1, &g2, 3, vec![vec![1.0]], vec![0.6]).unwrap();
        let rep = check_interference_bound(&r1, &r2).unwrap();
        assert!(rep.slack.abs() < 1e-14);
        assert!(rep.holds(1e-10));
    }
}
