use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numerics::{frobenius_inner, matmul, matmul_nt, matmul_tn, Matrix, Rng};
use crate::program_memory::{
    compose_all_heads, compose_exec, snapshot_anchor, AdapterTensor, FrozenAnchor, ScalingParams,
};
use crate::routing::{encode, pool_input, route_batch, KeyBank, RoutingState, TaskEncoder};

use super::TrainConfig;

/// Counts routing passes and compositions. Only incremented by train-mode
/// forwards.
#[derive(Debug, Default)]
pub struct OpCounter {
    routing_evaluations: AtomicU64,
    compositions: AtomicU64,
}

impl OpCounter {
    pub fn routing_evaluations(&self) -> u64 {
        self.routing_evaluations.load(Ordering::Relaxed)
    }

    pub fn compositions(&self) -> u64 {
        self.compositions.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.routing_evaluations.store(0, Ordering::Relaxed);
        self.compositions.store(0, Ordering::Relaxed);
    }
}

impl Clone for OpCounter {
    fn clone(&self) -> Self {
        Self {
            routing_evaluations: AtomicU64::new(self.routing_evaluations()),
            compositions: AtomicU64::new(self.compositions()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Route, compose and execute `γ·W_orig + Ŵ`.
    Train,
    /// Use the consolidated adapter directly: `W_exec = W`.
    Infer,
}

/// A single adapted linear layer `y = z·(W0 + A·W_exec)ᵀ` with `z` the
/// mean-pooled sample, plus the routing machinery that builds `W_exec`.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub w0: Matrix,
    pub a: Matrix,
    pub adapter: AdapterTensor,
    pub anchor: FrozenAnchor,
    pub encoder: TaskEncoder,
    pub keys: KeyBank,
    pub scaling: ScalingParams,
    pub ops: OpCounter,
    version: u64,
}

/// Samples (each `T × D`) with one target row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Matrix>,
    pub targets: Matrix,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub y: Matrix,
    pub w_exec: Matrix,
    pub routing: Option<RoutingState>,
    /// Pooled inputs, one row per sample.
    pub pooled: Matrix,
    input_checksum: u64,
    state_version: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub w: Matrix,
    pub s: Vec<f64>,
    pub gamma_logit: f64,
    pub encoder_weight: Matrix,
    pub encoder_bias: Vec<f64>,
    pub keys: Vec<Matrix>,
    pub a: Matrix,
}

/// Trainable leaves, used to address parameters generically (finite
/// differences, optimizer).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Leaf {
    Adapter,
    GateLogits,
    GammaLogit,
    EncoderWeight,
    EncoderBias,
    Keys(usize),
    LoraA,
}

impl Leaf {
    pub fn all(num_heads: usize) -> Vec<Leaf> {
        let mut v = vec![
            Leaf::Adapter,
            Leaf::GateLogits,
            Leaf::GammaLogit,
            Leaf::EncoderWeight,
            Leaf::EncoderBias,
        ];
        v.extend((0..num_heads).map(Leaf::Keys));
        v.push(Leaf::LoraA);
        v
    }
}

impl Batch {
    pub fn new(inputs: Vec<Matrix>, targets: Matrix) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::EmptyInput("Batch::new"));
        }
        if inputs.len() != targets.rows() {
            return Err(Error::LengthMismatch {
                op: "Batch::new",
                expected: inputs.len(),
                actual: targets.rows(),
            });
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_checksum(&self) -> u64 {
        Self::input_checksum_of(&self.inputs)
    }
}

impl ModelState {
    /// Fresh model: `W0 ~ N(0, 1/D)`, `A = 0`, adapter `~ N(0, 1/D)`,
    /// zero gate logits, `γ₀ = σ(−log RMS(W))`, anchor = initial `W`.
    pub fn init(d_in: usize, d_out: usize, cfg: &TrainConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let w0 = rng.gaussian_matrix(d_out, d_in, 1.0 / (d_in as f64).sqrt());
        let a = Matrix::zeros(d_out, cfg.rank);
        let adapter = AdapterTensor::init(cfg.rank, d_in, cfg.num_programs, rng)?;
        let encoder = TaskEncoder::init(d_in, cfg.num_programs, cfg.key_dim, rng);
        let keys = KeyBank::init(cfg.num_programs, cfg.key_dim, rng);
        Self::from_parts(w0, a, adapter, encoder, keys)
    }

    /// Assembles a model from explicit parts; scaling and anchor are
    /// initialized from the adapter.
    pub fn from_parts(w0: Matrix, a: Matrix, adapter: AdapterTensor, encoder: TaskEncoder, keys: KeyBank) -> Result<Self> {
        let scaling = ScalingParams::init(&adapter)?;
        let anchor = snapshot_anchor(&adapter, &scaling);
        let state = Self {
            w0,
            a,
            adapter,
            anchor,
            encoder,
            keys,
            scaling,
            ops: OpCounter::default(),
            version: 0,
        };
        state.check_shapes()?;
        Ok(state)
    }

    fn check_shapes(&self) -> Result<()> {
        let (d_out, d_in) = self.w0.shape();
        let rank = self.adapter.rank();
        let n = self.adapter.num_programs();
        let mismatch = |op, left, right| Err(Error::ShapeMismatch { op, left, right });
        if self.a.shape() != (d_out, rank) {
            return mismatch("ModelState (A)", self.a.shape(), (d_out, rank));
        }
        if self.adapter.dim() != d_in {
            return mismatch("ModelState (W)", self.adapter.weight().shape(), (rank, d_in));
        }
        if self.encoder.input_dim() != d_in || self.encoder.num_heads() != n {
            return mismatch("ModelState (encoder)", self.encoder.weight.shape(), (n * self.encoder.key_dim(), d_in));
        }
        if self.keys.num_heads() != n
            || self.keys.keys.iter().any(|k| k.shape() != (n, self.encoder.key_dim()))
        {
            return mismatch("ModelState (keys)", (self.keys.num_heads(), 0), (n, self.encoder.key_dim()));
        }
        if self.anchor.w_orig().shape() != self.adapter.weight().shape() {
            return mismatch("ModelState (anchor)", self.anchor.w_orig().shape(), self.adapter.weight().shape());
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.w0.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w0.rows()
    }

    pub fn num_programs(&self) -> usize {
        self.adapter.num_programs()
    }

    /// Bumped on every parameter mutation; ties a forward pass to the state
    /// it was computed from.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn touch(&mut self) {
        self.version += 1;
    }

    /// Re-freezes the anchor from the current adapter (task boundary).
    pub fn refresh_anchor(&mut self) {
        self.anchor = snapshot_anchor(&self.adapter, &self.scaling);
        self.touch();
    }

    pub fn consolidate(&mut self, w_exec: &Matrix, lambda: f64) -> Result<()> {
        self.adapter.consolidate(w_exec, lambda)?;
        self.touch();
        Ok(())
    }

    pub fn leaf_mut(&mut self, leaf: Leaf) -> &mut [f64] {
        self.touch();
        match leaf {
            Leaf::Adapter => self.adapter.weight_mut(),
            Leaf::GateLogits => &mut self.scaling.s,
            Leaf::GammaLogit => std::slice::from_mut(&mut self.scaling.gamma_logit),
            Leaf::EncoderWeight => self.encoder.weight.as_mut_slice(),
            Leaf::EncoderBias => &mut self.encoder.bias,
            Leaf::Keys(h) => self.keys.keys[h].as_mut_slice(),
            Leaf::LoraA => self.a.as_mut_slice(),
        }
    }

    pub fn leaf_shape(&self, leaf: Leaf) -> (usize, usize) {
        match leaf {
            Leaf::Adapter => self.adapter.weight().shape(),
            Leaf::GateLogits => (1, self.scaling.s.len()),
            Leaf::GammaLogit => (1, 1),
            Leaf::EncoderWeight => self.encoder.weight.shape(),
            Leaf::EncoderBias => (1, self.encoder.bias.len()),
            Leaf::Keys(h) => self.keys.keys[h].shape(),
            Leaf::LoraA => self.a.shape(),
        }
    }

    /// Checksum over the frozen tensors (`W0` and the anchor).
    pub fn frozen_checksum(&self) -> u64 {
        self.w0.checksum().rotate_left(1) ^ self.anchor.checksum()
    }
}

impl Gradients {
    pub fn leaf(&self, leaf: Leaf) -> &[f64] {
        match leaf {
            Leaf::Adapter => self.w.as_slice(),
            Leaf::GateLogits => &self.s,
            Leaf::GammaLogit => std::slice::from_ref(&self.gamma_logit),
            Leaf::EncoderWeight => self.encoder_weight.as_slice(),
            Leaf::EncoderBias => &self.encoder_bias,
            Leaf::Keys(h) => self.keys[h].as_slice(),
            Leaf::LoraA => self.a.as_slice(),
        }
    }

    pub fn zeros_like(state: &ModelState) -> Self {
        Self {
            w: Matrix::zeros(state.adapter.rank(), state.d_in()),
            s: vec![0.0; state.num_programs()],
            gamma_logit: 0.0,
            encoder_weight: Matrix::zeros(state.encoder.weight.rows(), state.encoder.weight.cols()),
            encoder_bias: vec![0.0; state.encoder.bias.len()],
            keys: state.keys.keys.iter().map(|k| Matrix::zeros(k.rows(), k.cols())).collect(),
            a: Matrix::zeros(state.a.rows(), state.a.cols()),
        }
    }
}

fn pooled_inputs(inputs: &[Matrix], d_in: usize) -> Result<Matrix> {
    let mut z = Matrix::zeros(inputs.len(), d_in);
    for (b, x) in inputs.iter().enumerate() {
        if x.cols() != d_in {
            return Err(Error::ShapeMismatch {
                op: "forward (sample)",
                left: x.shape(),
                right: (x.rows(), d_in),
            });
        }
        z.row_mut(b).copy_from_slice(&pool_input(x)?);
    }
    Ok(z)
}

/// Runs the adapted layer on a batch of samples.
///
/// Train mode routes the batch, composes `Ŵ` and executes
/// `γ·W_orig + Ŵ`; infer mode uses `W` as is and never touches routing or
/// the anchor.
pub fn forward(state: &ModelState, inputs: &[Matrix], mode: Mode) -> Result<ForwardPass> {
    if inputs.is_empty() {
        return Err(Error::EmptyInput("forward"));
    }
    let pooled = pooled_inputs(inputs, state.d_in())?;
    let (w_exec, routing) = match mode {
        Mode::Train => {
            let routing = route_batch(inputs, &state.encoder, &state.keys)?;
            state.ops.routing_evaluations.fetch_add(1, Ordering::Relaxed);
            let w_hat = compose_all_heads(&routing.batch_alpha, &state.scaling, &state.adapter)?;
            state.ops.compositions.fetch_add(1, Ordering::Relaxed);
            let w_exec = compose_exec(&state.anchor, state.scaling.gamma(), &w_hat)?;
            (w_exec, Some(routing))
        }
        Mode::Infer => (state.adapter.weight().clone(), None),
    };
    let effective = state.w0.add(&matmul(&state.a, &w_exec)?)?;
    let y = matmul_nt(&pooled, &effective)?;
    Ok(ForwardPass {
        y,
        w_exec,
        routing,
        pooled,
        input_checksum: Batch::input_checksum_of(inputs),
        state_version: state.version,
    })
}

impl Batch {
    fn input_checksum_of(inputs: &[Matrix]) -> u64 {
        inputs
            .iter()
            .fold(inputs.len() as u64, |acc, m| acc.rotate_left(7) ^ m.checksum())
    }
}

/// `(1/(2B))·‖y − y*‖²_F`.
pub fn loss_mse(y: &Matrix, y_star: &Matrix) -> Result<f64> {
    if y.shape() != y_star.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss_mse",
            left: y.shape(),
            right: y_star.shape(),
        });
    }
    if y.rows() == 0 {
        return Err(Error::EmptyInput("loss_mse"));
    }
    let ss: f64 = y
        .as_slice()
        .iter()
        .zip(y_star.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(ss / (2.0 * y.rows() as f64))
}

/// `∂L/∂W_exec` for the loss above, i.e. `Aᵀ·((y − y*)/B)ᵀ·z`.
pub fn exec_gradient(state: &ModelState, pass: &ForwardPass, y_star: &Matrix) -> Result<Matrix> {
    let (_, d_m) = output_gradients(state, pass, y_star)?;
    matmul_tn(&state.a, &d_m)
}

fn output_gradients(state: &ModelState, pass: &ForwardPass, y_star: &Matrix) -> Result<(Matrix, Matrix)> {
    if pass.y.shape() != y_star.shape() {
        return Err(Error::ShapeMismatch {
            op: "backward (targets)",
            left: pass.y.shape(),
            right: y_star.shape(),
        });
    }
    let inv_b = 1.0 / pass.y.rows() as f64;
    let d_y = pass.y.sub(y_star)?.scale(inv_b);
    // dL/d(W0 + A·W_exec), D_out × D_in
    let d_m = matmul_tn(&d_y, &pass.pooled)?;
    debug_assert_eq!(d_m.shape(), state.w0.shape());
    Ok((d_y, d_m))
}

/// Hand-derived gradients for every trainable leaf.
///
/// With routing present (train mode) the adapter gradient flows only
/// through the composed programs: slot `n` receives
/// `σ(s_n)·Σ_h ᾱ_{h,n}·[∂L/∂W_exec]_h`. Without routing (infer-mode pass,
/// used by the sequential baseline) `W` is the executing adapter and gets
/// `∂L/∂W_exec` directly. `W0` and the anchor never receive gradient.
pub fn backward(state: &ModelState, batch: &Batch, pass: &ForwardPass) -> Result<Gradients> {
    if pass.input_checksum != batch.input_checksum() || pass.y.rows() != batch.len() {
        return Err(Error::Contract("forward pass was computed on a different batch".into()));
    }
    if pass.state_version != state.version {
        return Err(Error::Contract("parameters changed since the forward pass".into()));
    }
    let (_, d_m) = output_gradients(state, pass, &batch.targets)?;
    let mut grads = Gradients::zeros_like(state);
    grads.a = matmul_nt(&d_m, &pass.w_exec)?;
    let g_exec = matmul_tn(&state.a, &d_m)?;

    let Some(routing) = &pass.routing else {
        grads.w = g_exec;
        return Ok(grads);
    };

    let n = state.num_programs();
    let r = state.adapter.slot_rows();
    let batch_size = batch.len();
    let gamma = state.scaling.gamma();
    grads.gamma_logit = frobenius_inner(&g_exec, state.anchor.w_orig())? * gamma * (1.0 - gamma);

    let gates = state.scaling.gates();
    let slots = state.adapter.partition();
    let head_blocks: Vec<Matrix> = (0..n).map(|h| g_exec.row_block(h * r, r).to_matrix()).collect();

    // contraction[h][n] = ⟨[∂L/∂W_exec]_h, W⁽ⁿ⁾⟩
    let contraction: Vec<Vec<f64>> = head_blocks
        .iter()
        .map(|g_h| {
            slots
                .iter()
                .map(|slot| crate::numerics::dot(g_h.as_slice(), slot.as_slice()))
                .collect()
        })
        .collect();

    for (slot_idx, slot_grad) in grads.w.as_mut_slice().chunks_mut(r * state.d_in()).enumerate() {
        for (h, g_h) in head_blocks.iter().enumerate() {
            let coeff = gates[slot_idx] * routing.batch_alpha[h][slot_idx];
            for (o, v) in slot_grad.iter_mut().zip(g_h.as_slice()) {
                *o += coeff * v;
            }
        }
    }

    for slot_idx in 0..n {
        let g = gates[slot_idx];
        let weighted: f64 = (0..n)
            .map(|h| routing.batch_alpha[h][slot_idx] * contraction[h][slot_idx])
            .sum();
        grads.s[slot_idx] = g * (1.0 - g) * weighted;
    }

    // dL/dᾱ_{h,n} = σ(s_n)·contraction[h][n]; each sample's α enters ᾱ with 1/B.
    let d_alpha_bar: Vec<Vec<f64>> = contraction
        .iter()
        .map(|row| row.iter().zip(&gates).map(|(c, g)| c * g).collect())
        .collect();
    let key_dim = state.encoder.key_dim();
    let inv_b = 1.0 / batch_size as f64;
    for b in 0..batch_size {
        let z = pass.pooled.row(b);
        let q = encode(z, &state.encoder)?;
        let mut d_q = vec![0.0; n * key_dim];
        for h in 0..n {
            let alpha = &routing.per_sample_alpha[h][b];
            let upstream: Vec<f64> = d_alpha_bar[h].iter().map(|v| v * inv_b).collect();
            let mean_up: f64 = alpha.iter().zip(&upstream).map(|(a, u)| a * u).sum();
            let keys_h = &state.keys.keys[h];
            let q_h = q.row(h);
            let d_q_h = &mut d_q[h * key_dim..(h + 1) * key_dim];
            let d_keys_h = grads.keys[h].as_mut_slice();
            for slot_idx in 0..n {
                let d_logit = alpha[slot_idx] * (upstream[slot_idx] - mean_up);
                if d_logit == 0.0 {
                    continue;
                }
                for (dq, k) in d_q_h.iter_mut().zip(keys_h.row(slot_idx)) {
                    *dq += d_logit * k;
                }
                let d_key_row = &mut d_keys_h[slot_idx * key_dim..(slot_idx + 1) * key_dim];
                for (dk, qv) in d_key_row.iter_mut().zip(q_h) {
                    *dk += d_logit * qv;
                }
            }
        }
        for (i, dq) in d_q.iter().enumerate() {
            grads.encoder_bias[i] += dq;
            for (dw, zv) in grads.encoder_weight.row_mut(i).iter_mut().zip(z) {
                *dw += dq * zv;
            }
        }
    }
    Ok(grads)
}

/// Plain gradient descent on every trainable leaf. Frozen tensors are not
/// touched.
pub fn sgd_step(state: &mut ModelState, grads: &Gradients, lr: f64) -> Result<()> {
    for leaf in Leaf::all(state.num_programs()) {
        let g = grads.leaf(leaf);
        let params = state.leaf_mut(leaf);
        if params.len() != g.len() {
            return Err(Error::LengthMismatch {
                op: "sgd_step",
                expected: params.len(),
                actual: g.len(),
            });
        }
        for (p, gv) in params.iter_mut().zip(g) {
            *p -= lr * gv;
        }
    }
    Ok(())
}
