//! Hybrid-model training: one-step-ahead RK4 prediction loss with exact
//! reverse-mode gradients through the integrator stages, minimized with Adam.
//!
//! The gradient is the discrete adjoint of one RK4 step. Writing the stages as
//! k1 = f(x), k2 = f(x + h/2·k1), k3 = f(x + h/2·k2), k4 = f(x + h·k3) and the
//! update x⁺ = x + h/6·(k1 + 2k2 + 2k3 + k4), the loss sensitivities to the
//! stage values are
//!
//!   μ4 = h/6·λ,   μ3 = h/3·λ + h·g4,   μ2 = h/3·λ + h/2·g3,   μ1 = h/6·λ + h/2·g2,
//!
//! where λ = ∂L/∂x⁺ and g_i = (∂f/∂x)ᵀμ_i is the stage vector-Jacobian product.
//! The nominal part of g_i uses the analytic Jacobian; the network part is one
//! reverse pass, which also accumulates the parameter gradients.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    nominal_derivative, nominal_jacobian, rk4_step, state_error, ControlInput, QuadState,
    StateVec, Trajectory,
};
use crate::error::{Error, Result};
use crate::models::{
    mlp_backward, mlp_forward_cached, HybridModel, InputScaler, Mlp, MlpCache, MlpGrads,
    ResidualMask,
};

/// One-step training sample: observed state/input and the next observed state.
#[derive(Debug, Clone)]
pub struct Segment {
    pub x: QuadState,
    pub u: ControlInput,
    pub x_next: QuadState,
    pub dt: f64,
}

/// Flattened one-step segments pooled across trajectories.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub segments: Vec<Segment>,
}

impl Dataset {
    /// Extract consecutive-sample segments, thinned by `stride` (the step size
    /// itself stays at the trajectory's sampling interval).
    pub fn from_trajectories(trajectories: &[Trajectory], stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Invalid("stride must be at least 1".into()));
        }
        let mut segments = Vec::new();
        for traj in trajectories {
            traj.validate()?;
            let dt = traj.dt();
            if !(dt > 0.0) {
                return Err(Error::Invalid("trajectory too short for segments".into()));
            }
            let mut i = 0;
            while i + 1 < traj.len() {
                segments.push(Segment {
                    x: traj.states[i].clone(),
                    u: traj.inputs[i].clone(),
                    x_next: traj.states[i + 1].clone(),
                    dt,
                });
                i += stride;
            }
        }
        if segments.is_empty() {
            return Err(Error::Invalid("no segments in training data".into()));
        }
        Ok(Dataset { segments })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Raw (unscaled) network inputs of every segment, for scaler fitting.
    pub fn raw_inputs(&self) -> Vec<DVector<f64>> {
        self.segments
            .iter()
            .map(|s| HybridModel::raw_input(&s.x, &s.u))
            .collect()
    }
}

fn default_epochs() -> usize {
    1500
}
fn default_lr_decay() -> f64 {
    0.9977
}
fn default_learning_rate() -> f64 {
    3e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.1
}
fn default_batch() -> usize {
    1024
}
fn default_stride() -> usize {
    2
}
fn default_val_every() -> usize {
    10
}
fn default_hidden() -> Vec<usize> {
    vec![64, 16]
}
fn default_loss_weights() -> [f64; 12] {
    [1.0; 12]
}
fn default_mask() -> ResidualMask {
    [true; 12]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Per-epoch multiplicative learning-rate decay (1 = constant).
    pub lr_decay: f64,
    /// Decoupled weight decay applied before each optimizer update (0 = off).
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Segments per gradient step; 0 = full batch.
    pub batch: usize,
    pub seed: u64,
    /// Keep every `stride`-th one-step segment when building datasets.
    pub stride: usize,
    /// Evaluate validation loss every this many epochs.
    pub val_every: usize,
    /// Hidden-layer widths of the residual network.
    pub hidden: Vec<usize>,
    pub loss_weights: [f64; 12],
    /// Which derivative entries receive the learned residual.
    pub residual_mask: ResidualMask,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            learning_rate: default_learning_rate(),
            lr_decay: default_lr_decay(),
            weight_decay: default_weight_decay(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            batch: default_batch(),
            seed: 0,
            stride: default_stride(),
            val_every: default_val_every(),
            hidden: default_hidden(),
            loss_weights: default_loss_weights(),
            residual_mask: default_mask(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr_decay must be in (0, 1]".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        if self.val_every == 0 {
            return Err(Error::Config("val_every must be at least 1".into()));
        }
        if self.loss_weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Config("loss_weights must be positive".into()));
        }
        Ok(())
    }

    /// Full layer-size list for the residual network.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(16);
        sizes.extend_from_slice(&self.hidden);
        sizes.push(12);
        sizes
    }
}

/// Validation loss sampled during training.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ValPoint {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Training loss per epoch (the loss evaluated by the gradient pass).
    pub train_loss: Vec<f64>,
    pub val_trace: Vec<ValPoint>,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    /// Wall-clock time; excluded from serialized reports so artifacts are
    /// bitwise reproducible.
    #[serde(skip_serializing, default)]
    pub wall_seconds: f64,
}

/// One-step-ahead prediction: one fixed-step RK4 step of the hybrid model.
pub fn one_step_predict(
    model: &HybridModel,
    x: &QuadState,
    u: &ControlInput,
    dt: f64,
) -> Result<QuadState> {
    if !(dt > 0.0) {
        return Err(Error::Invalid(format!("prediction step dt = {dt}")));
    }
    rk4_step(model, x, u, dt)
}

fn segment_loss(model: &HybridModel, seg: &Segment, weights: &[f64; 12]) -> Result<f64> {
    let pred = one_step_predict(model, &seg.x, &seg.u, seg.dt)?;
    let diff = state_error(&pred.as_vec(), &seg.x_next.as_vec());
    let mut l = 0.0;
    for d in 0..12 {
        l += weights[d] * diff[d] * diff[d];
    }
    Ok(l / 12.0)
}

const CHUNK: usize = 256;

/// Mean weighted squared one-step prediction error over all segments
/// (per-dimension mean, Euler differences wrapped).
pub fn knode_loss(model: &HybridModel, data: &Dataset, weights: &[f64; 12]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    // fixed chunking plus an ordered sequential fold keeps the reduction
    // deterministic regardless of thread scheduling
    let partials: Result<Vec<f64>> = data
        .segments
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = 0.0;
            for seg in chunk {
                acc += segment_loss(model, seg, weights)?;
            }
            Ok(acc)
        })
        .collect();
    let total: f64 = partials?.iter().sum();
    Ok(total / data.len() as f64)
}

/// Hybrid derivative at a stage point, keeping what the reverse pass needs.
struct StageEval {
    state: QuadState,
    k: StateVec,
    cache: MlpCache,
}

fn stage_eval(model: &HybridModel, z: &StateVec, u: &ControlInput) -> Result<StageEval> {
    let state = QuadState::from_vec(z);
    let mut k = nominal_derivative(&state, u, &model.params)?;
    let zin = model.scaler.transform(&HybridModel::raw_input(&state, u));
    let (out, cache) = mlp_forward_cached(&model.net, &zin)?;
    for d in 0..12 {
        if model.mask[d] {
            k[d] += out[d];
        }
    }
    Ok(StageEval { state, k, cache })
}

/// Vector-Jacobian product of the hybrid derivative at a stage: analytic
/// nominal Jacobian transposed times `mu`, plus the network's input gradient
/// routed back through masking and input standardization. Accumulates the
/// network parameter gradients as a side effect.
fn stage_vjp(
    model: &HybridModel,
    stage: &StageEval,
    u: &ControlInput,
    mu: &StateVec,
    grads: &mut MlpGrads,
) -> Result<StateVec> {
    let (a_nom, _) = nominal_jacobian(&stage.state, u, &model.params)?;
    let mut upstream = DVector::zeros(12);
    for d in 0..12 {
        if model.mask[d] {
            upstream[d] = mu[d];
        }
    }
    let input_grad = mlp_backward(&model.net, &stage.cache, &upstream, grads)?;
    let mut g = a_nom.transpose() * mu;
    for j in 0..12 {
        g[j] += input_grad[j] / model.scaler.std[j];
    }
    Ok(g)
}

fn segment_loss_and_grads(
    model: &HybridModel,
    seg: &Segment,
    weights: &[f64; 12],
    grads: &mut MlpGrads,
) -> Result<f64> {
    let h = seg.dt;
    let x0 = seg.x.as_vec();

    let s1 = stage_eval(model, &x0, &seg.u)?;
    let s2 = stage_eval(model, &(x0 + (h / 2.0) * s1.k), &seg.u)?;
    let s3 = stage_eval(model, &(x0 + (h / 2.0) * s2.k), &seg.u)?;
    let s4 = stage_eval(model, &(x0 + h * s3.k), &seg.u)?;
    let x_pred = x0 + (h / 6.0) * (s1.k + 2.0 * s2.k + 2.0 * s3.k + s4.k);

    let diff = state_error(&x_pred, &seg.x_next.as_vec());
    let mut loss = 0.0;
    let mut lambda = StateVec::zeros();
    for d in 0..12 {
        loss += weights[d] * diff[d] * diff[d];
        lambda[d] = 2.0 * weights[d] * diff[d] / 12.0;
    }
    loss /= 12.0;

    let mu4 = (h / 6.0) * lambda;
    let g4 = stage_vjp(model, &s4, &seg.u, &mu4, grads)?;
    let mu3 = (h / 3.0) * lambda + h * g4;
    let g3 = stage_vjp(model, &s3, &seg.u, &mu3, grads)?;
    let mu2 = (h / 3.0) * lambda + (h / 2.0) * g3;
    let g2 = stage_vjp(model, &s2, &seg.u, &mu2, grads)?;
    let mu1 = (h / 6.0) * lambda + (h / 2.0) * g2;
    stage_vjp(model, &s1, &seg.u, &mu1, grads)?;

    Ok(loss)
}

/// Loss and exact parameter gradients over the dataset (same reduction as
/// [`knode_loss`]).
pub fn knode_loss_gradients(
    model: &HybridModel,
    data: &Dataset,
    weights: &[f64; 12],
) -> Result<(f64, MlpGrads)> {
    if data.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    let partials: Result<Vec<(f64, MlpGrads)>> = data
        .segments
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = MlpGrads::zeros_like(&model.net);
            let mut acc = 0.0;
            for seg in chunk {
                acc += segment_loss_and_grads(model, seg, weights, &mut grads)?;
            }
            Ok((acc, grads))
        })
        .collect();
    let mut total = 0.0;
    let mut grads_sum = MlpGrads::zeros_like(&model.net);
    for (l, g) in partials? {
        total += l;
        grads_sum.add_assign(&g);
    }
    let scale = 1.0 / data.len() as f64;
    grads_sum.scale(scale);
    if grads_sum.flat().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training gradient".into()));
    }
    Ok((total * scale, grads_sum))
}

/// Build the initial hybrid model for a training run: scaler fitted on the
/// training inputs, network randomly initialized (zero output layer, so the
/// starting point is exactly the nominal model).
pub fn init_hybrid(
    params: &crate::dynamics::QuadParams,
    train: &Dataset,
    cfg: &TrainConfig,
) -> Result<HybridModel> {
    cfg.validate()?;
    let scaler = InputScaler::fit(&train.raw_inputs())?;
    let net = Mlp::random(&cfg.layer_sizes(), cfg.seed)?;
    HybridModel::new(params.clone(), net, scaler, cfg.residual_mask)
}

struct Adam {
    m: DVector<f64>,
    v: DVector<f64>,
    t: usize,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: DVector::zeros(n),
            v: DVector::zeros(n),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut DVector<f64>, grad: &DVector<f64>, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let shrink = 1.0 - lr * cfg.weight_decay;
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] = shrink * params[i] - lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// Train the residual network with Adam, snapshotting the parameters with the
/// best validation loss (the untrained parameters count as epoch 0).
pub fn train_knode(
    init: HybridModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<(HybridModel, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid("training and validation data required".into()));
    }
    let start = std::time::Instant::now();
    let mut model = init;
    let weights = cfg.loss_weights;

    let initial_val_loss = knode_loss(&model, val, &weights)?;
    let mut best_params = model.net.flat_params();
    let mut best_val_loss = initial_val_loss;
    let mut best_epoch = 0usize;
    let mut val_trace = vec![ValPoint {
        epoch: 0,
        loss: initial_val_loss,
    }];
    let mut train_loss = Vec::with_capacity(cfg.epochs);

    let mut params = model.net.flat_params();
    let mut adam = Adam::new(params.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = {
        use rand::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed)
    };

    for epoch in 1..=cfg.epochs {
        let lr = cfg.learning_rate * cfg.lr_decay.powi(epoch as i32 - 1);
        let epoch_loss = if cfg.batch == 0 || cfg.batch >= train.len() {
            let (loss, grads) = knode_loss_gradients(&model, train, &weights)?;
            adam.step(&mut params, &grads.flat(), lr, cfg);
            model.net.set_flat_params(&params)?;
            loss
        } else {
            // deterministic in-place shuffle, then one Adam step per batch
            use rand::Rng;
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let mut sum = 0.0;
            for batch_idx in order.chunks(cfg.batch) {
                let batch = Dataset {
                    segments: batch_idx.iter().map(|i| train.segments[*i].clone()).collect(),
                };
                let (loss, grads) = knode_loss_gradients(&model, &batch, &weights)?;
                adam.step(&mut params, &grads.flat(), lr, cfg);
                model.net.set_flat_params(&params)?;
                sum += loss * batch.len() as f64;
            }
            sum / train.len() as f64
        };
        if !epoch_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at epoch {epoch} (learning rate too high?)"
            )));
        }
        train_loss.push(epoch_loss);

        if epoch % cfg.val_every == 0 || epoch == cfg.epochs {
            let vl = knode_loss(&model, val, &weights)?;
            val_trace.push(ValPoint { epoch, loss: vl });
            if vl < best_val_loss {
                best_val_loss = vl;
                best_epoch = epoch;
                best_params = params.clone();
            }
        }
    }

    model.net.set_flat_params(&best_params)?;
    let final_val_loss = val_trace.last().map(|p| p.loss).unwrap_or(initial_val_loss);
    let report = TrainReport {
        train_loss,
        val_trace,
        initial_val_loss,
        final_val_loss,
        best_val_loss,
        best_epoch,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}
