//! Receding-horizon tracking control: single-shooting Gauss-Newton SQP over an
//! RK4-discretized model, solved by a Riccati backward pass with input
//! clamping and an Armijo line search, plus the closed-loop simulation loop.
//!
//! Each SQP iteration linearizes the rollout once and reuses those Jacobians
//! twice: a costate sweep gives the exact reduced gradient of the true cost
//! (hence a projected-gradient stationarity residual), and the Riccati
//! recursion gives the Gauss-Newton step with time-varying feedback gains.

use nalgebra::SMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    rk4_step, rk4_step_jacobian, state_error, ControlInput, DynamicsModel, InputJac, InputVec,
    QuadState, SimOptions, StateJac, StateVec, Trajectory,
};
use crate::error::{Error, Result};

fn default_horizon() -> usize {
    20
}
fn default_dt() -> f64 {
    0.02
}
fn default_q() -> [f64; 12] {
    let mut q = [0.0; 12];
    for d in 0..3 {
        q[d] = 100.0; // position
        q[3 + d] = 10.0; // velocity
        q[6 + d] = 10.0; // attitude
        q[9 + d] = 1.0; // body rates
    }
    q
}
fn default_r() -> [f64; 4] {
    [0.1, 1.0, 1.0, 1.0]
}
fn default_u_min() -> [f64; 4] {
    [0.0, -0.1, -0.1, -0.1]
}
fn default_u_max() -> [f64; 4] {
    // thrust cap = 2·m·g for the default quad
    [9.81, 0.1, 0.1, 0.1]
}
fn default_u_ref() -> [f64; 4] {
    [0.5 * 9.81, 0.0, 0.0, 0.0]
}
fn default_sqp_iters() -> usize {
    10
}
fn default_kkt_tol() -> f64 {
    1e-6
}
fn default_rho() -> f64 {
    1e3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    /// Horizon length in control steps.
    pub horizon: usize,
    /// Control discretization step, s.
    pub dt: f64,
    /// Diagonal stage state weights.
    pub q_diag: [f64; 12],
    /// Diagonal input weights.
    pub r_diag: [f64; 4],
    /// Diagonal terminal state weights.
    pub p_diag: [f64; 12],
    pub u_min: [f64; 4],
    pub u_max: [f64; 4],
    /// Input operating point penalized by the R term (hover thrust, zero moments).
    pub u_ref: [f64; 4],
    /// Optional soft state box, penalized quadratically with weight `rho`.
    pub x_min: Option<[f64; 12]>,
    pub x_max: Option<[f64; 12]>,
    pub rho: f64,
    pub sqp_iters: usize,
    pub kkt_tol: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: default_horizon(),
            dt: default_dt(),
            q_diag: default_q(),
            r_diag: default_r(),
            p_diag: default_p(),
            u_min: default_u_min(),
            u_max: default_u_max(),
            u_ref: default_u_ref(),
            x_min: None,
            x_max: None,
            rho: default_rho(),
            sqp_iters: default_sqp_iters(),
            kkt_tol: default_kkt_tol(),
        }
    }
}

fn default_p() -> [f64; 12] {
    default_q()
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("mpc horizon must be at least 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config("mpc dt must be positive".into()));
        }
        if self.q_diag.iter().chain(&self.p_diag).any(|v| *v < 0.0) {
            return Err(Error::Config("state weights must be nonnegative".into()));
        }
        if self.r_diag.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("input weights must be positive".into()));
        }
        for k in 0..4 {
            if self.u_min[k] > self.u_max[k] {
                return Err(Error::Config(format!(
                    "u_min[{k}] exceeds u_max[{k}]"
                )));
            }
        }
        if let (Some(lo), Some(hi)) = (&self.x_min, &self.x_max) {
            if lo.iter().zip(hi).any(|(a, b)| a > b) {
                return Err(Error::Config("x_min exceeds x_max".into()));
            }
        }
        if !(self.rho >= 0.0) {
            return Err(Error::Config("rho must be nonnegative".into()));
        }
        if self.sqp_iters == 0 {
            return Err(Error::Config("sqp_iters must be at least 1".into()));
        }
        if !(self.kkt_tol > 0.0) {
            return Err(Error::Config("kkt_tol must be positive".into()));
        }
        Ok(())
    }

    fn clamp(&self, u: &InputVec) -> InputVec {
        let mut out = *u;
        for k in 0..4 {
            out[k] = out[k].clamp(self.u_min[k], self.u_max[k]);
        }
        out
    }
}

/// Time-indexed desired states on the control grid. Only position, velocity
/// and yaw are typically nonzero; the attitude/rate entries are targets like
/// any other and default to zero.
#[derive(Debug, Clone)]
pub struct Reference {
    pub dt: f64,
    pub states: Vec<StateVec>,
}

impl Reference {
    pub fn constant(state: StateVec, dt: f64, len: usize) -> Self {
        Reference {
            dt,
            states: vec![state; len],
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// `n` consecutive states starting at `start`.
    pub fn window(&self, start: usize, n: usize) -> Result<&[StateVec]> {
        if start + n > self.states.len() {
            return Err(Error::Invalid(format!(
                "reference too short: need {} states from {start}, have {}",
                n,
                self.states.len()
            )));
        }
        Ok(&self.states[start..start + n])
    }
}

#[derive(Debug, Clone)]
pub struct MpcSolution {
    pub u_seq: Vec<InputVec>,
    pub x_seq: Vec<StateVec>,
    pub cost: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// False when the iteration limit was hit before reaching kkt_tol.
    pub converged: bool,
}

/// Per-control-step solver record for the closed-loop log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MpcStepLog {
    pub t: f64,
    pub cost: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub converged: bool,
    /// Wall-clock time; excluded from serialized logs so artifacts are
    /// bitwise reproducible.
    #[serde(skip_serializing, default)]
    pub solve_seconds: f64,
}

/// Soft state-box penalty: value, gradient and Gauss-Newton diagonal Hessian.
fn box_penalty(cfg: &MpcConfig, x: &StateVec) -> (f64, StateVec, StateVec) {
    let mut val = 0.0;
    let mut grad = StateVec::zeros();
    let mut hess = StateVec::zeros();
    if cfg.x_min.is_none() && cfg.x_max.is_none() {
        return (val, grad, hess);
    }
    for d in 0..12 {
        let mut viol = 0.0;
        if let Some(hi) = &cfg.x_max {
            if x[d] > hi[d] {
                viol = x[d] - hi[d];
            }
        }
        if let Some(lo) = &cfg.x_min {
            if x[d] < lo[d] {
                viol = x[d] - lo[d];
            }
        }
        if viol != 0.0 {
            val += cfg.rho * viol * viol;
            grad[d] = 2.0 * cfg.rho * viol;
            hess[d] = 2.0 * cfg.rho;
        }
    }
    (val, grad, hess)
}

fn rollout<M: DynamicsModel + ?Sized>(
    model: &M,
    x0: &StateVec,
    u_seq: &[InputVec],
    dt: f64,
) -> Result<Vec<StateVec>> {
    let mut xs = Vec::with_capacity(u_seq.len() + 1);
    xs.push(*x0);
    let mut x = QuadState::from_vec(x0);
    for u in u_seq {
        x = rk4_step(model, &x, &ControlInput::from_vec(u), dt)?;
        let xv = x.as_vec();
        if xv.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mpc rollout state".into()));
        }
        xs.push(xv);
    }
    Ok(xs)
}

fn true_cost(cfg: &MpcConfig, x_seq: &[StateVec], u_seq: &[InputVec], refs: &[StateVec]) -> f64 {
    let n = u_seq.len();
    let mut j = 0.0;
    for i in 0..n {
        let e = state_error(&x_seq[i], &refs[i]);
        for d in 0..12 {
            j += cfg.q_diag[d] * e[d] * e[d];
        }
        let r = u_seq[i] - InputVec::from(cfg.u_ref);
        for k in 0..4 {
            j += cfg.r_diag[k] * r[k] * r[k];
        }
        j += box_penalty(cfg, &x_seq[i]).0;
    }
    let e = state_error(&x_seq[n], &refs[n]);
    for d in 0..12 {
        j += cfg.p_diag[d] * e[d] * e[d];
    }
    j + box_penalty(cfg, &x_seq[n]).0
}

struct Linearization {
    a: Vec<StateJac>,
    b: Vec<InputJac>,
}

fn linearize<M: DynamicsModel + ?Sized>(
    model: &M,
    x_seq: &[StateVec],
    u_seq: &[InputVec],
    dt: f64,
) -> Result<Linearization> {
    let n = u_seq.len();
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for i in 0..n {
        let (ai, bi) = rk4_step_jacobian(
            model,
            &QuadState::from_vec(&x_seq[i]),
            &ControlInput::from_vec(&u_seq[i]),
            dt,
        )?;
        a.push(ai);
        b.push(bi);
    }
    Ok(Linearization { a, b })
}

/// Exact gradient of the true cost with respect to each input, via the costate
/// sweep over the linearized rollout, reported as the projected-gradient
/// stationarity residual max_i ‖u_i − clamp(u_i − ∇_{u_i}J)‖∞.
fn kkt_residual(
    cfg: &MpcConfig,
    lin: &Linearization,
    x_seq: &[StateVec],
    u_seq: &[InputVec],
    refs: &[StateVec],
) -> f64 {
    let n = u_seq.len();
    let e_n = state_error(&x_seq[n], &refs[n]);
    let (_, pen_grad, _) = box_penalty(cfg, &x_seq[n]);
    let mut lambda = StateVec::zeros();
    for d in 0..12 {
        lambda[d] = 2.0 * cfg.p_diag[d] * e_n[d] + pen_grad[d];
    }
    let mut worst = 0.0f64;
    for i in (0..n).rev() {
        let r = u_seq[i] - InputVec::from(cfg.u_ref);
        let mut g = lin.b[i].transpose() * lambda;
        for k in 0..4 {
            g[k] += 2.0 * cfg.r_diag[k] * r[k];
        }
        let projected = cfg.clamp(&(u_seq[i] - g));
        worst = worst.max((u_seq[i] - projected).amax());
        // costate for the preceding stage
        let e = state_error(&x_seq[i], &refs[i]);
        let (_, pen_grad, _) = box_penalty(cfg, &x_seq[i]);
        let mut stage = StateVec::zeros();
        for d in 0..12 {
            stage[d] = 2.0 * cfg.q_diag[d] * e[d] + pen_grad[d];
        }
        lambda = stage + lin.a[i].transpose() * lambda;
    }
    worst
}

struct RiccatiPass {
    k_ff: Vec<InputVec>,
    k_fb: Vec<SMatrix<f64, 4, 12>>,
    /// First-order expected cost change along the step (≤ 0).
    dj_lin: f64,
}

fn riccati_backward(
    cfg: &MpcConfig,
    lin: &Linearization,
    x_seq: &[StateVec],
    u_seq: &[InputVec],
    refs: &[StateVec],
) -> Result<RiccatiPass> {
    let n = u_seq.len();
    let e_n = state_error(&x_seq[n], &refs[n]);
    let (_, pen_grad, pen_hess) = box_penalty(cfg, &x_seq[n]);
    let mut v_mat = StateJac::zeros();
    let mut v_vec = StateVec::zeros();
    for d in 0..12 {
        v_mat[(d, d)] = 2.0 * cfg.p_diag[d] + pen_hess[d];
        v_vec[d] = 2.0 * cfg.p_diag[d] * e_n[d] + pen_grad[d];
    }

    let mut k_ff = vec![InputVec::zeros(); n];
    let mut k_fb = vec![SMatrix::<f64, 4, 12>::zeros(); n];
    let mut dj_lin = 0.0;

    for i in (0..n).rev() {
        let a = &lin.a[i];
        let b = &lin.b[i];
        let e = state_error(&x_seq[i], &refs[i]);
        let r = u_seq[i] - InputVec::from(cfg.u_ref);
        let (_, pen_grad, pen_hess) = box_penalty(cfg, &x_seq[i]);

        let mut qx = a.transpose() * v_vec;
        let mut qxx = a.transpose() * v_mat * a;
        for d in 0..12 {
            qx[d] += 2.0 * cfg.q_diag[d] * e[d] + pen_grad[d];
            qxx[(d, d)] += 2.0 * cfg.q_diag[d] + pen_hess[d];
        }
        let mut qu = b.transpose() * v_vec;
        let mut quu = b.transpose() * v_mat * b;
        for k in 0..4 {
            qu[k] += 2.0 * cfg.r_diag[k] * r[k];
            quu[(k, k)] += 2.0 * cfg.r_diag[k];
        }
        let qux = b.transpose() * v_mat * a;

        let chol = quu.cholesky().ok_or_else(|| {
            Error::Factorization("mpc input Hessian not positive definite".into())
        })?;
        let kff = -chol.solve(&qu);
        let kfb = -chol.solve(&qux);

        dj_lin += qu.dot(&kff);
        // value-function update: V = Qxx − Quxᵀ Quu⁻¹ Qux, v = Qx − Quxᵀ Quu⁻¹ Qu
        v_mat = qxx + qux.transpose() * kfb;
        v_vec = qx + qux.transpose() * kff;
        // keep the Riccati matrix symmetric against drift
        v_mat = 0.5 * (v_mat + v_mat.transpose());

        k_ff[i] = kff;
        k_fb[i] = kfb;
    }
    Ok(RiccatiPass { k_ff, k_fb, dj_lin })
}

/// Solve the tracking problem from `x0` against the first `horizon + 1`
/// reference states. `warm_start` (the previous control step's solution) is
/// shifted by one step.
pub fn mpc_solve<M: DynamicsModel + ?Sized>(
    model: &M,
    x0: &QuadState,
    reference: &Reference,
    cfg: &MpcConfig,
    warm_start: Option<&MpcSolution>,
) -> Result<MpcSolution> {
    cfg.validate()?;
    if !x0.is_finite() {
        return Err(Error::NonFinite("mpc initial state".into()));
    }
    let n = cfg.horizon;
    let refs = reference.window(0, n + 1)?;
    let x0v = x0.as_vec();

    let u_hover = cfg.clamp(&InputVec::from(cfg.u_ref));
    let mut u_seq: Vec<InputVec> = match warm_start {
        Some(prev) if prev.u_seq.len() == n => {
            let mut shifted: Vec<InputVec> = prev.u_seq[1..].to_vec();
            shifted.push(*prev.u_seq.last().unwrap());
            shifted.iter().map(|u| cfg.clamp(u)).collect()
        }
        _ => vec![u_hover; n],
    };
    let mut x_seq = rollout(model, &x0v, &u_seq, cfg.dt)?;
    let mut cost = true_cost(cfg, &x_seq, &u_seq, refs);
    let mut kkt = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;

    for _ in 0..cfg.sqp_iters {
        let lin = linearize(model, &x_seq, &u_seq, cfg.dt)?;
        kkt = kkt_residual(cfg, &lin, &x_seq, &u_seq, refs);
        if kkt < cfg.kkt_tol {
            converged = true;
            break;
        }
        let pass = riccati_backward(cfg, &lin, &x_seq, &u_seq, refs)?;

        // Armijo backtracking on the true cost
        let mut accepted = false;
        let mut alpha = 1.0;
        for _ in 0..12 {
            let mut u_new = Vec::with_capacity(n);
            let mut x_new = Vec::with_capacity(n + 1);
            x_new.push(x0v);
            let mut ok = true;
            for i in 0..n {
                let dx = state_error(&x_new[i], &x_seq[i]);
                let u = cfg.clamp(&(u_seq[i] + alpha * pass.k_ff[i] + pass.k_fb[i] * dx));
                match rk4_step(
                    model,
                    &QuadState::from_vec(&x_new[i]),
                    &ControlInput::from_vec(&u),
                    cfg.dt,
                ) {
                    Ok(next) => {
                        let xv = next.as_vec();
                        if xv.iter().any(|v| !v.is_finite()) {
                            ok = false;
                        } else {
                            x_new.push(xv);
                            u_new.push(u);
                        }
                    }
                    Err(_) => ok = false,
                }
                if !ok {
                    break;
                }
            }
            if ok {
                let cost_new = true_cost(cfg, &x_new, &u_new, refs);
                if cost_new <= cost + 1e-4 * alpha * pass.dj_lin {
                    u_seq = u_new;
                    x_seq = x_new;
                    cost = cost_new;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            // stationary up to line-search resolution; report the residual as-is
            break;
        }
        iterations += 1;
    }

    if !converged && kkt.is_finite() {
        // the loop may have exited by iteration count right after an accepted
        // step; refresh the residual at the final iterate
        let lin = linearize(model, &x_seq, &u_seq, cfg.dt)?;
        kkt = kkt_residual(cfg, &lin, &x_seq, &u_seq, refs);
        converged = kkt < cfg.kkt_tol;
    }

    Ok(MpcSolution {
        u_seq,
        x_seq,
        cost,
        kkt_residual: kkt,
        iterations,
        converged,
    })
}

/// Closed-loop result: the plant-grid trajectory, the per-step solver log, and
/// the control-grid reference actually used.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub trajectory: Trajectory,
    pub logs: Vec<MpcStepLog>,
}

/// Simulate the receding-horizon loop: at each control step, solve from the
/// measured plant state, hold the first input, and integrate the plant with
/// the adaptive stepper, recording on the fine plant grid.
pub fn closed_loop_simulate<M: DynamicsModel + ?Sized, P: DynamicsModel + ?Sized>(
    controller_model: &M,
    plant: &P,
    reference: &Reference,
    duration: f64,
    cfg: &MpcConfig,
    plant_dt: f64,
    opts: &SimOptions,
) -> Result<ClosedLoop> {
    cfg.validate()?;
    if !(duration > 0.0) {
        return Err(Error::Invalid("closed-loop duration must be positive".into()));
    }
    if (reference.dt - cfg.dt).abs() > 1e-12 {
        return Err(Error::Invalid(format!(
            "reference grid {} differs from control grid {}",
            reference.dt, cfg.dt
        )));
    }
    let substeps = (cfg.dt / plant_dt).round() as usize;
    if substeps == 0 || (cfg.dt - substeps as f64 * plant_dt).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "control step {} is not a multiple of plant step {plant_dt}",
            cfg.dt
        )));
    }
    let steps = (duration / cfg.dt).round() as usize;
    if (duration - steps as f64 * cfg.dt).abs() > 1e-9 || steps == 0 {
        return Err(Error::Invalid(format!(
            "duration {duration} is not a multiple of the control step {}",
            cfg.dt
        )));
    }
    // every solve needs horizon+1 reference states from its start index
    if reference.len() < steps + cfg.horizon + 1 {
        return Err(Error::Invalid(format!(
            "reference has {} states, closed loop needs {}",
            reference.len(),
            steps + cfg.horizon + 1
        )));
    }

    let mut x = reference_start_state(reference);
    let n_rows = steps * substeps + 1;
    let mut times = Vec::with_capacity(n_rows);
    let mut states = Vec::with_capacity(n_rows);
    let mut inputs = Vec::with_capacity(n_rows);
    times.push(0.0);
    states.push(x.clone());
    let mut logs = Vec::with_capacity(steps);
    let mut warm: Option<MpcSolution> = None;

    for s in 0..steps {
        let window = Reference {
            dt: cfg.dt,
            states: reference.states[s..s + cfg.horizon + 1].to_vec(),
        };
        let t0 = std::time::Instant::now();
        let sol = mpc_solve(controller_model, &x, &window, cfg, warm.as_ref())?;
        let solve_seconds = t0.elapsed().as_secs_f64();
        let u0 = ControlInput::from_vec(&sol.u_seq[0]);
        logs.push(MpcStepLog {
            t: s as f64 * cfg.dt,
            cost: sol.cost,
            iterations: sol.iterations,
            kkt_residual: sol.kkt_residual,
            converged: sol.converged,
            solve_seconds,
        });

        for j in 0..substeps {
            let t_a = (s * substeps + j) as f64 * plant_dt;
            let xv = crate::dynamics::rk45_integrate(
                &mut |_t, xv: &StateVec| {
                    plant.derivative(&QuadState::from_vec(xv), &u0)
                },
                &x.as_vec(),
                t_a,
                t_a + plant_dt,
                opts.rtol,
                opts.atol,
            )?;
            if xv.norm() > opts.divergence_bound {
                return Err(Error::Diverged {
                    norm: xv.norm(),
                    bound: opts.divergence_bound,
                });
            }
            x = QuadState::from_vec(&xv);
            times.push(t_a + plant_dt);
            states.push(x.clone());
            inputs.push(u0.clone());
        }
        warm = Some(sol);
    }
    // hold the last applied input on the final row, matching the open-loop
    // simulator's convention
    inputs.push(inputs.last().unwrap().clone());

    let trajectory = Trajectory {
        times,
        states,
        inputs,
    };
    trajectory.validate()?;
    Ok(ClosedLoop { trajectory, logs })
}

/// Initial plant state for a closed-loop run: the first reference state.
fn reference_start_state(reference: &Reference) -> QuadState {
    QuadState::from_vec(&reference.states[0])
}

/// Exact affine dynamics ẋ = A·(x − x_op) + B·(u − u_op), useful as a ground
/// truth for solver tests: under RK4 the rollout is exactly linear, so the
/// tracking problem is a convex QP with a closed-form solution.
#[derive(Debug, Clone)]
pub struct AffineModel {
    pub x_op: StateVec,
    pub u_op: InputVec,
    pub a: StateJac,
    pub b: InputJac,
}

impl DynamicsModel for AffineModel {
    fn derivative(&self, x: &QuadState, u: &ControlInput) -> Result<StateVec> {
        Ok(self.a * (x.as_vec() - self.x_op) + self.b * (u.as_vec() - self.u_op))
    }

    fn jacobian(&self, _x: &QuadState, _u: &ControlInput) -> Result<(StateJac, InputJac)> {
        Ok((self.a, self.b))
    }
}
