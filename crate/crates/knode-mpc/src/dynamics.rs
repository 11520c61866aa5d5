//! First-principles quadrotor dynamics, the synthetic drag plant, and integrators.
//!
//! State layout (12 entries): position r (world), velocity v (world), Euler angles
//! (roll φ, pitch θ, yaw ψ; Z-X-Y sequence, R = Rz(ψ)·Rx(φ)·Ry(θ)), body rates ω.
//! Input layout (4 entries): collective thrust u1 [N] along body z, body moments
//! u2 = (mx, my, mz) [N·m].

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type StateVec = SVector<f64, 12>;
pub type InputVec = SVector<f64, 4>;
pub type StateJac = SMatrix<f64, 12, 12>;
pub type InputJac = SMatrix<f64, 12, 4>;

/// Attitudes closer than this to the Euler-rate singularity are rejected.
pub const GIMBAL_EPS: f64 = 0.02;

/// Rigid-body parameters of the vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadParams {
    /// Mass [kg]
    pub mass: f64,
    /// Diagonal of the inertia tensor [kg·m²]
    pub inertia: [f64; 3],
    /// Rotor arm length [m]
    pub arm_length: f64,
    /// Rotor drag-to-thrust ratio [m] (yaw moment per unit rotor force)
    pub moment_ratio: f64,
    /// Gravitational acceleration [m/s²]
    pub gravity: f64,
}

impl Default for QuadParams {
    fn default() -> Self {
        QuadParams {
            mass: 0.5,
            inertia: [2.3e-3, 2.3e-3, 4.0e-3],
            arm_length: 0.17,
            moment_ratio: 0.016,
            gravity: 9.81,
        }
    }
}

impl QuadParams {
    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity
    }

    pub fn inertia_vec(&self) -> Vector3<f64> {
        Vector3::from(self.inertia)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = self.mass > 0.0
            && self.inertia.iter().all(|j| *j > 0.0)
            && self.arm_length > 0.0
            && self.moment_ratio > 0.0
            && self.gravity > 0.0;
        if !pos {
            return Err(Error::Invalid(
                "quad parameters must all be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Coefficients of the synthetic body-frame drag acting on the true plant.
/// Both terms are mass-normalized (they contribute accelerations directly):
/// a = −R·(diag(linear)·v_b + diag(quadratic)·v_b⊙|v_b|), with v_b = Rᵀ·v.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DragParams {
    /// Linear drag coefficients per body axis [1/s]
    pub linear: [f64; 3],
    /// Quadratic drag coefficients per body axis [1/m]
    pub quadratic: [f64; 3],
}

impl Default for DragParams {
    fn default() -> Self {
        DragParams {
            linear: [0.3, 0.3, 0.15],
            quadratic: [0.1, 0.1, 0.05],
        }
    }
}

/// Full kinematic state of the vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadState {
    /// Position [m] (world frame)
    pub pos: Vector3<f64>,
    /// Velocity [m/s] (world frame)
    pub vel: Vector3<f64>,
    /// Euler angles [rad]: roll, pitch, yaw (Z-X-Y)
    pub euler: Vector3<f64>,
    /// Angular velocity [rad/s] (body frame)
    pub omega: Vector3<f64>,
}

impl QuadState {
    pub fn zero() -> Self {
        QuadState {
            pos: Vector3::zeros(),
            vel: Vector3::zeros(),
            euler: Vector3::zeros(),
            omega: Vector3::zeros(),
        }
    }

    /// Hovering at rest at `pos`.
    pub fn hover_at(pos: Vector3<f64>) -> Self {
        QuadState {
            pos,
            ..QuadState::zero()
        }
    }

    pub fn from_vec(x: &StateVec) -> Self {
        QuadState {
            pos: Vector3::new(x[0], x[1], x[2]),
            vel: Vector3::new(x[3], x[4], x[5]),
            euler: Vector3::new(x[6], x[7], x[8]),
            omega: Vector3::new(x[9], x[10], x[11]),
        }
    }

    pub fn as_vec(&self) -> StateVec {
        let mut x = StateVec::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.pos);
        x.fixed_rows_mut::<3>(3).copy_from(&self.vel);
        x.fixed_rows_mut::<3>(6).copy_from(&self.euler);
        x.fixed_rows_mut::<3>(9).copy_from(&self.omega);
        x
    }

    pub fn is_finite(&self) -> bool {
        self.as_vec().iter().all(|v| v.is_finite())
    }
}

/// Collective thrust plus body moments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlInput {
    /// Collective thrust [N], non-negative for physical inputs
    pub thrust: f64,
    /// Body moments [N·m]
    pub moment: Vector3<f64>,
}

impl ControlInput {
    pub fn hover(params: &QuadParams) -> Self {
        ControlInput {
            thrust: params.hover_thrust(),
            moment: Vector3::zeros(),
        }
    }

    pub fn from_vec(u: &InputVec) -> Self {
        ControlInput {
            thrust: u[0],
            moment: Vector3::new(u[1], u[2], u[3]),
        }
    }

    pub fn as_vec(&self) -> InputVec {
        InputVec::new(self.thrust, self.moment.x, self.moment.y, self.moment.z)
    }

    pub fn is_finite(&self) -> bool {
        self.thrust.is_finite() && self.moment.iter().all(|v| v.is_finite())
    }

    /// Physical-input validation: finite, thrust non-negative.
    pub fn validate(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::Invalid("non-finite control input".into()));
        }
        if self.thrust < 0.0 {
            return Err(Error::Invalid(format!(
                "negative thrust {:.6} rejected",
                self.thrust
            )));
        }
        Ok(())
    }
}

/// Wrap an angle to (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let w = a.rem_euclid(two_pi);
    if w > std::f64::consts::PI {
        w - two_pi
    } else {
        w
    }
}

/// Componentwise `a − b` with the Euler-angle entries wrapped to (−π, π].
pub fn state_error(a: &StateVec, b: &StateVec) -> StateVec {
    let mut e = a - b;
    for d in 6..9 {
        e[d] = wrap_angle(e[d]);
    }
    e
}

/// Body-to-world rotation for Z-X-Y Euler angles: R = Rz(ψ)·Rx(φ)·Ry(θ).
pub fn euler_to_rotation(euler: &Vector3<f64>) -> Matrix3<f64> {
    let (sp, cp) = euler.x.sin_cos(); // roll φ
    let (st, ct) = euler.y.sin_cos(); // pitch θ
    let (sy, cy) = euler.z.sin_cos(); // yaw ψ
    #[rustfmt::skip]
    let r = Matrix3::new(
        cy * ct - sy * sp * st, -sy * cp, cy * st + sy * sp * ct,
        sy * ct + cy * sp * st,  cy * cp, sy * st - cy * sp * ct,
        -cp * st,                sp,      cp * ct,
    );
    r
}

fn check_gimbal(euler: &Vector3<f64>) -> Result<()> {
    let lim = std::f64::consts::FRAC_PI_2 - GIMBAL_EPS;
    // The rate matrix determinant is cos(roll); the spec's precondition bounds
    // pitch. Guard both so neither near-singular direction slips through.
    if euler.x.abs() >= lim || euler.y.abs() >= lim {
        return Err(Error::GimbalLock {
            roll: euler.x,
            pitch: euler.y,
        });
    }
    Ok(())
}

/// Matrix M(φ, θ) mapping Euler-angle rates to body rates: ω = M·(φ̇, θ̇, ψ̇).
pub fn euler_rate_matrix(euler: &Vector3<f64>) -> Result<Matrix3<f64>> {
    check_gimbal(euler)?;
    let (sp, cp) = euler.x.sin_cos();
    let (st, ct) = euler.y.sin_cos();
    #[rustfmt::skip]
    let m = Matrix3::new(
        ct, 0.0, -cp * st,
        0.0, 1.0, sp,
        st, 0.0, cp * ct,
    );
    Ok(m)
}

/// Euler-angle rates from body rates (analytic inverse of [`euler_rate_matrix`]).
pub fn euler_rates(euler: &Vector3<f64>, omega: &Vector3<f64>) -> Result<Vector3<f64>> {
    check_gimbal(euler)?;
    let (sp, cp) = euler.x.sin_cos();
    let (st, ct) = euler.y.sin_cos();
    let (p, q, r) = (omega.x, omega.y, omega.z);
    let w = r * ct - p * st;
    Ok(Vector3::new(
        p * ct + r * st,
        q - sp / cp * w,
        w / cp,
    ))
}

/// First-principles rigid-body derivative (Newton-Euler, no aerodynamic terms).
pub fn nominal_derivative(
    x: &QuadState,
    u: &ControlInput,
    params: &QuadParams,
) -> Result<StateVec> {
    if !x.is_finite() || !u.is_finite() {
        return Err(Error::NonFinite("dynamics input".into()));
    }
    let r = euler_to_rotation(&x.euler);
    let thrust_dir = r.column(2);
    let acc = Vector3::new(0.0, 0.0, -params.gravity) + thrust_dir * (u.thrust / params.mass);
    let eul_dot = euler_rates(&x.euler, &x.omega)?;
    let j = params.inertia_vec();
    let j_omega = j.component_mul(&x.omega);
    let omega_dot = (u.moment - x.omega.cross(&j_omega)).component_div(&j);

    let mut dx = StateVec::zeros();
    dx.fixed_rows_mut::<3>(0).copy_from(&x.vel);
    dx.fixed_rows_mut::<3>(3).copy_from(&acc);
    dx.fixed_rows_mut::<3>(6).copy_from(&eul_dot);
    dx.fixed_rows_mut::<3>(9).copy_from(&omega_dot);
    Ok(dx)
}

/// Analytic Jacobians (∂f/∂x, ∂f/∂u) of [`nominal_derivative`].
///
/// Used by the training adjoint, where the gradient must be exact; the MPC path
/// deliberately uses finite differences instead (see `control`).
pub fn nominal_jacobian(
    x: &QuadState,
    u: &ControlInput,
    params: &QuadParams,
) -> Result<(StateJac, InputJac)> {
    check_gimbal(&x.euler)?;
    let (sp, cp) = x.euler.x.sin_cos();
    let (st, ct) = x.euler.y.sin_cos();
    let (sy, cy) = x.euler.z.sin_cos();
    let (p, r) = (x.omega.x, x.omega.z);

    let mut a = StateJac::zeros();
    // ∂ṙ/∂v
    a.fixed_view_mut::<3, 3>(0, 3).fill_with_identity();

    // ∂v̇/∂euler = (u1/m)·∂(R e_z)/∂(φ, θ, ψ)
    let k = u.thrust / params.mass;
    let dz_dphi = Vector3::new(sy * cp * ct, -cy * cp * ct, -sp * ct);
    let dz_dtheta = Vector3::new(
        cy * ct - sy * sp * st,
        sy * ct + cy * sp * st,
        -cp * st,
    );
    let dz_dpsi = Vector3::new(-sy * st + cy * sp * ct, cy * st + sy * sp * ct, 0.0);
    a.fixed_view_mut::<3, 1>(3, 6).copy_from(&(dz_dphi * k));
    a.fixed_view_mut::<3, 1>(3, 7).copy_from(&(dz_dtheta * k));
    a.fixed_view_mut::<3, 1>(3, 8).copy_from(&(dz_dpsi * k));

    // Euler-rate block. With w = r·cθ − p·sθ:
    //   φ̇ = p·cθ + r·sθ, θ̇ = q − tanφ·w, ψ̇ = w/cφ
    let w = r * ct - p * st;
    let dw_dtheta = -r * st - p * ct;
    let tan_p = sp / cp;
    let sec2_p = 1.0 / (cp * cp);
    // ∂/∂φ, ∂/∂θ (ψ does not appear)
    a[(6, 7)] = -p * st + r * ct;
    a[(7, 6)] = -sec2_p * w;
    a[(7, 7)] = -tan_p * dw_dtheta;
    a[(8, 6)] = w * sp * sec2_p;
    a[(8, 7)] = dw_dtheta / cp;
    // ∂/∂ω
    a[(6, 9)] = ct;
    a[(6, 11)] = st;
    a[(7, 9)] = tan_p * st;
    a[(7, 10)] = 1.0;
    a[(7, 11)] = -tan_p * ct;
    a[(8, 9)] = -st / cp;
    a[(8, 11)] = ct / cp;

    // ∂ω̇/∂ω = −J⁻¹·([ω]ₓ·J − [Jω]ₓ)
    let j = params.inertia_vec();
    let j_omega = j.component_mul(&x.omega);
    let skew = |v: &Vector3<f64>| {
        Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
    };
    let m = skew(&x.omega) * Matrix3::from_diagonal(&j) - skew(&j_omega);
    let j_inv = Vector3::new(1.0 / j.x, 1.0 / j.y, 1.0 / j.z);
    let block = -Matrix3::from_diagonal(&j_inv) * m;
    a.fixed_view_mut::<3, 3>(9, 9).copy_from(&block);

    let mut b = InputJac::zeros();
    let r_ez = euler_to_rotation(&x.euler).column(2) / params.mass;
    b.fixed_view_mut::<3, 1>(3, 0).copy_from(&r_ez);
    b[(9, 1)] = j_inv.x;
    b[(10, 2)] = j_inv.y;
    b[(11, 3)] = j_inv.z;

    Ok((a, b))
}

/// Torque rows of the rotor mixing matrix (3×4): u2 = T·F for per-rotor forces F.
pub fn torque_mixing_matrix(params: &QuadParams) -> SMatrix<f64, 3, 4> {
    let l = params.arm_length;
    let g = params.moment_ratio;
    #[rustfmt::skip]
    let t = SMatrix::<f64, 3, 4>::new(
        0.0, l, 0.0, -l,
        -l, 0.0, l, 0.0,
        g, -g, g, -g,
    );
    t
}

/// Map per-rotor forces to collective thrust and body moments.
pub fn motor_forces_to_input(forces: &InputVec, params: &QuadParams) -> Result<ControlInput> {
    if forces.iter().any(|f| !f.is_finite()) {
        return Err(Error::Invalid("non-finite motor force".into()));
    }
    if let Some(f) = forces.iter().find(|f| **f < 0.0) {
        return Err(Error::Invalid(format!("negative motor force {f:.6}")));
    }
    let u2 = torque_mixing_matrix(params) * forces;
    Ok(ControlInput {
        thrust: forces.sum(),
        moment: u2,
    })
}

/// Mass-normalized aerodynamic drag acceleration of the true plant (world frame).
pub fn drag_acceleration(x: &QuadState, drag: &DragParams) -> Vector3<f64> {
    let r = euler_to_rotation(&x.euler);
    let v_b = r.transpose() * x.vel;
    let lin = Vector3::from(drag.linear).component_mul(&v_b);
    let quad = Vector3::from(drag.quadratic).component_mul(&v_b.component_mul(&v_b.abs()));
    -(r * (lin + quad))
}

/// Synthetic ground-truth derivative: nominal rigid body plus body-frame drag.
/// Differs from [`nominal_derivative`] only in the velocity-derivative entries (3–5).
pub fn true_derivative(
    x: &QuadState,
    u: &ControlInput,
    params: &QuadParams,
    drag: &DragParams,
) -> Result<StateVec> {
    let mut dx = nominal_derivative(x, u, params)?;
    let a_drag = drag_acceleration(x, drag);
    dx[3] += a_drag.x;
    dx[4] += a_drag.y;
    dx[5] += a_drag.z;
    Ok(dx)
}

/// Anything that can serve as the vehicle model: the plant, the nominal model,
/// or a learned correction on top of it.
pub trait DynamicsModel: Sync {
    fn derivative(&self, x: &QuadState, u: &ControlInput) -> Result<StateVec>;

    /// Jacobians of the continuous derivative. Default: central finite
    /// differences with absolute step 1e-6.
    fn jacobian(&self, x: &QuadState, u: &ControlInput) -> Result<(StateJac, InputJac)> {
        fd_jacobian(self, x, u)
    }
}

/// Central finite-difference Jacobians of a model's continuous derivative.
pub fn fd_jacobian<M: DynamicsModel + ?Sized>(
    model: &M,
    x: &QuadState,
    u: &ControlInput,
) -> Result<(StateJac, InputJac)> {
    const STEP: f64 = 1e-6;
    let xv = x.as_vec();
    let uv = u.as_vec();
    let mut a = StateJac::zeros();
    for i in 0..12 {
        let mut xp = xv;
        let mut xm = xv;
        xp[i] += STEP;
        xm[i] -= STEP;
        let fp = model.derivative(&QuadState::from_vec(&xp), u)?;
        let fm = model.derivative(&QuadState::from_vec(&xm), u)?;
        a.set_column(i, &((fp - fm) / (2.0 * STEP)));
    }
    let mut b = InputJac::zeros();
    for i in 0..4 {
        let mut up = uv;
        let mut um = uv;
        up[i] += STEP;
        um[i] -= STEP;
        let fp = model.derivative(x, &ControlInput::from_vec(&up))?;
        let fm = model.derivative(x, &ControlInput::from_vec(&um))?;
        b.set_column(i, &((fp - fm) / (2.0 * STEP)));
    }
    Ok((a, b))
}

/// Dynamics model without aerodynamic terms (what the controller believes by default).
#[derive(Debug, Clone, Copy)]
pub struct NominalModel {
    pub params: QuadParams,
}

impl DynamicsModel for NominalModel {
    fn derivative(&self, x: &QuadState, u: &ControlInput) -> Result<StateVec> {
        nominal_derivative(x, u, &self.params)
    }
}

/// The simulated ground truth: rigid body plus drag.
#[derive(Debug, Clone, Copy)]
pub struct TruePlant {
    pub params: QuadParams,
    pub drag: DragParams,
}

impl DynamicsModel for TruePlant {
    fn derivative(&self, x: &QuadState, u: &ControlInput) -> Result<StateVec> {
        true_derivative(x, u, &self.params, &self.drag)
    }
}

/// One classical RK4 step with zero-order-held input.
pub fn rk4_step<M: DynamicsModel + ?Sized>(
    model: &M,
    x: &QuadState,
    u: &ControlInput,
    h: f64,
) -> Result<QuadState> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::Invalid(format!("rk4 step size {h} must be positive")));
    }
    let xv = x.as_vec();
    let k1 = model.derivative(x, u)?;
    let k2 = model.derivative(&QuadState::from_vec(&(xv + k1 * (h / 2.0))), u)?;
    let k3 = model.derivative(&QuadState::from_vec(&(xv + k2 * (h / 2.0))), u)?;
    let k4 = model.derivative(&QuadState::from_vec(&(xv + k3 * h)), u)?;
    let out = xv + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("rk4 step output".into()));
    }
    Ok(QuadState::from_vec(&out))
}

/// Jacobians (∂x⁺/∂x, ∂x⁺/∂u) of the RK4 one-step map, chained through the four
/// stages from the model's continuous Jacobians.
pub fn rk4_step_jacobian<M: DynamicsModel + ?Sized>(
    model: &M,
    x: &QuadState,
    u: &ControlInput,
    h: f64,
) -> Result<(StateJac, InputJac)> {
    let xv = x.as_vec();
    let eye = StateJac::identity();

    let k1 = model.derivative(x, u)?;
    let (a1, b1) = model.jacobian(x, u)?;
    let dk1_x = a1;
    let dk1_u = b1;

    let x2 = QuadState::from_vec(&(xv + k1 * (h / 2.0)));
    let k2 = model.derivative(&x2, u)?;
    let (a2, b2) = model.jacobian(&x2, u)?;
    let dk2_x = a2 * (eye + dk1_x * (h / 2.0));
    let dk2_u = a2 * dk1_u * (h / 2.0) + b2;

    let x3 = QuadState::from_vec(&(xv + k2 * (h / 2.0)));
    let k3 = model.derivative(&x3, u)?;
    let (a3, b3) = model.jacobian(&x3, u)?;
    let dk3_x = a3 * (eye + dk2_x * (h / 2.0));
    let dk3_u = a3 * dk2_u * (h / 2.0) + b3;

    let x4 = QuadState::from_vec(&(xv + k3 * h));
    let (a4, b4) = model.jacobian(&x4, u)?;
    let dk4_x = a4 * (eye + dk3_x * h);
    let dk4_u = a4 * dk3_u * h + b4;

    let a_d = eye + (dk1_x + dk2_x * 2.0 + dk3_x * 2.0 + dk4_x) * (h / 6.0);
    let b_d = (dk1_u + dk2_u * 2.0 + dk3_u * 2.0 + dk4_u) * (h / 6.0);
    Ok((a_d, b_d))
}

/// A sampled run: uniformly spaced times, one state and one (zero-order-held)
/// input per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<QuadState>,
    pub inputs: Vec<ControlInput>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Sample spacing; assumes a validated trajectory.
    pub fn dt(&self) -> f64 {
        if self.times.len() < 2 {
            0.0
        } else {
            (self.times[self.times.len() - 1] - self.times[0]) / (self.times.len() - 1) as f64
        }
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.states.iter().map(|s| s.pos).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.states.len() || self.times.len() != self.inputs.len() {
            return Err(Error::Invalid(format!(
                "trajectory length mismatch: {} times, {} states, {} inputs",
                self.times.len(),
                self.states.len(),
                self.inputs.len()
            )));
        }
        if self.times.len() < 2 {
            return Err(Error::Invalid("trajectory needs at least 2 samples".into()));
        }
        let dt = self.dt();
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Invalid(format!("bad trajectory spacing {dt}")));
        }
        for k in 0..self.times.len() - 1 {
            let gap = self.times[k + 1] - self.times[k];
            if (gap - dt).abs() > 1e-9 {
                return Err(Error::Invalid(format!(
                    "non-uniform time spacing at sample {k}: {gap} vs {dt}"
                )));
            }
        }
        for (k, s) in self.states.iter().enumerate() {
            if !s.is_finite() {
                return Err(Error::Invalid(format!("non-finite state at sample {k}")));
            }
        }
        for (k, u) in self.inputs.iter().enumerate() {
            u.validate()
                .map_err(|e| Error::Invalid(format!("input at sample {k}: {e}")))?;
        }
        Ok(())
    }
}

/// Tolerances and guards for the adaptive integrator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Simulation aborts once the state norm exceeds this bound.
    pub divergence_bound: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            rtol: 1e-10,
            atol: 1e-12,
            divergence_bound: 1e6,
        }
    }
}

// Dormand-Prince 5(4) coefficients.
#[rustfmt::skip]
const DP_A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
#[rustfmt::skip]
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0, 0.0, 7571.0 / 16695.0, 393.0 / 640.0,
    -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0,
];

/// Adaptive Dormand-Prince 4(5) integration of x' = f(t, x) from `t0` to `t1`.
///
/// Returns the state at `t1`. The right-hand side may fail (e.g. gimbal lock),
/// which aborts integration.
pub fn rk45_integrate<const N: usize, F>(
    f: &mut F,
    x0: &SVector<f64, N>,
    t0: f64,
    t1: f64,
    rtol: f64,
    atol: f64,
) -> Result<SVector<f64, N>>
where
    F: FnMut(f64, &SVector<f64, N>) -> Result<SVector<f64, N>>,
{
    let span = t1 - t0;
    if !(span.is_finite() && span > 0.0) {
        return Err(Error::Invalid(format!("bad integration span {span}")));
    }
    let mut t = t0;
    let mut x = *x0;
    let mut k0 = f(t, &x)?; // FSAL stage
    let mut h = span;
    let h_min = span * 1e-14;
    let mut steps = 0usize;
    const MAX_STEPS: usize = 1_000_000;

    while t < t1 {
        if steps >= MAX_STEPS {
            return Err(Error::StepControl(format!(
                "step limit {MAX_STEPS} hit at t = {t:.6}"
            )));
        }
        steps += 1;
        h = h.min(t1 - t);

        let mut k = [SVector::<f64, N>::zeros(); 7];
        k[0] = k0;
        let mut failed_eval = false;
        for s in 0..6 {
            let mut xs = x;
            for (j, ks) in k.iter().enumerate().take(s + 1) {
                xs += ks * (h * DP_A[s][j]);
            }
            if xs.iter().any(|v| !v.is_finite()) {
                failed_eval = true;
                break;
            }
            k[s + 1] = f(t + DP_C[s] * h, &xs)?;
        }

        let accept = if failed_eval {
            false
        } else {
            // 5th-order solution is the last A row (FSAL): x5 was the final stage input.
            let mut x5 = x;
            for (j, ks) in k.iter().enumerate().take(6) {
                x5 += ks * (h * DP_A[5][j]);
            }
            let mut x4 = x;
            for (j, ks) in k.iter().enumerate() {
                x4 += ks * (h * DP_B4[j]);
            }
            let mut err: f64 = 0.0;
            for i in 0..N {
                let scale = atol + rtol * x[i].abs().max(x5[i].abs());
                let e = (x5[i] - x4[i]) / scale;
                err += e * e;
            }
            err = (err / N as f64).sqrt();
            if err <= 1.0 && x5.iter().all(|v| v.is_finite()) {
                t += h;
                x = x5;
                k0 = k[6];
                let factor = if err == 0.0 {
                    5.0
                } else {
                    (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                };
                h *= factor;
                true
            } else {
                let factor = if err.is_finite() && err > 0.0 {
                    (0.9 * err.powf(-0.2)).clamp(0.2, 0.9)
                } else {
                    0.2
                };
                h *= factor;
                false
            }
        };
        if failed_eval {
            h *= 0.2;
        }
        if !accept && h < h_min {
            return Err(Error::StepControl(format!(
                "step size underflow at t = {t:.6}"
            )));
        }
    }
    Ok(x)
}

/// Simulate a model on a fixed output grid with an adaptive integrator inside.
///
/// `schedule(k, t_k)` supplies the input held over the k-th interval; the final
/// sample repeats the last interval's input. `t_span` must be a multiple of `dt`.
pub fn rk45_simulate<M, S>(
    model: &M,
    x0: &QuadState,
    schedule: S,
    t_span: f64,
    dt: f64,
    opts: &SimOptions,
) -> Result<Trajectory>
where
    M: DynamicsModel + ?Sized,
    S: Fn(usize, f64) -> ControlInput,
{
    if !(dt.is_finite() && dt > 0.0 && t_span.is_finite() && t_span > 0.0) {
        return Err(Error::Invalid(format!(
            "bad simulation span {t_span} / dt {dt}"
        )));
    }
    let n = (t_span / dt).round() as usize;
    if n == 0 || (t_span - n as f64 * dt).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "span {t_span} is not a multiple of dt {dt}"
        )));
    }
    if !x0.is_finite() {
        return Err(Error::NonFinite("initial state".into()));
    }

    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    let mut inputs = Vec::with_capacity(n + 1);
    let mut x = *x0;
    times.push(0.0);
    states.push(x);

    for k in 0..n {
        let t_k = k as f64 * dt;
        let u = schedule(k, t_k);
        if !u.is_finite() {
            return Err(Error::NonFinite(format!("input at step {k}")));
        }
        inputs.push(u);
        let mut rhs = |_t: f64, xv: &StateVec| -> Result<StateVec> {
            model.derivative(&QuadState::from_vec(xv), &u)
        };
        let xv = rk45_integrate(&mut rhs, &x.as_vec(), t_k, t_k + dt, opts.rtol, opts.atol)?;
        let norm = xv.norm();
        if !norm.is_finite() || norm > opts.divergence_bound {
            return Err(Error::Diverged {
                norm,
                bound: opts.divergence_bound,
            });
        }
        x = QuadState::from_vec(&xv);
        times.push((k + 1) as f64 * dt);
        states.push(x);
    }
    inputs.push(*inputs.last().expect("n >= 1"));

    Ok(Trajectory {
        times,
        states,
        inputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(rng: &mut ChaCha8Rng) -> QuadState {
        QuadState {
            pos: Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.5..3.0)),
            vel: Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0)),
            euler: Vector3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-2.5..2.5)),
            omega: Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
        }
    }

    fn random_input(rng: &mut ChaCha8Rng, params: &QuadParams) -> ControlInput {
        ControlInput {
            thrust: params.hover_thrust() * rng.random_range(0.5..1.5),
            moment: Vector3::new(
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
            ),
        }
    }

    #[test]
    fn rotation_identity_at_zero() {
        let r = euler_to_rotation(&Vector3::zeros());
        assert_relative_eq!(r, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn yaw_quarter_turn_maps_body_x_to_world_y() {
        let r = euler_to_rotation(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let ex = r * Vector3::x();
        assert_relative_eq!(ex, Vector3::y(), epsilon = 1e-12);
    }

    #[test]
    fn rotation_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let eul = Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            );
            let r = euler_to_rotation(&eul);
            assert_relative_eq!(r.transpose() * r, Matrix3::identity(), epsilon = 1e-12);
            assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn euler_rates_invert_rate_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let eul = Vector3::new(
                rng.random_range(-1.2..1.2),
                rng.random_range(-1.2..1.2),
                rng.random_range(-3.0..3.0),
            );
            let omega = Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let rates = euler_rates(&eul, &omega).unwrap();
            let m = euler_rate_matrix(&eul).unwrap();
            assert_relative_eq!(m * rates, omega, epsilon = 1e-12);
        }
    }

    #[test]
    fn gimbal_guard_trips_near_singularity() {
        let lim = std::f64::consts::FRAC_PI_2 - 0.01;
        let omega = Vector3::new(0.1, 0.2, 0.3);
        assert!(matches!(
            euler_rates(&Vector3::new(lim, 0.0, 0.0), &omega),
            Err(Error::GimbalLock { .. })
        ));
        assert!(matches!(
            euler_rates(&Vector3::new(0.0, -lim, 0.0), &omega),
            Err(Error::GimbalLock { .. })
        ));
        // comfortably away from the limit is fine
        assert!(euler_rates(&Vector3::new(1.0, 1.0, 0.0), &omega).is_ok());
    }

    #[test]
    fn hover_is_an_exact_equilibrium() {
        let params = QuadParams::default();
        let x = QuadState::hover_at(Vector3::new(1.0, -2.0, 1.5));
        let u = ControlInput::hover(&params);
        let dx = nominal_derivative(&x, &u, &params).unwrap();
        for i in 0..12 {
            assert!(dx[i].abs() <= 1e-14, "dx[{i}] = {}", dx[i]);
        }
    }

    #[test]
    fn double_hover_thrust_accelerates_straight_up_at_g() {
        let params = QuadParams::default();
        let x = QuadState::hover_at(Vector3::zeros());
        let u = ControlInput {
            thrust: 2.0 * params.hover_thrust(),
            moment: Vector3::zeros(),
        };
        let dx = nominal_derivative(&x, &u, &params).unwrap();
        assert_relative_eq!(dx[5], params.gravity, epsilon = 1e-13);
        for i in [0, 1, 2, 3, 4, 6, 7, 8, 9, 10, 11] {
            assert_eq!(dx[i], 0.0, "entry {i}");
        }
    }

    #[test]
    fn pure_yaw_moment_only_spins_yaw_rate() {
        let params = QuadParams::default();
        let x = QuadState::hover_at(Vector3::zeros());
        let u = ControlInput {
            thrust: params.hover_thrust(),
            moment: Vector3::new(0.0, 0.0, 0.02),
        };
        let dx = nominal_derivative(&x, &u, &params).unwrap();
        assert_relative_eq!(dx[11], 0.02 / params.inertia[2], epsilon = 1e-12);
        for i in 0..11 {
            assert!(dx[i].abs() <= 1e-14, "dx[{i}] = {}", dx[i]);
        }
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let params = QuadParams::default();
        let model = NominalModel { params };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let x = random_state(&mut rng);
            let u = random_input(&mut rng, &params);
            let (a, b) = nominal_jacobian(&x, &u, &params).unwrap();
            let (a_fd, b_fd) = fd_jacobian(&model, &x, &u).unwrap();
            let scale_a = a_fd.norm().max(1.0);
            let scale_b = b_fd.norm().max(1.0);
            assert!(
                (a - a_fd).norm() / scale_a < 1e-6,
                "state jacobian mismatch: {}",
                (a - a_fd).norm()
            );
            assert!(
                (b - b_fd).norm() / scale_b < 1e-6,
                "input jacobian mismatch: {}",
                (b - b_fd).norm()
            );
        }
    }

    #[test]
    fn mixing_matches_hand_computed_column() {
        let params = QuadParams {
            arm_length: 0.1,
            moment_ratio: 0.01,
            ..QuadParams::default()
        };
        let u = motor_forces_to_input(&InputVec::new(0.0, 1.0, 0.0, 0.0), &params).unwrap();
        assert_relative_eq!(u.thrust, 1.0, epsilon = 1e-15);
        assert_relative_eq!(u.moment, Vector3::new(0.1, 0.0, -0.01), epsilon = 1e-15);
    }

    #[test]
    fn negative_motor_force_is_rejected() {
        let params = QuadParams::default();
        let r = motor_forces_to_input(&InputVec::new(1.0, -0.01, 1.0, 1.0), &params);
        assert!(matches!(r, Err(Error::Invalid(_))));
    }

    #[test]
    fn mixing_pseudoinverse_round_trip() {
        let params = QuadParams::default();
        let t = torque_mixing_matrix(&params);
        let t_pinv = t.pseudo_inverse(1e-12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let u2 = Vector3::new(
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
            );
            let back = t * (t_pinv * u2);
            assert_relative_eq!(back, u2, epsilon = 1e-12);
        }
    }

    #[test]
    fn drag_examples() {
        let drag = DragParams {
            linear: [0.3, 0.0, 0.0],
            quadratic: [0.0, 0.0, 0.0],
        };
        let mut x = QuadState::zero();
        assert_eq!(drag_acceleration(&x, &drag), Vector3::zeros());
        x.vel = Vector3::new(1.0, 0.0, 0.0);
        assert_relative_eq!(
            drag_acceleration(&x, &drag),
            Vector3::new(-0.3, 0.0, 0.0),
            epsilon = 1e-15
        );
        let drag_q = DragParams {
            linear: [0.0, 0.0, 0.0],
            quadratic: [0.1, 0.0, 0.0],
        };
        x.vel = Vector3::new(2.0, 0.0, 0.0);
        assert_relative_eq!(
            drag_acceleration(&x, &drag_q),
            Vector3::new(-0.4, 0.0, 0.0),
            epsilon = 1e-15
        );
        // odd in v: reversing velocity flips the quadratic term too
        x.vel = Vector3::new(-2.0, 0.0, 0.0);
        assert_relative_eq!(
            drag_acceleration(&x, &drag_q),
            Vector3::new(0.4, 0.0, 0.0),
            epsilon = 1e-15
        );
    }

    #[test]
    fn true_model_differs_from_nominal_only_in_velocity_rows() {
        let params = QuadParams::default();
        let drag = DragParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x = random_state(&mut rng);
            let u = random_input(&mut rng, &params);
            let f_nom = nominal_derivative(&x, &u, &params).unwrap();
            let f_true = true_derivative(&x, &u, &params, &drag).unwrap();
            for i in 0..12 {
                if (3..6).contains(&i) {
                    continue;
                }
                assert_eq!(f_nom[i].to_bits(), f_true[i].to_bits(), "row {i}");
            }
            assert!((f_true.fixed_rows::<3>(3) - f_nom.fixed_rows::<3>(3)).norm() > 0.0);
        }
    }

    #[test]
    fn rk4_halving_shrinks_error_sixteenfold() {
        let params = QuadParams::default();
        let model = NominalModel { params };
        let mut x = QuadState::hover_at(Vector3::zeros());
        x.vel = Vector3::new(0.5, -0.3, 0.2);
        x.omega = Vector3::new(0.4, -0.2, 0.3);
        let u = ControlInput {
            thrust: params.hover_thrust() * 1.05,
            moment: Vector3::new(0.003, -0.002, 0.001),
        };
        let span = 0.2;
        let run = |h: f64| -> StateVec {
            let n = (span / h).round() as usize;
            let mut s = x;
            for _ in 0..n {
                s = rk4_step(&model, &s, &u, h).unwrap();
            }
            s.as_vec()
        };
        let reference = {
            let mut rhs = |_t: f64, xv: &StateVec| model.derivative(&QuadState::from_vec(xv), &u);
            rk45_integrate(&mut rhs, &x.as_vec(), 0.0, span, 1e-12, 1e-14).unwrap()
        };
        let e1 = (run(4e-3) - reference).norm();
        let e2 = (run(2e-3) - reference).norm();
        let ratio = e1 / e2;
        assert!(
            (10.0..25.0).contains(&ratio),
            "expected ~16x error reduction, got {ratio}"
        );
    }

    #[test]
    fn rk45_reproduces_exponential() {
        let mut rhs = |_t: f64, x: &SVector<f64, 1>| Ok(*x);
        let x = rk45_integrate(&mut rhs, &SVector::<f64, 1>::new(1.0), 0.0, 1.0, 1e-10, 1e-12)
            .unwrap();
        assert!((x[0] - std::f64::consts::E).abs() < 1e-10);
    }

    #[test]
    fn rk45_reproduces_harmonic_oscillator() {
        let mut rhs = |_t: f64, x: &SVector<f64, 2>| Ok(SVector::<f64, 2>::new(x[1], -x[0]));
        let x = rk45_integrate(
            &mut rhs,
            &SVector::<f64, 2>::new(1.0, 0.0),
            0.0,
            2.0,
            1e-10,
            1e-12,
        )
        .unwrap();
        assert!((x[0] - 2.0f64.cos()).abs() < 1e-9);
        assert!((x[1] + 2.0f64.sin()).abs() < 1e-9);
    }

    #[test]
    fn hover_simulation_stays_put() {
        let params = QuadParams::default();
        let model = NominalModel { params };
        let x0 = QuadState::hover_at(Vector3::new(0.0, 0.0, 1.0));
        let u = ControlInput::hover(&params);
        let traj = rk45_simulate(&model, &x0, |_, _| u, 1.0, 0.002, &SimOptions::default()).unwrap();
        assert_eq!(traj.len(), 501);
        traj.validate().unwrap();
        for s in &traj.states {
            assert!((s.pos - x0.pos).norm() < 1e-12);
            assert!(s.vel.norm() < 1e-12);
        }
    }

    #[test]
    fn divergence_guard_aborts() {
        let params = QuadParams::default();
        let model = NominalModel { params };
        let x0 = QuadState::hover_at(Vector3::zeros());
        let u = ControlInput {
            thrust: 2.0 * params.hover_thrust(),
            moment: Vector3::zeros(),
        };
        let opts = SimOptions {
            divergence_bound: 5.0,
            ..SimOptions::default()
        };
        let r = rk45_simulate(&model, &x0, |_, _| u, 8.0, 0.002, &opts);
        assert!(matches!(r, Err(Error::Diverged { .. })));
    }

    #[test]
    fn wrap_angle_examples() {
        use std::f64::consts::PI;
        assert_eq!(wrap_angle(0.3), 0.3);
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(1.5 * PI) + 0.5 * PI).abs() < 1e-12);
        assert!((wrap_angle(-0.25 * PI) + 0.25 * PI).abs() < 1e-15);
        assert!((wrap_angle(7.0 * PI) - PI).abs() < 1e-12);
    }

    #[test]
    fn state_error_wraps_only_euler_rows() {
        use std::f64::consts::PI;
        let mut a = StateVec::zeros();
        let mut b = StateVec::zeros();
        a[0] = 4.0 * PI; // position: plain difference
        a[6] = 1.9 * PI; // roll: wrapped
        b[6] = 0.0;
        a[9] = 2.0 * PI; // body rate: plain difference
        let e = state_error(&a, &b);
        assert!((e[0] - 4.0 * PI).abs() < 1e-12);
        assert!((e[6] + 0.1 * PI).abs() < 1e-12);
        assert!((e[9] - 2.0 * PI).abs() < 1e-12);
    }

    #[test]
    fn trajectory_validation_catches_defects() {
        let params = QuadParams::default();
        let u = ControlInput::hover(&params);
        let s = QuadState::hover_at(Vector3::zeros());
        let good = Trajectory {
            times: vec![0.0, 0.1, 0.2],
            states: vec![s; 3],
            inputs: vec![u; 3],
        };
        good.validate().unwrap();

        let uneven = Trajectory {
            times: vec![0.0, 0.1, 0.25],
            ..good.clone()
        };
        assert!(uneven.validate().is_err());

        let short = Trajectory {
            times: vec![0.0, 0.1],
            states: vec![s; 3],
            inputs: vec![u; 3],
        };
        assert!(short.validate().is_err());

        let mut bad_input = good.clone();
        bad_input.inputs[1].thrust = -1.0;
        assert!(bad_input.validate().is_err());
    }
}
