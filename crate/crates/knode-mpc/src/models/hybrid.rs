//! Hybrid model: nominal rigid-body derivative plus a masked network residual.

use nalgebra::DVector;

use crate::dynamics::{
    fd_jacobian, nominal_derivative, ControlInput, DynamicsModel, InputJac, NominalModel,
    QuadParams, QuadState, StateJac, StateVec,
};
use crate::error::{Error, Result};
use crate::models::mlp::{mlp_forward, mlp_input_jacobian, Mlp};

/// Which state-derivative entries the learned residual is allowed to touch.
pub type ResidualMask = [bool; 12];

/// Per-dimension standardization applied to the network input [x; u].
#[derive(Debug, Clone, PartialEq)]
pub struct InputScaler {
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
}

/// Lower bound on the stored std. Standardization exists to keep large
/// inputs out of tanh saturation; it must never work the other way and
/// magnify a near-constant dimension (hover altitude, yaw, the moment
/// channels of clean tracking data) into a high-gain feature. A channel
/// whose weights are amplified by 1/std poisons every consumer of the
/// model's input Jacobian — the MPC sees enormous phantom input gains.
/// Flooring at one unit caps the amplification at 1: features may be
/// shrunk toward zero, never inflated.
const STD_FLOOR: f64 = 1.0;

impl InputScaler {
    pub fn identity(dim: usize) -> Self {
        InputScaler {
            mean: DVector::zeros(dim),
            std: DVector::from_element(dim, 1.0),
        }
    }

    /// Per-dimension mean and (population) std over the given rows.
    pub fn fit(rows: &[DVector<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Invalid("cannot fit scaler on empty data".into()));
        }
        let dim = rows[0].len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Invalid("inconsistent row lengths in scaler fit".into()));
        }
        let mut mean = DVector::zeros(dim);
        for r in rows {
            mean += r;
        }
        mean /= n as f64;
        let mut var = DVector::zeros(dim);
        for r in rows {
            let d = r - &mean;
            var += d.component_mul(&d);
        }
        var /= n as f64;
        let std = var.map(|v| v.sqrt().max(STD_FLOOR));
        Ok(InputScaler { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, raw: &DVector<f64>) -> DVector<f64> {
        (raw - &self.mean).component_div(&self.std)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::Invalid("scaler mean/std length mismatch".into()));
        }
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0))
            || self.mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::Invalid("scaler statistics must be finite, std > 0".into()));
        }
        Ok(())
    }
}

/// Nominal dynamics plus a standardized-input MLP residual on the masked
/// derivative entries.
#[derive(Debug, Clone)]
pub struct HybridModel {
    pub params: QuadParams,
    pub net: Mlp,
    pub scaler: InputScaler,
    pub mask: ResidualMask,
}

impl HybridModel {
    pub fn new(params: QuadParams, net: Mlp, scaler: InputScaler, mask: ResidualMask) -> Result<Self> {
        params.validate()?;
        scaler.validate()?;
        if net.input_dim() != 16 || net.output_dim() != 12 {
            return Err(Error::Invalid(format!(
                "hybrid network must map 16 -> 12, got {} -> {}",
                net.input_dim(),
                net.output_dim()
            )));
        }
        if scaler.dim() != 16 {
            return Err(Error::Invalid(format!(
                "hybrid scaler must have dim 16, got {}",
                scaler.dim()
            )));
        }
        Ok(HybridModel {
            params,
            net,
            scaler,
            mask,
        })
    }

    /// Concatenated raw network input [x; u].
    pub fn raw_input(x: &QuadState, u: &ControlInput) -> DVector<f64> {
        let mut z = DVector::zeros(16);
        let xv = x.as_vec();
        for i in 0..12 {
            z[i] = xv[i];
        }
        let uv = u.as_vec();
        for i in 0..4 {
            z[12 + i] = uv[i];
        }
        z
    }

    /// Masked network residual on the state derivative.
    pub fn residual(&self, x: &QuadState, u: &ControlInput) -> Result<StateVec> {
        let z = self.scaler.transform(&Self::raw_input(x, u));
        let out = mlp_forward(&self.net, &z)?;
        let mut res = StateVec::zeros();
        for i in 0..12 {
            if self.mask[i] {
                res[i] = out[i];
            }
        }
        Ok(res)
    }
}

/// Hybrid continuous-time derivative: nominal + masked residual.
pub fn hybrid_derivative(model: &HybridModel, x: &QuadState, u: &ControlInput) -> Result<StateVec> {
    let mut dx = nominal_derivative(x, u, &model.params)?;
    let res = model.residual(x, u)?;
    for i in 0..12 {
        if model.mask[i] {
            dx[i] += res[i];
        }
    }
    Ok(dx)
}

impl DynamicsModel for HybridModel {
    fn derivative(&self, x: &QuadState, u: &ControlInput) -> Result<StateVec> {
        hybrid_derivative(self, x, u)
    }

    /// Finite differences for the nominal part, exact input Jacobian for the
    /// network part (composed with the standardization scaling).
    fn jacobian(&self, x: &QuadState, u: &ControlInput) -> Result<(StateJac, InputJac)> {
        let nominal = NominalModel {
            params: self.params,
        };
        let (mut a, mut b) = fd_jacobian(&nominal, x, u)?;
        let z = self.scaler.transform(&Self::raw_input(x, u));
        let jac = mlp_input_jacobian(&self.net, &z)?;
        for i in 0..12 {
            if !self.mask[i] {
                continue;
            }
            for j in 0..12 {
                a[(i, j)] += jac[(i, j)] / self.scaler.std[j];
            }
            for j in 0..4 {
                b[(i, j)] += jac[(i, 12 + j)] / self.scaler.std[12 + j];
            }
        }
        Ok((a, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::rk4_step;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_state(rng: &mut ChaCha8Rng) -> QuadState {
        QuadState {
            pos: Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 1.0),
            vel: Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 0.1),
            euler: Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), 0.2),
            omega: Vector3::new(0.3, -0.2, 0.1),
        }
    }

    fn scaled_model(seed: u64) -> HybridModel {
        let mut net = Mlp::random(&[16, 8, 12], seed).unwrap();
        // non-zero output layer so the residual is active
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for w in net.weights[1].iter_mut() {
            *w = rng.random_range(-0.3..0.3);
        }
        let mut scaler = InputScaler::identity(16);
        for i in 0..16 {
            scaler.mean[i] = rng.random_range(-0.5..0.5);
            scaler.std[i] = rng.random_range(0.5..2.0);
        }
        HybridModel::new(QuadParams::default(), net, scaler, [true; 12]).unwrap()
    }

    #[test]
    fn zero_net_hybrid_equals_nominal_bitwise() {
        let params = QuadParams::default();
        let net = Mlp::zeros(&[16, 64, 16, 12]).unwrap();
        let model =
            HybridModel::new(params, net, InputScaler::identity(16), [true; 12]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let x = test_state(&mut rng);
            let u = ControlInput {
                thrust: 5.1,
                moment: Vector3::new(0.01, -0.02, 0.005),
            };
            let hybrid = hybrid_derivative(&model, &x, &u).unwrap();
            let nominal = nominal_derivative(&x, &u, &params).unwrap();
            for i in 0..12 {
                assert_eq!(hybrid[i].to_bits(), nominal[i].to_bits(), "entry {i}");
            }
        }
    }

    #[test]
    fn mask_limits_residual_support() {
        let params = QuadParams::default();
        let mut net = Mlp::zeros(&[16, 12]).unwrap();
        for i in 0..12 {
            net.biases[0][i] = 1.0 + i as f64;
        }
        let mut mask = [false; 12];
        mask[3] = true;
        mask[4] = true;
        mask[5] = true;
        let model = HybridModel::new(params, net, InputScaler::identity(16), mask).unwrap();
        let x = QuadState::hover_at(Vector3::zeros());
        let u = ControlInput::hover(&params);
        let hybrid = hybrid_derivative(&model, &x, &u).unwrap();
        let nominal = nominal_derivative(&x, &u, &params).unwrap();
        let diff = hybrid - nominal;
        assert_eq!(diff[3], 4.0);
        assert_eq!(diff[4], 5.0);
        assert_eq!(diff[5], 6.0);
        for i in [0usize, 1, 2, 6, 7, 8, 9, 10, 11] {
            assert_eq!(diff[i], 0.0, "entry {i}");
        }
    }

    #[test]
    fn hybrid_jacobian_matches_finite_differences() {
        let model = scaled_model(77);
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        for _ in 0..5 {
            let x = test_state(&mut rng);
            let u = ControlInput {
                thrust: 5.0,
                moment: Vector3::new(0.01, 0.0, -0.01),
            };
            let (a, b) = model.jacobian(&x, &u).unwrap();
            let (a_fd, b_fd) = fd_jacobian(&model, &x, &u).unwrap();
            assert!((a - a_fd).norm() / a_fd.norm().max(1.0) < 1e-6);
            assert!((b - b_fd).norm() / b_fd.norm().max(1.0) < 1e-6);
        }
    }

    #[test]
    fn scaler_fit_standardizes_and_floors() {
        let rows: Vec<DVector<f64>> = (0..50)
            .map(|k| {
                let mut r = DVector::zeros(3);
                r[0] = k as f64; // varying
                r[1] = 7.5; // constant
                r[2] = if k % 2 == 0 { -2.0 } else { 2.0 };
                r
            })
            .collect();
        let scaler = InputScaler::fit(&rows).unwrap();
        assert!((scaler.mean[0] - 24.5).abs() < 1e-12);
        assert!((scaler.mean[1] - 7.5).abs() < 1e-12);
        // a constant column gets the floor, a varying one its true std
        assert_eq!(scaler.std[1], STD_FLOOR);
        assert!((scaler.std[2] - 2.0).abs() < 1e-12);
        let z = scaler.transform(&rows[0]);
        assert!((z[0] - (0.0 - 24.5) / scaler.std[0]).abs() < 1e-12);
    }

    #[test]
    fn rk4_of_hybrid_runs() {
        let model = scaled_model(91);
        let x = QuadState::hover_at(Vector3::new(0.0, 0.0, 1.0));
        let u = ControlInput::hover(&model.params);
        let next = rk4_step(&model, &x, &u, 0.002).unwrap();
        assert!(next.is_finite());
    }

    #[test]
    fn constructor_validates_shapes() {
        let params = QuadParams::default();
        let bad_net = Mlp::zeros(&[10, 12]).unwrap();
        assert!(
            HybridModel::new(params, bad_net, InputScaler::identity(16), [true; 12]).is_err()
        );
        let net = Mlp::zeros(&[16, 12]).unwrap();
        assert!(HybridModel::new(params, net, InputScaler::identity(10), [true; 12]).is_err());
    }
}
