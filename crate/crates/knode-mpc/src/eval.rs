//! Evaluation: reference trajectories (circle, lemniscate), dynamic time
//! warping, and the prediction / tracking experiment harnesses.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{closed_loop_simulate, MpcConfig, MpcStepLog, Reference};
use crate::dynamics::{
    rk4_step, DynamicsModel, QuadState, SimOptions, StateVec, Trajectory,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefKind {
    Circle,
    Lemniscate,
    Hover,
}

/// One reference trajectory to fly or predict.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefSpec {
    pub kind: RefKind,
    /// Circle radius, or the Gerono lemniscate half-width.
    pub radius: f64,
    pub period: f64,
    pub altitude: f64,
    pub center: [f64; 2],
    /// Smooth blend-in from rest over this many seconds.
    pub ramp: f64,
    pub duration: f64,
}

impl Default for RefSpec {
    fn default() -> Self {
        RefSpec {
            kind: RefKind::Circle,
            radius: 3.0,
            period: 8.0,
            altitude: 1.0,
            center: [0.0, 0.0],
            ramp: 2.0,
            duration: 8.0,
        }
    }
}

impl RefSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kind != RefKind::Hover && !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Config("reference radius must be positive".into()));
        }
        if self.kind != RefKind::Hover && !(self.period > 0.0 && self.period.is_finite()) {
            return Err(Error::Config("reference period must be positive".into()));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::Config("reference duration must be positive".into()));
        }
        if !(self.ramp >= 0.0 && self.ramp.is_finite()) {
            return Err(Error::Config("reference ramp must be nonnegative".into()));
        }
        if !self.altitude.is_finite() || self.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::Config("reference geometry must be finite".into()));
        }
        Ok(())
    }

    /// Short name used in tables and file names, e.g. `circle-r3`.
    pub fn id(&self) -> String {
        match self.kind {
            RefKind::Circle => format!("circle-r{}", self.radius),
            RefKind::Lemniscate => format!("lemniscate-r{}", self.radius),
            RefKind::Hover => "hover".to_string(),
        }
    }
}

/// Phase and phase rate at time `t`: a minimum-jerk warp takes the phase rate
/// from 0 to ω over the ramp, after which the phase advances linearly (with
/// the ramp contributing exactly half its nominal advance).
fn phase_at(t: f64, omega: f64, ramp: f64) -> (f64, f64) {
    if t >= ramp || ramp == 0.0 {
        (omega * (t - ramp / 2.0), omega)
    } else {
        let s = t / ramp;
        let sigma = s * s * s * (10.0 + s * (-15.0 + 6.0 * s));
        let sigma_int = s * s * s * s * (2.5 + s * (-3.0 + s));
        (omega * ramp * sigma_int, omega * sigma)
    }
}

/// Sample the reference on a `dt` grid for `duration` seconds (inclusive of
/// both endpoints). Desired attitude and body rates are zero.
pub fn gen_reference(spec: &RefSpec, duration: f64, dt: f64) -> Result<Reference> {
    spec.validate()?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config("reference dt must be positive".into()));
    }
    let n = (duration / dt).round() as usize;
    if n == 0 || (duration - n as f64 * dt).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "duration {duration} is not a positive multiple of dt {dt}"
        )));
    }
    let omega = if spec.kind == RefKind::Hover {
        0.0
    } else {
        2.0 * std::f64::consts::PI / spec.period
    };
    let (cx, cy) = (spec.center[0], spec.center[1]);
    let mut states = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let t = i as f64 * dt;
        let (phi, dphi) = phase_at(t, omega, spec.ramp);
        let mut st = StateVec::zeros();
        match spec.kind {
            RefKind::Circle => {
                st[0] = cx + spec.radius * phi.cos();
                st[1] = cy + spec.radius * phi.sin();
                st[3] = -spec.radius * phi.sin() * dphi;
                st[4] = spec.radius * phi.cos() * dphi;
            }
            RefKind::Lemniscate => {
                st[0] = cx + spec.radius * phi.cos();
                st[1] = cy + spec.radius * phi.sin() * phi.cos();
                st[3] = -spec.radius * phi.sin() * dphi;
                st[4] = spec.radius * (2.0 * phi).cos() * dphi;
            }
            RefKind::Hover => {
                st[0] = cx;
                st[1] = cy;
            }
        }
        st[2] = spec.altitude;
        states.push(st);
    }
    Ok(Reference { dt, states })
}

#[derive(Debug, Clone)]
pub struct DtwResult {
    /// Sum of Euclidean local costs along the optimal alignment.
    pub distance: f64,
    /// Distance divided by the alignment path length.
    pub normalized: f64,
    pub path: Vec<(usize, usize)>,
}

/// Classical full-window dynamic time warping between two point sequences.
pub fn dtw_distance(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<DtwResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Invalid("dtw requires nonempty sequences".into()));
    }
    let (m, n) = (a.len(), b.len());
    // rolling two-row cost table plus a full backpointer grid
    // (0 = diagonal, 1 = from i−1, 2 = from j−1)
    let mut prev = vec![0.0f64; n];
    let mut curr = vec![0.0f64; n];
    let mut back = vec![0u8; m * n];
    for i in 0..m {
        for j in 0..n {
            let cost = (a[i] - b[j]).norm();
            let (best, bp) = if i == 0 && j == 0 {
                (0.0, 0)
            } else if i == 0 {
                (curr[j - 1], 2)
            } else if j == 0 {
                (prev[0], 1)
            } else {
                let diag = prev[j - 1];
                let up = prev[j];
                let left = curr[j - 1];
                // deterministic tie-break: diagonal, then up, then left
                let mut best = diag;
                let mut bp = 0u8;
                if up < best {
                    best = up;
                    bp = 1;
                }
                if left < best {
                    best = left;
                    bp = 2;
                }
                (best, bp)
            };
            curr[j] = best + cost;
            back[i * n + j] = bp;
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    let distance = prev[n - 1];

    let mut path = Vec::new();
    let (mut i, mut j) = (m - 1, n - 1);
    loop {
        path.push((i, j));
        if i == 0 && j == 0 {
            break;
        }
        match back[i * n + j] {
            0 => {
                i -= 1;
                j -= 1;
            }
            1 => i -= 1,
            _ => j -= 1,
        }
    }
    path.reverse();
    let normalized = distance / path.len() as f64;
    Ok(DtwResult {
        distance,
        normalized,
        path,
    })
}

/// One table row of an experiment: metric values for a (reference, model) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub spec: String,
    pub model: String,
    pub dtw_raw: f64,
    pub dtw_normalized: f64,
    pub rmse: f64,
}

fn position_rmse(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    let n = a.len().min(b.len());
    let acc: f64 = (0..n).map(|i| (a[i] - b[i]).norm_squared()).sum();
    (acc / n as f64).sqrt()
}

/// Open-loop replay is unstable for any imperfect model: recorded moments
/// were feedback against the true plant, so a drifting attitude can tumble
/// into the Euler singularity. Predictions are frozen at the last valid
/// state once that happens (or once the state leaves this bound), which
/// keeps the error metrics finite while still charging the model for the
/// whole remaining horizon.
const PREDICTION_FREEZE_BOUND: f64 = 1e6;

/// Re-simulate a recorded flight open-loop: from the recorded initial state,
/// integrate the model under the recorded input sequence. A model that
/// diverges holds its last valid state for the rest of the horizon.
pub fn open_loop_predict<M: DynamicsModel + ?Sized>(
    model: &M,
    recorded: &Trajectory,
) -> Result<Trajectory> {
    recorded.validate()?;
    let dt = recorded.dt();
    let mut states = Vec::with_capacity(recorded.len());
    let mut x = recorded.states[0].clone();
    states.push(x.clone());
    for i in 0..recorded.len() - 1 {
        match rk4_step(model, &x, &recorded.inputs[i], dt) {
            Ok(next)
                if next.is_finite() && next.as_vec().norm() < PREDICTION_FREEZE_BOUND =>
            {
                x = next;
            }
            _ => {}
        }
        states.push(x.clone());
    }
    Ok(Trajectory {
        times: recorded.times.clone(),
        states,
        inputs: recorded.inputs.clone(),
    })
}

/// Chained one-step predictions from each recorded state (the training-loss
/// view of model quality).
pub fn one_step_predictions<M: DynamicsModel + ?Sized>(
    model: &M,
    recorded: &Trajectory,
) -> Result<Vec<QuadState>> {
    recorded.validate()?;
    let dt = recorded.dt();
    let mut preds = Vec::with_capacity(recorded.len() - 1);
    for i in 0..recorded.len() - 1 {
        preds.push(rk4_step(model, &recorded.states[i], &recorded.inputs[i], dt)?);
    }
    Ok(preds)
}

/// Everything the prediction study produces for one reference spec.
#[derive(Debug, Clone)]
pub struct PredictionCell {
    pub spec: String,
    pub ground_truth: Trajectory,
    /// Open-loop re-simulations per model, in caller order.
    pub predictions: Vec<(String, Trajectory)>,
    pub rows: Vec<ExperimentRow>,
    pub onestep_rows: Vec<ExperimentRow>,
}

/// Fly each spec closed-loop (data-collection controller against the plant),
/// then re-predict the flight with every candidate model and score DTW / RMSE
/// of the 3-D positions. Cells run in parallel; output order follows input
/// order.
pub fn prediction_experiment(
    models: &[(String, &dyn DynamicsModel)],
    collection_controller: &dyn DynamicsModel,
    plant: &dyn DynamicsModel,
    specs: &[RefSpec],
    mpc: &MpcConfig,
    plant_dt: f64,
    opts: &SimOptions,
) -> Result<Vec<PredictionCell>> {
    specs
        .par_iter()
        .map(|spec| {
            let reference = gen_reference(
                spec,
                spec.duration + mpc.horizon as f64 * mpc.dt,
                mpc.dt,
            )?;
            let closed = closed_loop_simulate(
                collection_controller,
                plant,
                &reference,
                spec.duration,
                mpc,
                plant_dt,
                opts,
            )?;
            let truth = closed.trajectory;
            let truth_pos = truth.positions();

            let mut predictions = Vec::with_capacity(models.len());
            let mut rows = Vec::with_capacity(models.len());
            let mut onestep_rows = Vec::with_capacity(models.len());
            for (name, model) in models {
                let pred = open_loop_predict(*model, &truth)?;
                let dtw = dtw_distance(&pred.positions(), &truth_pos)?;
                rows.push(ExperimentRow {
                    spec: spec.id(),
                    model: name.clone(),
                    dtw_raw: dtw.distance,
                    dtw_normalized: dtw.normalized,
                    rmse: position_rmse(&pred.positions(), &truth_pos),
                });

                let steps = one_step_predictions(*model, &truth)?;
                let pred_pos: Vec<Vector3<f64>> = steps.iter().map(|s| s.pos).collect();
                let true_pos: Vec<Vector3<f64>> =
                    truth.states[1..].iter().map(|s| s.pos).collect();
                let dtw1 = dtw_distance(&pred_pos, &true_pos)?;
                onestep_rows.push(ExperimentRow {
                    spec: spec.id(),
                    model: name.clone(),
                    dtw_raw: dtw1.distance,
                    dtw_normalized: dtw1.normalized,
                    rmse: position_rmse(&pred_pos, &true_pos),
                });
                predictions.push((name.clone(), pred));
            }
            Ok(PredictionCell {
                spec: spec.id(),
                ground_truth: truth,
                predictions,
                rows,
                onestep_rows,
            })
        })
        .collect()
}

/// One closed-loop tracking run and its score.
#[derive(Debug, Clone)]
pub struct TrackingCell {
    pub spec: String,
    pub controller: String,
    pub trajectory: Trajectory,
    pub logs: Vec<MpcStepLog>,
    pub row: ExperimentRow,
}

/// Fly every (controller, spec) pair closed-loop against the plant and score
/// the 3-D position DTW between the flown path and the planned reference.
pub fn tracking_experiment(
    controllers: &[(String, &dyn DynamicsModel)],
    plant: &dyn DynamicsModel,
    specs: &[RefSpec],
    mpc: &MpcConfig,
    plant_dt: f64,
    opts: &SimOptions,
) -> Result<Vec<TrackingCell>> {
    let mut jobs = Vec::new();
    for (name, model) in controllers {
        for spec in specs {
            jobs.push((name.clone(), *model, spec.clone()));
        }
    }
    jobs.par_iter()
        .map(|(name, model, spec)| {
            let reference = gen_reference(
                spec,
                spec.duration + mpc.horizon as f64 * mpc.dt,
                mpc.dt,
            )?;
            let closed = closed_loop_simulate(
                *model,
                plant,
                &reference,
                spec.duration,
                mpc,
                plant_dt,
                opts,
            )?;
            // score against the plant-grid reference over the flown window
            let fine = gen_reference(spec, spec.duration, plant_dt)?;
            let ref_pos: Vec<Vector3<f64>> = fine
                .states
                .iter()
                .map(|s| Vector3::new(s[0], s[1], s[2]))
                .collect();
            let flown = closed.trajectory.positions();
            let dtw = dtw_distance(&flown, &ref_pos)?;
            let row = ExperimentRow {
                spec: spec.id(),
                model: name.clone(),
                dtw_raw: dtw.distance,
                dtw_normalized: dtw.normalized,
                rmse: position_rmse(&flown, &ref_pos),
            };
            Ok(TrackingCell {
                spec: spec.id(),
                controller: name.clone(),
                trajectory: closed.trajectory,
                logs: closed.logs,
                row,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{NominalModel, QuadParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn circle(radius: f64, ramp: f64) -> RefSpec {
        RefSpec {
            kind: RefKind::Circle,
            radius,
            ramp,
            ..RefSpec::default()
        }
    }

    #[test]
    fn circle_analytic_values_without_ramp() {
        let spec = RefSpec {
            center: [0.5, -1.0],
            ..circle(3.0, 0.0)
        };
        let r = gen_reference(&spec, 8.0, 0.002).unwrap();
        let omega = 2.0 * std::f64::consts::PI / 8.0;
        let s0 = &r.states[0];
        assert!((s0[0] - 3.5).abs() < 1e-12);
        assert!((s0[1] + 1.0).abs() < 1e-12);
        assert!((s0[2] - 1.0).abs() < 1e-12);
        assert!(s0[3].abs() < 1e-12);
        assert!((s0[4] - 3.0 * omega).abs() < 1e-12);
        // quarter period: top of the circle, moving in −x
        let q = &r.states[1000];
        assert!((q[0] - 0.5).abs() < 1e-9);
        assert!((q[1] - 2.0).abs() < 1e-9);
        assert!((q[3] + 3.0 * omega).abs() < 1e-9);
        assert!(q[4].abs() < 1e-9);
        // attitude and rate targets stay zero
        for d in 6..12 {
            assert_eq!(s0[d], 0.0);
        }
    }

    #[test]
    fn lemniscate_crosses_center_at_quarter_period() {
        let spec = RefSpec {
            kind: RefKind::Lemniscate,
            ..circle(2.0, 0.0)
        };
        let r = gen_reference(&spec, 8.0, 0.002).unwrap();
        let q = &r.states[1000]; // t = 2 s = period/4
        assert!(q[0].abs() < 1e-9, "x {}", q[0]);
        assert!(q[1].abs() < 1e-9, "y {}", q[1]);
        assert!((q[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ramped_references_start_at_rest_and_join_smoothly() {
        for kind in [RefKind::Circle, RefKind::Lemniscate] {
            let spec = RefSpec {
                kind,
                ..circle(3.0, 2.0)
            };
            let r = gen_reference(&spec, 8.0, 0.002).unwrap();
            let s0 = &r.states[0];
            assert!(s0[3].abs() < 1e-12 && s0[4].abs() < 1e-12, "{kind:?}");
            // post-ramp phase advance equals ω·(t − ramp/2)
            let omega = 2.0 * std::f64::consts::PI / spec.period;
            let (phi, dphi) = super::phase_at(5.0, omega, 2.0);
            assert!((phi - omega * 4.0).abs() < 1e-12);
            assert!((dphi - omega).abs() < 1e-15);
        }
    }

    #[test]
    fn generated_velocity_matches_position_derivative() {
        let dt = 0.002;
        for kind in [RefKind::Circle, RefKind::Lemniscate] {
            let spec = RefSpec {
                kind,
                ..circle(3.0, 2.0)
            };
            let r = gen_reference(&spec, 8.0, dt).unwrap();
            let mut worst = 0.0f64;
            for i in 1..r.states.len() - 1 {
                for d in 0..3 {
                    let fd = (r.states[i + 1][d] - r.states[i - 1][d]) / (2.0 * dt);
                    worst = worst.max((fd - r.states[i][3 + d]).abs());
                }
            }
            assert!(worst < 10.0 * dt * dt, "{kind:?} velocity defect {worst}");
        }
    }

    #[test]
    fn reference_validation_rejects_bad_specs() {
        assert!(gen_reference(&circle(-1.0, 0.0), 8.0, 0.002).is_err());
        let zero_period = RefSpec {
            period: 0.0,
            ..circle(1.0, 0.0)
        };
        assert!(gen_reference(&zero_period, 8.0, 0.002).is_err());
        assert!(gen_reference(&circle(1.0, 0.0), 8.001, 0.002).is_err());
        assert!(gen_reference(&circle(1.0, 0.0), 0.0, 0.002).is_err());
    }

    #[test]
    fn spec_ids_are_compact() {
        assert_eq!(circle(3.0, 2.0).id(), "circle-r3");
        assert_eq!(circle(2.5, 2.0).id(), "circle-r2.5");
        let lem = RefSpec {
            kind: RefKind::Lemniscate,
            ..circle(4.0, 2.0)
        };
        assert_eq!(lem.id(), "lemniscate-r4");
    }

    fn pts(vals: &[f64]) -> Vec<Vector3<f64>> {
        vals.iter().map(|v| Vector3::new(*v, 0.0, 0.0)).collect()
    }

    #[test]
    fn dtw_textbook_cases() {
        let r = dtw_distance(&pts(&[0.0]), &pts(&[3.0])).unwrap();
        assert_eq!(r.distance, 3.0);
        assert_eq!(r.path, vec![(0, 0)]);

        let r = dtw_distance(&pts(&[0.0, 1.0, 2.0]), &pts(&[0.0, 2.0])).unwrap();
        assert_eq!(r.distance, 1.0);

        let a = pts(&[0.5, -0.2, 1.1, 0.0]);
        let same = dtw_distance(&a, &a).unwrap();
        assert_eq!(same.distance, 0.0);
        assert_eq!(same.path, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
    }

    /// Every monotone alignment path, scored front-to-back.
    fn brute_force_dtw(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
        fn walk(a: &[Vector3<f64>], b: &[Vector3<f64>], i: usize, j: usize, acc: f64, best: &mut f64) {
            let acc = acc + (a[i] - b[j]).norm();
            if i == a.len() - 1 && j == b.len() - 1 {
                *best = best.min(acc);
                return;
            }
            if i + 1 < a.len() {
                walk(a, b, i + 1, j, acc, best);
            }
            if j + 1 < b.len() {
                walk(a, b, i, j + 1, acc, best);
            }
            if i + 1 < a.len() && j + 1 < b.len() {
                walk(a, b, i + 1, j + 1, acc, best);
            }
        }
        let mut best = f64::INFINITY;
        walk(a, b, 0, 0, 0.0, &mut best);
        best
    }

    #[test]
    fn dtw_equals_exhaustive_enumeration_on_short_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let la = rng.random_range(1..=6);
            let lb = rng.random_range(1..=6);
            let a: Vec<Vector3<f64>> = (0..la)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                    )
                })
                .collect();
            let b: Vec<Vector3<f64>> = (0..lb)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                    )
                })
                .collect();
            let dp = dtw_distance(&a, &b).unwrap().distance;
            let bf = brute_force_dtw(&a, &b);
            assert_eq!(dp, bf, "lengths {la}/{lb}");
        }
    }

    #[test]
    fn dtw_symmetry_and_translation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let a: Vec<Vector3<f64>> = (0..rng.random_range(2..12))
                .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0))
                .collect();
            let b: Vec<Vector3<f64>> = (0..rng.random_range(2..12))
                .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0))
                .collect();
            let ab = dtw_distance(&a, &b).unwrap().distance;
            let ba = dtw_distance(&b, &a).unwrap().distance;
            assert_eq!(ab, ba);
            assert!(ab >= 0.0);

            // translation only perturbs the local costs by rounding
            let shift = Vector3::new(3.7, -1.2, 0.4);
            let a2: Vec<_> = a.iter().map(|p| p + shift).collect();
            let b2: Vec<_> = b.iter().map(|p| p + shift).collect();
            let shifted = dtw_distance(&a2, &b2).unwrap().distance;
            assert!(
                (shifted - ab).abs() <= 1e-12 * ab.max(1.0),
                "{shifted} vs {ab}"
            );
        }
    }

    #[test]
    fn dtw_paths_are_monotone_with_unit_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..30 {
            let a: Vec<Vector3<f64>> = (0..rng.random_range(1..15))
                .map(|_| Vector3::new(rng.random_range(-1.0..1.0), 0.0, 0.0))
                .collect();
            let b: Vec<Vector3<f64>> = (0..rng.random_range(1..15))
                .map(|_| Vector3::new(rng.random_range(-1.0..1.0), 0.0, 0.0))
                .collect();
            let path = dtw_distance(&a, &b).unwrap().path;
            assert_eq!(path[0], (0, 0));
            assert_eq!(*path.last().unwrap(), (a.len() - 1, b.len() - 1));
            for w in path.windows(2) {
                let (di, dj) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
                assert!(matches!((di, dj), (0, 1) | (1, 0) | (1, 1)));
            }
        }
    }

    #[test]
    fn perfect_model_predicts_with_negligible_dtw() {
        // drag-free plant, nominal model: the only error is integrator mismatch
        let params = QuadParams::default();
        let model = NominalModel {
            params: params.clone(),
        };
        let mg = params.mass * params.gravity;
        let mpc = MpcConfig {
            u_max: [2.0 * mg, 0.1, 0.1, 0.1],
            u_ref: [mg, 0.0, 0.0, 0.0],
            ..MpcConfig::default()
        };
        let spec = RefSpec {
            radius: 1.0,
            duration: 2.0,
            ..RefSpec::default()
        };
        let cells = prediction_experiment(
            &[("nominal".to_string(), &model as &dyn DynamicsModel)],
            &model,
            &model,
            &[spec],
            &mpc,
            0.002,
            &SimOptions::default(),
        )
        .unwrap();
        assert_eq!(cells.len(), 1);
        let row = &cells[0].rows[0];
        assert!(row.dtw_raw < 1e-6, "dtw {}", row.dtw_raw);
        assert_eq!(cells[0].ground_truth.len(), 1001);
    }
}
