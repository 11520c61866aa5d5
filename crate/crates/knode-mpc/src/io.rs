//! Disk artifacts: trajectory CSVs, model JSON files, experiment tables, and
//! the run manifest.
//!
//! Model JSON stores every float through the serializer's shortest
//! round-trip representation, so save → load reproduces parameters bit for
//! bit. Trajectory CSVs use a compact 12-significant-digit form instead —
//! they hold physical samples, where formatting quantization is irrelevant
//! but stable, diff-friendly files matter.

use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::MpcStepLog;
use crate::dynamics::{ControlInput, QuadParams, QuadState, Trajectory};
use crate::error::{Error, Result};
use crate::eval::ExperimentRow;
use crate::models::{
    gp_fit, GpDynamics, GpHyperparams, HybridModel, InputScaler, Mlp, ResidualMask,
};
use crate::training::TrainReport;
use nalgebra::{DMatrix, DVector};

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Format like C's `%.12g`: 12 significant digits, trailing zeros trimmed,
/// switching to exponent form (two-digit exponent minimum) outside
/// [1e-4, 1e12).
pub fn fmt_g(v: f64) -> String {
    const P: usize = 12;
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let e_str = format!("{:.*e}", P - 1, v);
    let e_pos = e_str.find('e').unwrap();
    let exp: i32 = e_str[e_pos + 1..].parse().unwrap();
    if exp < -4 || exp >= P as i32 {
        let mantissa = trim_zeros(&e_str[..e_pos]);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (P as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}"))
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

const TRAJECTORY_HEADER: &str =
    "t,x0,x1,x2,x3,x4,x5,x6,x7,x8,x9,x10,x11,u0,u1,u2,u3";

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    traj.validate()?;
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut line = String::with_capacity(256);
    writeln!(w, "{TRAJECTORY_HEADER}").map_err(|e| io_err(path, e))?;
    for i in 0..traj.len() {
        line.clear();
        line.push_str(&fmt_g(traj.times[i]));
        let x = traj.states[i].as_vec();
        for d in 0..12 {
            line.push(',');
            line.push_str(&fmt_g(x[d]));
        }
        let u = traj.inputs[i].as_vec();
        for k in 0..4 {
            line.push(',');
            line.push_str(&fmt_g(u[k]));
        }
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_trajectory_csv(path: &Path) -> Result<Trajectory> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == TRAJECTORY_HEADER => {}
        other => {
            return Err(Error::Invalid(format!(
                "{}: expected header `{TRAJECTORY_HEADER}`, found {:?}",
                path.display(),
                other.unwrap_or("")
            )))
        }
    }
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut inputs = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut vals = [0.0f64; 17];
        let mut count = 0;
        for (k, cell) in line.split(',').enumerate() {
            if k >= 17 {
                count = k + 1;
                break;
            }
            vals[k] = cell.trim().parse::<f64>().map_err(|_| {
                Error::Invalid(format!(
                    "{}:{}: unparseable number `{}`",
                    path.display(),
                    lineno + 2,
                    cell
                ))
            })?;
            count = k + 1;
        }
        if count != 17 {
            return Err(Error::Invalid(format!(
                "{}:{}: expected 17 columns, found {count}",
                path.display(),
                lineno + 2
            )));
        }
        times.push(vals[0]);
        let mut x = crate::dynamics::StateVec::zeros();
        x.copy_from_slice(&vals[1..13]);
        states.push(QuadState::from_vec(&x));
        let u = ControlInput {
            thrust: vals[13],
            moment: nalgebra::Vector3::new(vals[14], vals[15], vals[16]),
        };
        u.validate().map_err(|e| {
            Error::Invalid(format!("{}:{}: {e}", path.display(), lineno + 2))
        })?;
        inputs.push(u);
    }
    let traj = Trajectory {
        times,
        states,
        inputs,
    };
    traj.validate()?;
    Ok(traj)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Invalid(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

/// Sidecar describing how a trajectory file was produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub spec: String,
    pub controller: String,
    pub duration: f64,
    pub dt: f64,
    pub rows: usize,
    pub config_sha256: String,
}

/// Serialized hybrid model (network, input scaler, mask, plant parameters).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnodeModelFile {
    pub format: String,
    pub params: QuadParams,
    pub layer_sizes: Vec<usize>,
    pub weights_flat: Vec<f64>,
    pub scaler_mean: Vec<f64>,
    pub scaler_std: Vec<f64>,
    pub residual_mask: Vec<bool>,
}

pub const KNODE_FORMAT: &str = "knode-mlp-v1";

impl KnodeModelFile {
    pub fn from_model(model: &HybridModel) -> Self {
        KnodeModelFile {
            format: KNODE_FORMAT.to_string(),
            params: model.params.clone(),
            layer_sizes: model.net.sizes().to_vec(),
            weights_flat: model.net.flat_params().iter().copied().collect(),
            scaler_mean: model.scaler.mean.iter().copied().collect(),
            scaler_std: model.scaler.std.iter().copied().collect(),
            residual_mask: model.mask.to_vec(),
        }
    }

    pub fn into_model(self) -> Result<HybridModel> {
        if self.format != KNODE_FORMAT {
            return Err(Error::Invalid(format!(
                "unsupported model format `{}`",
                self.format
            )));
        }
        let mut net = Mlp::zeros(&self.layer_sizes)?;
        net.set_flat_params(&DVector::from_vec(self.weights_flat))?;
        let scaler = InputScaler {
            mean: DVector::from_vec(self.scaler_mean),
            std: DVector::from_vec(self.scaler_std),
        };
        scaler.validate()?;
        let mask: ResidualMask = self
            .residual_mask
            .as_slice()
            .try_into()
            .map_err(|_| Error::Invalid("residual mask must have 12 entries".into()))?;
        HybridModel::new(self.params, net, scaler, mask)
    }
}

/// Serialized GP baseline: kernel plus the exact training arrays; the
/// factorization is rebuilt deterministically on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpModelFile {
    pub format: String,
    pub params: QuadParams,
    pub variance: f64,
    pub length_scale: f64,
    pub noise_std: f64,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

pub const GP_FORMAT: &str = "gp-rbf-v1";

impl GpModelFile {
    pub fn from_model(model: &GpDynamics) -> Self {
        let to_rows = |m: &DMatrix<f64>| {
            (0..m.nrows())
                .map(|r| m.row(r).iter().copied().collect())
                .collect()
        };
        GpModelFile {
            format: GP_FORMAT.to_string(),
            params: model.params.clone(),
            variance: model.gp.kernel.variance,
            length_scale: model.gp.kernel.length_scale,
            noise_std: model.gp.kernel.noise_std,
            inputs: to_rows(model.gp.inputs()),
            targets: to_rows(model.gp.targets()),
        }
    }

    pub fn into_model(self) -> Result<GpDynamics> {
        if self.format != GP_FORMAT {
            return Err(Error::Invalid(format!(
                "unsupported model format `{}`",
                self.format
            )));
        }
        let rows = self.inputs.len();
        if rows == 0 || self.targets.len() != rows {
            return Err(Error::Invalid("gp model file has mismatched arrays".into()));
        }
        let cols_in = self.inputs[0].len();
        let cols_out = self.targets[0].len();
        if self.inputs.iter().any(|r| r.len() != cols_in)
            || self.targets.iter().any(|r| r.len() != cols_out)
        {
            return Err(Error::Invalid("gp model file has ragged arrays".into()));
        }
        let inputs = DMatrix::from_fn(rows, cols_in, |r, c| self.inputs[r][c]);
        let targets = DMatrix::from_fn(rows, cols_out, |r, c| self.targets[r][c]);
        let gp = gp_fit(
            inputs,
            targets,
            GpHyperparams::Fixed {
                variance: self.variance,
                length_scale: self.length_scale,
            },
            self.noise_std,
        )?;
        GpDynamics::new(self.params, gp)
    }
}

const TABLE_HEADER: &str = "spec,model,dtw_raw,dtw_normalized,rmse";

pub fn write_experiment_table(path: &Path, rows: &[ExperimentRow]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{TABLE_HEADER}").map_err(|e| io_err(path, e))?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.spec,
            r.model,
            fmt_g(r.dtw_raw),
            fmt_g(r.dtw_normalized),
            fmt_g(r.rmse)
        )
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_solver_log(path: &Path, logs: &[MpcStepLog]) -> Result<()> {
    save_json(path, &logs)
}

pub fn write_train_report(path: &Path, report: &TrainReport) -> Result<()> {
    save_json(path, report)
}

/// Everything needed to reproduce a run: configuration hash, seed, version,
/// and the artifacts written.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub artifacts: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{
        rk45_simulate, DragParams, QuadParams, SimOptions, TruePlant,
    };
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fmt_g_matches_c_reference_cases() {
        // expectations follow C's printf("%.12g", …)
        for (v, s) in [
            (0.0, "0"),
            (-0.0, "-0"),
            (1.0, "1"),
            (-1.0, "-1"),
            (0.002, "0.002"),
            (9.81, "9.81"),
            (0.1, "0.1"),
            (1.0 / 3.0, "0.333333333333"),
            (123456.789, "123456.789"),
            (1e-5, "1e-05"),
            (-3.25e20, "-3.25e+20"),
            (1e12, "1e+12"),
            (1e11, "100000000000"),
            (999999999999.5, "1e+12"),
            (1.5e-4, "0.00015"),
            // rounds up to 1e-4, and %g re-derives the exponent after rounding
            (9.99999999999951e-5, "0.0001"),
            (-0.25, "-0.25"),
            (4.905, "4.905"),
        ] {
            assert_eq!(fmt_g(v), s, "formatting {v:e}");
        }
    }

    proptest! {
        #[test]
        fn fmt_g_round_trips_to_twelve_digits(v in prop::num::f64::NORMAL) {
            let s = fmt_g(v);
            let parsed: f64 = s.parse().unwrap();
            let rel = ((parsed - v) / v).abs();
            prop_assert!(rel < 1e-11, "{v} -> {s} -> {parsed}");
            // trimmed: no trailing zeros after a decimal point
            if let Some(mantissa) = s.split('e').next() {
                if mantissa.contains('.') {
                    prop_assert!(!mantissa.ends_with('0'));
                }
            }
            // exponent form always carries a sign and two or three digits
            if let Some(exp) = s.split('e').nth(1) {
                prop_assert!(exp.starts_with('+') || exp.starts_with('-'));
                prop_assert!(exp.len() >= 3);
            }
        }
    }

    fn sample_trajectory() -> Trajectory {
        let params = QuadParams::default();
        let plant = TruePlant {
            params: params.clone(),
            drag: DragParams::default(),
        };
        let schedule = move |_: usize, t: f64| ControlInput {
            thrust: params.hover_thrust() * (1.0 + 0.05 * (3.0 * t).sin()),
            moment: Vector3::new(1e-4 * t.sin(), -1e-4 * t.cos(), 5e-5),
        };
        rk45_simulate(
            &plant,
            &QuadState::hover_at(Vector3::new(0.3, -0.2, 1.1)),
            &schedule,
            0.1,
            0.002,
            &SimOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn trajectory_csv_round_trips_within_formatting_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        let traj = sample_trajectory();
        write_trajectory_csv(&path, &traj).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("t,x0,"));
        assert_eq!(text.lines().count(), traj.len() + 1);

        let back = read_trajectory_csv(&path).unwrap();
        assert_eq!(back.len(), traj.len());
        for i in 0..traj.len() {
            let a = traj.states[i].as_vec();
            let b = back.states[i].as_vec();
            for d in 0..12 {
                let scale = a[d].abs().max(1.0);
                assert!((a[d] - b[d]).abs() < 1e-11 * scale, "row {i} dim {d}");
            }
            assert!((traj.inputs[i].thrust - back.inputs[i].thrust).abs() < 1e-11 * 10.0);
        }
    }

    #[test]
    fn trajectory_csv_rejects_malformed_input() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, content: &str| {
            let p = dir.path().join(name);
            std::fs::write(&p, content).unwrap();
            p
        };
        let bad_header = write("h.csv", "time,x0\n0,1\n");
        assert!(matches!(
            read_trajectory_csv(&bad_header),
            Err(Error::Invalid(_))
        ));

        let ragged = write(
            "r.csv",
            &format!("{TRAJECTORY_HEADER}\n0,1,2,3\n"),
        );
        assert!(read_trajectory_csv(&ragged).is_err());

        let nan_cell = write(
            "n.csv",
            &format!(
                "{TRAJECTORY_HEADER}\n0{}\n",
                ",oops".repeat(16)
            ),
        );
        assert!(read_trajectory_csv(&nan_cell).is_err());

        // negative thrust rejected at ingestion
        let neg = write(
            "t.csv",
            &format!(
                "{TRAJECTORY_HEADER}\n0{},-1,0,0,0\n0.002{},1,0,0,0\n",
                ",0".repeat(12),
                ",0".repeat(12)
            ),
        );
        assert!(read_trajectory_csv(&neg).is_err());

        assert!(matches!(
            read_trajectory_csv(&dir.path().join("missing.csv")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn knode_model_file_round_trips_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut net = Mlp::random(&[16, 10, 12], 9).unwrap();
        let flat = DVector::from_fn(net.num_params(), |_, _| rng.random_range(-0.5..0.5));
        net.set_flat_params(&flat).unwrap();
        let mut mask = [true; 12];
        mask[7] = false;
        let scaler = InputScaler {
            mean: DVector::from_fn(16, |i, _| i as f64 * 0.1 - 0.3),
            std: DVector::from_fn(16, |i, _| 0.5 + i as f64 * 0.01),
        };
        let model =
            HybridModel::new(QuadParams::default(), net, scaler, mask).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("knode.json");
        save_json(&path, &KnodeModelFile::from_model(&model)).unwrap();
        let loaded: KnodeModelFile = load_json(&path).unwrap();
        let back = loaded.into_model().unwrap();

        let (a, b) = (model.net.flat_params(), back.net.flat_params());
        assert_eq!(a.len(), b.len());
        for i in 0..a.len() {
            assert_eq!(a[i].to_bits(), b[i].to_bits(), "param {i}");
        }
        for i in 0..16 {
            assert_eq!(model.scaler.mean[i].to_bits(), back.scaler.mean[i].to_bits());
            assert_eq!(model.scaler.std[i].to_bits(), back.scaler.std[i].to_bits());
        }
        assert_eq!(model.mask, back.mask);
    }

    #[test]
    fn gp_model_file_round_trips_predictions_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let inputs = DMatrix::from_fn(15, 16, |_, _| rng.random_range(-1.0..1.0));
        let targets = DMatrix::from_fn(15, 12, |_, _| rng.random_range(-0.5..0.5));
        let gp = gp_fit(
            inputs,
            targets,
            GpHyperparams::Fixed {
                variance: 0.8,
                length_scale: 2.0,
            },
            1e-4,
        )
        .unwrap();
        let model = GpDynamics::new(QuadParams::default(), gp).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gp.json");
        save_json(&path, &GpModelFile::from_model(&model)).unwrap();
        let back: GpModelFile = load_json(&path).unwrap();
        let restored = back.into_model().unwrap();

        let q = DVector::from_fn(16, |i, _| (i as f64 * 0.37).sin());
        let a = crate::models::gp_predict_mean(&model.gp, &q).unwrap();
        let b = crate::models::gp_predict_mean(&restored.gp, &q).unwrap();
        for d in 0..12 {
            assert_eq!(a[d].to_bits(), b[d].to_bits(), "dim {d}");
        }
    }

    #[test]
    fn experiment_table_layout() {
        let rows = vec![
            ExperimentRow {
                spec: "circle-r3".into(),
                model: "knode".into(),
                dtw_raw: 12.25,
                dtw_normalized: 0.0030625,
                rmse: 0.01,
            },
            ExperimentRow {
                spec: "circle-r3".into(),
                model: "nominal".into(),
                dtw_raw: 150.0,
                dtw_normalized: 0.0375,
                rmse: 0.11,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.csv");
        write_experiment_table(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let expect = "spec,model,dtw_raw,dtw_normalized,rmse\n\
                      circle-r3,knode,12.25,0.0030625,0.01\n\
                      circle-r3,nominal,150,0.0375,0.11\n";
        assert_eq!(text, expect);
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn json_helpers_report_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing: Result<Manifest> = load_json(&dir.path().join("nope.json"));
        assert!(matches!(missing, Err(Error::Io { .. })));
        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, "{not json").unwrap();
        let malformed: Result<Manifest> = load_json(&bad);
        assert!(matches!(malformed, Err(Error::Invalid(_))));
    }
}
