//! Run configuration: one TOML document covering the plant, data collection,
//! training, the controller, and the experiment suites.
//!
//! Loading merges the file over the built-in defaults, then applies `--set
//! key.path=value` overrides, and only then deserializes — so partial
//! sections work while unknown keys are still rejected. Every command writes
//! the fully-resolved document next to its outputs; its SHA-256 is the run's
//! config hash.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{DragParams, QuadParams, SimOptions};
use crate::error::{Error, Result};
use crate::eval::{RefKind, RefSpec};
use crate::io::{fmt_g, sha256_hex};
use crate::models::GpHyperparams;
use crate::training::TrainConfig;
use crate::control::MpcConfig;

/// Which trajectories are flown to produce training and validation data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: Vec<RefSpec>,
    pub val: RefSpec,
}

fn circle(radius: f64, period: f64) -> RefSpec {
    RefSpec {
        kind: RefKind::Circle,
        radius,
        period,
        ..RefSpec::default()
    }
}

fn lemniscate(radius: f64, period: f64) -> RefSpec {
    RefSpec {
        kind: RefKind::Lemniscate,
        radius,
        period,
        ..RefSpec::default()
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: vec![circle(3.0, 8.0), circle(6.0, 8.0)],
            val: circle(4.0, 8.0),
        }
    }
}

/// Gaussian-process baseline settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpConfig {
    /// Training points kept (uniform stride over the pooled dataset).
    pub points: usize,
    pub noise_std: f64,
    /// Fixed kernel variance; grid-searched when absent.
    pub variance: Option<f64>,
    /// Fixed kernel length scale; grid-searched when absent.
    pub length_scale: Option<f64>,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            points: 80,
            noise_std: 1e-4,
            variance: None,
            length_scale: None,
        }
    }
}

impl GpConfig {
    pub fn hyperparams(&self) -> Result<GpHyperparams> {
        match (self.variance, self.length_scale) {
            (Some(variance), Some(length_scale)) => Ok(GpHyperparams::Fixed {
                variance,
                length_scale,
            }),
            (None, None) => Ok(GpHyperparams::GridSearch),
            _ => Err(Error::Config(
                "gp.variance and gp.length_scale must be set together".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points < 2 {
            return Err(Error::Config("gp.points must be at least 2".into()));
        }
        if !(self.noise_std.is_finite() && self.noise_std > 0.0) {
            return Err(Error::Config("gp.noise_std must be positive".into()));
        }
        for (name, v) in [("variance", self.variance), ("length_scale", self.length_scale)] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::Config(format!("gp.{name} must be positive")));
                }
            }
        }
        self.hyperparams().map(|_| ())
    }
}

/// Which references the prediction and tracking studies cover.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub prediction: Vec<RefSpec>,
    pub tracking: Vec<RefSpec>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        // Periods scale with radius so commanded speed and centripetal
        // acceleration stay inside the envelope the training circles covered;
        // a model only has to interpolate the drag regime, not extrapolate it.
        // Open-loop replay compounds model error exponentially, so the
        // prediction study uses a shorter window than closed-loop tracking.
        let short = |spec: RefSpec| RefSpec {
            duration: 4.0,
            ..spec
        };
        let prediction = vec![
            short(circle(2.0, 5.0)),
            short(circle(3.0, 8.0)),
            short(circle(4.0, 8.0)),
            short(circle(6.0, 8.0)),
            short(circle(8.0, 12.0)),
            short(lemniscate(4.0, 10.0)),
            short(lemniscate(6.0, 12.0)),
            short(lemniscate(8.0, 16.0)),
        ];
        let tracking = vec![
            circle(1.0, 4.0),
            circle(2.0, 5.0),
            circle(4.0, 8.0),
            circle(8.0, 12.0),
        ];
        EvalConfig {
            prediction,
            tracking,
        }
    }
}

/// The whole experiment protocol, as read from (and written back to) TOML.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    /// Ground-truth integration grid, s.
    pub plant_dt: f64,
    pub quad: QuadParams,
    pub drag: DragParams,
    pub sim: SimOptions,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub gp: GpConfig,
    pub mpc: MpcConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: "out".into(),
            plant_dt: 0.002,
            quad: QuadParams::default(),
            drag: DragParams::default(),
            sim: SimOptions::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            gp: GpConfig::default(),
            mpc: MpcConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Load from an optional file plus `key.path=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut value = toml::Value::try_from(RunConfig::default())
            .map_err(|e| Error::Config(format!("serializing defaults: {e}")))?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            let file_value: toml::Value = text
                .parse()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, file_value);
        }
        for spec in overrides {
            apply_set(&mut value, spec)?;
        }
        let config: RunConfig = value
            .try_into()
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.quad.validate()?;
        if self
            .drag
            .linear
            .iter()
            .chain(&self.drag.quadratic)
            .any(|c| !c.is_finite() || *c < 0.0)
        {
            return Err(Error::Config(
                "drag coefficients must be finite and non-negative".into(),
            ));
        }
        if !(self.plant_dt.is_finite() && self.plant_dt > 0.0) {
            return Err(Error::Config("plant_dt must be positive".into()));
        }
        self.train.validate()?;
        self.gp.validate()?;
        self.mpc.validate()?;
        let ratio = self.mpc.dt / self.plant_dt;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 - 1e-9 {
            return Err(Error::Config(format!(
                "mpc.dt = {} must be a positive multiple of plant_dt = {}",
                self.mpc.dt, self.plant_dt
            )));
        }
        if self.data.train.is_empty() {
            return Err(Error::Config("data.train must list at least one spec".into()));
        }
        for spec in self
            .data
            .train
            .iter()
            .chain(std::iter::once(&self.data.val))
            .chain(&self.eval.prediction)
            .chain(&self.eval.tracking)
        {
            spec.validate()?;
            // every spec is flown or scored on both grids
            for (grid, dt) in [("mpc.dt", self.mpc.dt), ("plant_dt", self.plant_dt)] {
                let steps = spec.duration / dt;
                if (steps - steps.round()).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "spec `{}`: duration {} is not a multiple of {grid} = {dt}",
                        spec.id(),
                        spec.duration
                    )));
                }
            }
        }
        for (name, list) in [
            ("data.train", &self.data.train),
            ("eval.prediction", &self.eval.prediction),
            ("eval.tracking", &self.eval.tracking),
        ] {
            let mut seen = std::collections::BTreeSet::new();
            for spec in list {
                if !seen.insert(spec.id()) {
                    return Err(Error::Config(format!(
                        "{name} lists `{}` more than once",
                        spec.id()
                    )));
                }
            }
        }
        if self.out_dir.is_empty() {
            return Err(Error::Config("out_dir must not be empty".into()));
        }
        Ok(())
    }

    /// The fully-resolved document; its hash identifies the run.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    /// Hash of the experiment definition. The output location is normalized
    /// away first so relocating a run does not change its identity.
    pub fn sha256(&self) -> Result<String> {
        let mut normalized = self.clone();
        normalized.out_dir = "out".into();
        Ok(sha256_hex(normalized.to_toml()?.as_bytes()))
    }

    /// File stem for a collected trajectory, e.g. `train-r3` / `val-r4`.
    pub fn data_stem(role: &str, spec: &RefSpec) -> String {
        format!("{role}-r{}", fmt_g(spec.radius))
    }
}

/// Recursively overlay `incoming` on `base`: tables merge key-wise, every
/// other value (including arrays) replaces the default wholesale.
fn merge(base: &mut toml::Value, incoming: toml::Value) {
    match (base, incoming) {
        (toml::Value::Table(base), toml::Value::Table(incoming)) => {
            for (key, value) in incoming {
                match base.get_mut(&key) {
                    Some(slot) => merge(slot, value),
                    None => {
                        base.insert(key, value);
                    }
                }
            }
        }
        (slot, incoming) => *slot = incoming,
    }
}

/// Apply one `key.path=value` override; the value is parsed as TOML, falling
/// back to a bare string.
fn apply_set(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{spec}`")))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(Error::Config(format!("--set has an empty key in `{spec}`")));
    }
    let value = parse_override(raw.trim());

    let mut node = root;
    let mut segments = path.split('.').peekable();
    while let Some(segment) = segments.next() {
        if segment.is_empty() {
            return Err(Error::Config(format!("--set key `{path}` has an empty segment")));
        }
        let table = node.as_table_mut().ok_or_else(|| {
            Error::Config(format!("--set key `{path}` descends into a non-table"))
        })?;
        if segments.peek().is_none() {
            table.insert(segment.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    unreachable!("split('.') yields at least one segment");
}

fn parse_override(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Value>() {
        Ok(toml::Value::Table(mut t)) => t.remove("v").unwrap(),
        _ => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let config = RunConfig::default();
        config.validate().unwrap();
        let text = config.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.seed, config.seed);
        assert_eq!(back.data.train.len(), 2);
        assert_eq!(back.eval.prediction.len(), 8);
        assert_eq!(back.eval.tracking.len(), 4);
        assert_eq!(back.gp.points, 80);
        assert_eq!(back.mpc.horizon, config.mpc.horizon);
        assert_eq!(back.sha256().unwrap(), config.sha256().unwrap());
    }

    #[test]
    fn partial_file_overrides_only_named_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 7\n[quad]\nmass = 0.75\n[train]\nepochs = 3\n")
            .unwrap();
        let config = RunConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.quad.mass, 0.75);
        assert_eq!(config.train.epochs, 3);
        // untouched keys keep defaults
        assert_eq!(config.quad.gravity, 9.81);
        assert_eq!(config.mpc.horizon, MpcConfig::default().horizon);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "sede = 7\n").unwrap();
        let err = RunConfig::load(Some(&path), &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        std::fs::write(&path, "[mpc]\nhorizn = 10\n").unwrap();
        assert!(RunConfig::load(Some(&path), &[]).is_err());
    }

    #[test]
    fn set_overrides_apply_and_are_typed() {
        let sets = vec![
            "seed=9".to_string(),
            "mpc.horizon=12".to_string(),
            "train.hidden=[8, 4]".to_string(),
            "out_dir=elsewhere".to_string(),
            "data.val.radius=5.0".to_string(),
        ];
        let config = RunConfig::load(None, &sets).unwrap();
        assert_eq!(config.seed, 9);
        assert_eq!(config.mpc.horizon, 12);
        assert_eq!(config.train.hidden, vec![8, 4]);
        assert_eq!(config.out_dir, "elsewhere");
        assert_eq!(config.data.val.radius, 5.0);
    }

    #[test]
    fn set_rejects_malformed_and_unknown() {
        assert!(RunConfig::load(None, &["no_equals".into()]).is_err());
        assert!(RunConfig::load(None, &["=5".into()]).is_err());
        assert!(RunConfig::load(None, &["mpc.no_such=1".into()]).is_err());
        // descending through a scalar
        assert!(RunConfig::load(None, &["seed.deep=1".into()]).is_err());
    }

    #[test]
    fn validation_rejects_inconsistent_grids() {
        assert!(RunConfig::load(None, &["mpc.dt=0.003".into()]).is_err());
        assert!(RunConfig::load(None, &["plant_dt=0.0".into()]).is_err());
        assert!(RunConfig::load(None, &["gp.points=1".into()]).is_err());
        assert!(RunConfig::load(None, &["gp.variance=1.0".into()]).is_err());
        let both = vec!["gp.variance=1.0".into(), "gp.length_scale=2.0".into()];
        let config = RunConfig::load(None, &both).unwrap();
        assert!(matches!(
            config.gp.hyperparams().unwrap(),
            GpHyperparams::Fixed { .. }
        ));
    }

    #[test]
    fn data_stems_match_protocol_names() {
        let config = RunConfig::default();
        assert_eq!(RunConfig::data_stem("train", &config.data.train[0]), "train-r3");
        assert_eq!(RunConfig::data_stem("train", &config.data.train[1]), "train-r6");
        assert_eq!(RunConfig::data_stem("val", &config.data.val), "val-r4");
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = RunConfig::load(Some(Path::new("/nonexistent/x.toml")), &[]).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
