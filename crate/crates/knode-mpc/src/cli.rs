//! Command-line pipeline: collect closed-loop data, fit the hybrid and GP
//! models, and run the prediction / tracking studies.
//!
//! Every command resolves one configuration (file + `--set` overrides +
//! dedicated flags), writes its artifacts under `out_dir`, and finishes by
//! dumping the fully-resolved config and a manifest. All artifacts are
//! byte-deterministic for a given configuration; wall-clock timings go to
//! stderr only.

use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::control::closed_loop_simulate;
use crate::dynamics::{
    state_error, DynamicsModel, NominalModel, Trajectory, TruePlant,
};
use crate::error::{Error, Result};
use crate::eval::{
    gen_reference, prediction_experiment, tracking_experiment, RefSpec,
};
use crate::io::{
    ensure_dir, load_json, save_json, write_experiment_table, write_trajectory_csv,
    GpModelFile, KnodeModelFile, Manifest, TrajectoryMeta,
};
use crate::models::{gp_fit, GpDynamics, HybridModel};
use crate::training::{init_hybrid, train_knode, Dataset};

#[derive(Debug, Parser)]
#[command(
    name = "knode-mpc",
    version,
    about = "Hybrid quadrotor dynamics learning with tracking MPC, in simulation"
)]
pub struct Cli {
    /// Configuration file (TOML); built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Dotted-key override, repeatable: --set mpc.horizon=30
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Master seed; overrides both `seed` and `train.seed`.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Fly the data-collection references closed-loop and write CSVs.
    Generate,
    /// Fit a model from the collected trajectories.
    Train {
        #[arg(long, value_enum, default_value_t = ModelChoice::Knode)]
        model: ModelChoice,
    },
    /// Run the prediction and tracking studies against the trained models.
    Evaluate,
    /// Generate, train both learned models, and evaluate, in one invocation.
    RunAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelChoice {
    Knode,
    Gp,
    Nominal,
}

/// Resolve the configuration and dispatch; returns only after the manifest
/// and resolved config are on disk.
pub fn run(cli: Cli) -> Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref(), &cli.sets)?;
    if let Some(out) = &cli.out {
        config.out_dir = out.display().to_string();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.train.seed = seed;
    }
    config.validate()?;
    let artifacts = match &cli.command {
        Command::Generate => cmd_generate(&config)?,
        Command::Train { model } => cmd_train(&config, *model)?,
        Command::Evaluate => cmd_evaluate(&config)?,
        Command::RunAll => cmd_run_all(&config)?,
    };
    finish(&config, artifacts)
}

pub fn cmd_run_all(config: &RunConfig) -> Result<Vec<String>> {
    let mut artifacts = cmd_generate(config)?;
    artifacts.extend(cmd_train(config, ModelChoice::Knode)?);
    artifacts.extend(cmd_train(config, ModelChoice::Gp)?);
    artifacts.extend(cmd_evaluate(config)?);
    Ok(artifacts)
}

fn out_root(config: &RunConfig) -> PathBuf {
    PathBuf::from(&config.out_dir)
}

fn subdir(config: &RunConfig, name: &str) -> Result<PathBuf> {
    let dir = out_root(config).join(name);
    ensure_dir(&dir)?;
    Ok(dir)
}

/// Fly every training/validation reference with the nominal controller
/// against the drag plant; one CSV plus one metadata sidecar per spec.
pub fn cmd_generate(config: &RunConfig) -> Result<Vec<String>> {
    let started = Instant::now();
    let data_dir = subdir(config, "data")?;
    let plant = TruePlant {
        params: config.quad,
        drag: config.drag,
    };
    let controller = NominalModel {
        params: config.quad,
    };
    let hash = config.sha256()?;

    let mut jobs: Vec<(String, &RefSpec)> = config
        .data
        .train
        .iter()
        .map(|s| (RunConfig::data_stem("train", s), s))
        .collect();
    jobs.push((RunConfig::data_stem("val", &config.data.val), &config.data.val));

    let flights: Vec<(String, Trajectory)> = jobs
        .par_iter()
        .map(|(stem, spec)| {
            let reference = gen_reference(
                spec,
                spec.duration + config.mpc.horizon as f64 * config.mpc.dt,
                config.mpc.dt,
            )?;
            let flown = closed_loop_simulate(
                &controller,
                &plant,
                &reference,
                spec.duration,
                &config.mpc,
                config.plant_dt,
                &config.sim,
            )?;
            Ok((stem.clone(), flown.trajectory))
        })
        .collect::<Result<_>>()?;

    let mut artifacts = Vec::new();
    for ((stem, trajectory), (_, spec)) in flights.iter().zip(&jobs) {
        let csv = data_dir.join(format!("{stem}.csv"));
        write_trajectory_csv(&csv, trajectory)?;
        let meta = TrajectoryMeta {
            spec: spec.id(),
            controller: "nominal-mpc".into(),
            duration: spec.duration,
            dt: config.plant_dt,
            rows: trajectory.len(),
            config_sha256: hash.clone(),
        };
        save_json(&data_dir.join(format!("{stem}.meta.json")), &meta)?;
        artifacts.push(format!("data/{stem}.csv"));
        artifacts.push(format!("data/{stem}.meta.json"));
        eprintln!("generate: {stem} ({} rows)", trajectory.len());
    }
    eprintln!("generate: done in {:.1}s", started.elapsed().as_secs_f64());
    Ok(artifacts)
}

fn load_collected(config: &RunConfig) -> Result<(Vec<Trajectory>, Trajectory)> {
    let data_dir = out_root(config).join("data");
    let mut trains = Vec::new();
    for spec in &config.data.train {
        let stem = RunConfig::data_stem("train", spec);
        trains.push(crate::io::read_trajectory_csv(
            &data_dir.join(format!("{stem}.csv")),
        )?);
    }
    let val_stem = RunConfig::data_stem("val", &config.data.val);
    let val = crate::io::read_trajectory_csv(&data_dir.join(format!("{val_stem}.csv")))?;
    Ok((trains, val))
}

pub fn cmd_train(config: &RunConfig, which: ModelChoice) -> Result<Vec<String>> {
    match which {
        ModelChoice::Knode => train_knode_cmd(config),
        ModelChoice::Gp => train_gp_cmd(config),
        ModelChoice::Nominal => Err(Error::Config(
            "the nominal model has no trainable parameters".into(),
        )),
    }
}

fn train_knode_cmd(config: &RunConfig) -> Result<Vec<String>> {
    let started = Instant::now();
    let (trains, val) = load_collected(config)?;
    let train_set = Dataset::from_trajectories(&trains, config.train.stride)?;
    let val_set = Dataset::from_trajectories(std::slice::from_ref(&val), 1)?;
    let init = init_hybrid(&config.quad, &train_set, &config.train)?;
    let (model, report) = train_knode(init, &train_set, &val_set, &config.train)?;

    let models_dir = subdir(config, "models")?;
    save_json(
        &models_dir.join("knode.json"),
        &KnodeModelFile::from_model(&model),
    )?;
    save_json(&models_dir.join("train_report.json"), &report)?;
    eprintln!(
        "train knode: {} segments, val {:.3e} -> {:.3e} (best epoch {}), {:.1}s",
        train_set.len(),
        report.initial_val_loss,
        report.best_val_loss,
        report.best_epoch,
        started.elapsed().as_secs_f64(),
    );
    Ok(vec![
        "models/knode.json".into(),
        "models/train_report.json".into(),
    ])
}

/// Residual-derivative regression set for the GP baseline: inputs are the
/// raw `[state; input]` vectors at interior samples, targets the central
/// finite-difference derivative minus the nominal model, thinned to exactly
/// `gp.points` rows at uniform stride.
fn gp_training_set(
    config: &RunConfig,
    trajectories: &[Trajectory],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let nominal = NominalModel {
        params: config.quad,
    };
    let mut rows = Vec::new();
    for traj in trajectories {
        traj.validate()?;
        for i in 1..traj.len().saturating_sub(1) {
            let span = traj.times[i + 1] - traj.times[i - 1];
            if !(span > 0.0) {
                return Err(Error::Invalid("non-increasing trajectory times".into()));
            }
            let fd = state_error(&traj.states[i + 1].as_vec(), &traj.states[i - 1].as_vec())
                / span;
            let residual = fd - nominal.derivative(&traj.states[i], &traj.inputs[i])?;
            rows.push((
                HybridModel::raw_input(&traj.states[i], &traj.inputs[i]),
                residual,
            ));
        }
    }
    let total = rows.len();
    let m = config.gp.points;
    if total < m {
        return Err(Error::Config(format!(
            "gp.points = {m} exceeds the {total} available samples"
        )));
    }
    let mut inputs = DMatrix::zeros(m, 16);
    let mut targets = DMatrix::zeros(m, 12);
    for k in 0..m {
        let (z, r) = &rows[k * total / m];
        inputs.row_mut(k).copy_from_slice(z.as_slice());
        targets.row_mut(k).copy_from_slice(r.as_slice());
    }
    Ok((inputs, targets))
}

fn train_gp_cmd(config: &RunConfig) -> Result<Vec<String>> {
    let started = Instant::now();
    let (trains, _) = load_collected(config)?;
    let (inputs, targets) = gp_training_set(config, &trains)?;
    let gp = gp_fit(inputs, targets, config.gp.hyperparams()?, config.gp.noise_std)?;
    let model = GpDynamics::new(config.quad, gp)?;

    let models_dir = subdir(config, "models")?;
    save_json(&models_dir.join("gp.json"), &GpModelFile::from_model(&model))?;
    eprintln!(
        "train gp: {} points, variance {:.3e}, length scale {:.3e}, lml {:.3}, {:.1}s",
        model.gp.num_points(),
        model.gp.kernel.variance,
        model.gp.kernel.length_scale,
        model.gp.log_marginal_likelihood(),
        started.elapsed().as_secs_f64(),
    );
    Ok(vec!["models/gp.json".into()])
}

/// Run both studies with the nominal, GP, and hybrid models and dump every
/// table, trajectory, and solver log.
pub fn cmd_evaluate(config: &RunConfig) -> Result<Vec<String>> {
    let models_dir = out_root(config).join("models");
    let knode: HybridModel =
        load_json::<KnodeModelFile>(&models_dir.join("knode.json"))?.into_model()?;
    let gp: GpDynamics =
        load_json::<GpModelFile>(&models_dir.join("gp.json"))?.into_model()?;
    let nominal = NominalModel {
        params: config.quad,
    };
    let plant = TruePlant {
        params: config.quad,
        drag: config.drag,
    };
    let eval_dir = subdir(config, "eval")?;
    let mut artifacts = Vec::new();

    let started = Instant::now();
    let models: Vec<(String, &dyn DynamicsModel)> = vec![
        ("nominal".into(), &nominal),
        ("gp".into(), &gp),
        ("knode".into(), &knode),
    ];
    let cells = prediction_experiment(
        &models,
        &nominal,
        &plant,
        &config.eval.prediction,
        &config.mpc,
        config.plant_dt,
        &config.sim,
    )?;
    let mut rows = Vec::new();
    let mut onestep_rows = Vec::new();
    for cell in &cells {
        rows.extend_from_slice(&cell.rows);
        onestep_rows.extend_from_slice(&cell.onestep_rows);
        let truth = format!("pred-{}-truth.csv", cell.spec);
        write_trajectory_csv(&eval_dir.join(&truth), &cell.ground_truth)?;
        artifacts.push(format!("eval/{truth}"));
        for (name, trajectory) in &cell.predictions {
            let file = format!("pred-{}-{name}.csv", cell.spec);
            write_trajectory_csv(&eval_dir.join(&file), trajectory)?;
            artifacts.push(format!("eval/{file}"));
        }
    }
    write_experiment_table(&eval_dir.join("predictions.csv"), &rows)?;
    write_experiment_table(&eval_dir.join("predictions_onestep.csv"), &onestep_rows)?;
    artifacts.push("eval/predictions.csv".into());
    artifacts.push("eval/predictions_onestep.csv".into());
    eprintln!(
        "evaluate: prediction study ({} cells) in {:.1}s",
        cells.len(),
        started.elapsed().as_secs_f64()
    );

    let started = Instant::now();
    let controllers: Vec<(String, &dyn DynamicsModel)> =
        vec![("nominal".into(), &nominal), ("knode".into(), &knode)];
    let tracked = tracking_experiment(
        &controllers,
        &plant,
        &config.eval.tracking,
        &config.mpc,
        config.plant_dt,
        &config.sim,
    )?;
    let mut rows = Vec::new();
    for cell in &tracked {
        rows.push(cell.row.clone());
        let stem = format!("track-{}-{}", cell.spec, cell.controller);
        write_trajectory_csv(&eval_dir.join(format!("{stem}.csv")), &cell.trajectory)?;
        save_json(&eval_dir.join(format!("{stem}-solver.json")), &cell.logs)?;
        artifacts.push(format!("eval/{stem}.csv"));
        artifacts.push(format!("eval/{stem}-solver.json"));
    }
    write_experiment_table(&eval_dir.join("tracking.csv"), &rows)?;
    artifacts.push("eval/tracking.csv".into());
    eprintln!(
        "evaluate: tracking study ({} runs) in {:.1}s",
        tracked.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(artifacts)
}

/// Write the resolved configuration and the run manifest at the output root.
fn finish(config: &RunConfig, mut artifacts: Vec<String>) -> Result<()> {
    let root = out_root(config);
    ensure_dir(&root)?;
    let resolved = config.to_toml()?;
    let resolved_path = root.join("resolved_config.toml");
    std::fs::write(&resolved_path, &resolved).map_err(|e| Error::Io {
        path: resolved_path.display().to_string(),
        source: e,
    })?;
    artifacts.push("resolved_config.toml".into());
    artifacts.sort();
    artifacts.dedup();
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: config.sha256()?,
        seed: config.seed,
        artifacts,
    };
    save_json(&root.join("manifest.json"), &manifest)
}
