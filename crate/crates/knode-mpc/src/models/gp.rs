//! Gaussian-process regression baseline: squared-exponential kernel, shared
//! across output dimensions, posterior mean only.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{
    nominal_derivative, ControlInput, DynamicsModel, QuadParams, QuadState, StateVec,
};
use crate::error::{Error, Result};
use crate::models::hybrid::HybridModel;

/// Squared-exponential kernel k(a, b) = variance · exp(−‖a−b‖² / (2·length_scale²)).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpKernel {
    pub variance: f64,
    pub length_scale: f64,
    /// Observation noise standard deviation σ_n.
    pub noise_std: f64,
}

impl GpKernel {
    pub fn eval_sq_dist(&self, d2: f64) -> f64 {
        self.variance * (-d2 / (2.0 * self.length_scale * self.length_scale)).exp()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.variance > 0.0
            && self.variance.is_finite()
            && self.length_scale > 0.0
            && self.length_scale.is_finite()
            && self.noise_std > 0.0
            && self.noise_std.is_finite();
        if !ok {
            return Err(Error::Invalid(
                "kernel hyperparameters must be finite and positive".into(),
            ));
        }
        Ok(())
    }
}

/// Hyperparameter selection strategy for [`gp_fit`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GpHyperparams {
    /// Use the given kernel as-is.
    Fixed { variance: f64, length_scale: f64 },
    /// 20×20 log-space grid search maximizing the marginal likelihood,
    /// refined once around the best cell.
    GridSearch,
}

/// Fitted GP with one shared kernel and independent outputs per target column.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub kernel: GpKernel,
    inputs: DMatrix<f64>,  // M×D, one point per row
    targets: DMatrix<f64>, // M×P
    chol_l: DMatrix<f64>,  // lower factor of K + σ²I
    alpha: DMatrix<f64>,   // (K + σ²I)⁻¹ · targets
    /// Noise variance actually used after jitter escalation.
    pub effective_noise_var: f64,
    log_marginal: f64,
}

fn sq_dist_matrix(inputs: &DMatrix<f64>) -> DMatrix<f64> {
    let m = inputs.nrows();
    let mut d2 = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in (i + 1)..m {
            let d = inputs.row(i) - inputs.row(j);
            let v = d.norm_squared();
            d2[(i, j)] = v;
            d2[(j, i)] = v;
        }
    }
    d2
}

fn gram(d2: &DMatrix<f64>, kernel: &GpKernel, noise_var: f64) -> DMatrix<f64> {
    let mut k = d2.map(|v| kernel.eval_sq_dist(v));
    for i in 0..k.nrows() {
        k[(i, i)] += noise_var;
    }
    k
}

/// Cholesky with the factor checked for strictly positive, finite pivots
/// (nalgebra's edge behavior on exactly singular matrices is not relied upon).
fn try_cholesky(k: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = nalgebra::Cholesky::new(k.clone())?;
    let l = chol.unpack();
    if (0..l.nrows()).all(|i| l[(i, i)].is_finite() && l[(i, i)] > 0.0) {
        Some(l)
    } else {
        None
    }
}

/// Factorize K + σ²I, doubling the jitter up to 6 times on failure.
fn factorize_with_escalation(
    d2: &DMatrix<f64>,
    kernel: &GpKernel,
) -> Result<(DMatrix<f64>, f64)> {
    let mut noise_var = kernel.noise_std * kernel.noise_std;
    for _ in 0..=6 {
        let k = gram(d2, kernel, noise_var);
        if let Some(l) = try_cholesky(&k) {
            return Ok((l, noise_var));
        }
        noise_var *= 2.0;
    }
    Err(Error::Factorization(format!(
        "gram matrix not positive definite even at jitter {noise_var:.3e}"
    )))
}

fn chol_solve(l: &DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    let mut x = rhs.clone();
    l.solve_lower_triangular_mut(&mut x);
    l.transpose().solve_upper_triangular_mut(&mut x);
    x
}

fn log_marginal(l: &DMatrix<f64>, targets: &DMatrix<f64>, alpha: &DMatrix<f64>) -> f64 {
    let m = targets.nrows() as f64;
    let p = targets.ncols() as f64;
    let log_det_half: f64 = (0..l.nrows()).map(|i| l[(i, i)].ln()).sum();
    let fit: f64 = targets.dot(alpha);
    -0.5 * fit - p * (log_det_half + 0.5 * m * (2.0 * std::f64::consts::PI).ln())
}

fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (llo + (lhi - llo) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Evaluate the LML over a (variance × length-scale) grid; returns the best
/// feasible pair. Grid cells whose Gram matrix cannot be factored are skipped.
fn grid_best(
    d2: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    vars: &[f64],
    ells: &[f64],
    noise_std: f64,
) -> Option<(usize, usize, f64)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for (i, v) in vars.iter().enumerate() {
        for (j, e) in ells.iter().enumerate() {
            let kernel = GpKernel {
                variance: *v,
                length_scale: *e,
                noise_std,
            };
            let k = gram(d2, &kernel, noise_std * noise_std);
            let Some(l) = try_cholesky(&k) else {
                continue;
            };
            let alpha = chol_solve(&l, targets);
            let lml = log_marginal(&l, targets, &alpha);
            if !lml.is_finite() {
                continue;
            }
            if best.map_or(true, |(_, _, b)| lml > b) {
                best = Some((i, j, lml));
            }
        }
    }
    best
}

const GRID_N: usize = 20;

fn fit_hyperparams(
    d2: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    noise_std: f64,
) -> Result<GpKernel> {
    // data-driven ranges: target variance for the amplitude, pairwise
    // distances for the length scale
    let m = targets.nrows() as f64;
    let mut y_var: f64 = 0.0;
    for c in 0..targets.ncols() {
        let col = targets.column(c);
        let mean = col.sum() / m;
        y_var = y_var.max(col.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / m);
    }
    let y_var = y_var.max(1e-10);
    let mut dists: Vec<f64> = d2
        .upper_triangle()
        .iter()
        .filter(|v| **v > 0.0)
        .map(|v| v.sqrt())
        .collect();
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let d_med = if dists.is_empty() {
        1.0
    } else {
        dists[dists.len() / 2].max(1e-6)
    };

    let vars = log_space(y_var * 1e-4, y_var * 1e2, GRID_N);
    let ells = log_space(d_med / 30.0, d_med * 30.0, GRID_N);
    let (bi, bj, _) = grid_best(d2, targets, &vars, &ells, noise_std).ok_or_else(|| {
        Error::Factorization("no feasible hyperparameters on the coarse grid".into())
    })?;

    // refine once around the winning cell
    let lo = |g: &[f64], i: usize| g[i.saturating_sub(1)];
    let hi = |g: &[f64], i: usize| g[(i + 1).min(g.len() - 1)];
    let vars2 = log_space(lo(&vars, bi), hi(&vars, bi), GRID_N);
    let ells2 = log_space(lo(&ells, bj), hi(&ells, bj), GRID_N);
    let coarse = (vars[bi], ells[bj]);
    let fine = grid_best(d2, targets, &vars2, &ells2, noise_std)
        .map(|(i, j, _)| (vars2[i], ells2[j]))
        .unwrap_or(coarse);
    Ok(GpKernel {
        variance: fine.0,
        length_scale: fine.1,
        noise_std,
    })
}

/// Fit a GP to `inputs` (one point per row) and `targets` (one output column
/// per target dimension), all dimensions sharing one kernel.
pub fn gp_fit(
    inputs: DMatrix<f64>,
    targets: DMatrix<f64>,
    hyper: GpHyperparams,
    noise_std: f64,
) -> Result<GpModel> {
    if inputs.nrows() == 0 || inputs.ncols() == 0 {
        return Err(Error::Invalid("gp needs at least one training point".into()));
    }
    if inputs.nrows() != targets.nrows() {
        return Err(Error::Invalid(format!(
            "gp inputs ({}) and targets ({}) row mismatch",
            inputs.nrows(),
            targets.nrows()
        )));
    }
    if inputs.iter().any(|v| !v.is_finite()) || targets.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite gp training data".into()));
    }
    let d2 = sq_dist_matrix(&inputs);
    let kernel = match hyper {
        GpHyperparams::Fixed {
            variance,
            length_scale,
        } => GpKernel {
            variance,
            length_scale,
            noise_std,
        },
        GpHyperparams::GridSearch => fit_hyperparams(&d2, &targets, noise_std)?,
    };
    kernel.validate()?;
    let (l, effective_noise_var) = factorize_with_escalation(&d2, &kernel)?;
    let alpha = chol_solve(&l, &targets);
    let lml = log_marginal(&l, &targets, &alpha);
    Ok(GpModel {
        kernel,
        inputs,
        targets,
        chol_l: l,
        alpha,
        effective_noise_var,
        log_marginal: lml,
    })
}

/// Posterior mean at a query point (one value per target dimension).
pub fn gp_predict_mean(gp: &GpModel, z: &DVector<f64>) -> Result<DVector<f64>> {
    if z.len() != gp.inputs.ncols() {
        return Err(Error::Invalid(format!(
            "gp query dim {} != {}",
            z.len(),
            gp.inputs.ncols()
        )));
    }
    let m = gp.inputs.nrows();
    let mut k_vec = DVector::zeros(m);
    for i in 0..m {
        let d = gp.inputs.row(i).transpose() - z;
        k_vec[i] = gp.kernel.eval_sq_dist(d.norm_squared());
    }
    Ok(gp.alpha.transpose() * k_vec)
}

impl GpModel {
    pub fn num_points(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.targets.ncols()
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &DMatrix<f64> {
        &self.targets
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal
    }

    /// Max-norm residual of the stored factorization, ‖L·Lᵀ − (K + σ²I)‖∞.
    pub fn factorization_residual(&self) -> f64 {
        let d2 = sq_dist_matrix(&self.inputs);
        let k = gram(&d2, &self.kernel, self.effective_noise_var);
        let r = &self.chol_l * self.chol_l.transpose() - k;
        r.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    pub fn gram_inf_norm(&self) -> f64 {
        let d2 = sq_dist_matrix(&self.inputs);
        let k = gram(&d2, &self.kernel, self.effective_noise_var);
        k.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    }
}

/// Nominal dynamics corrected by a GP posterior mean over [x; u].
#[derive(Debug, Clone)]
pub struct GpDynamics {
    pub params: QuadParams,
    pub gp: GpModel,
}

impl GpDynamics {
    pub fn new(params: QuadParams, gp: GpModel) -> Result<Self> {
        params.validate()?;
        if gp.input_dim() != 16 || gp.output_dim() != 12 {
            return Err(Error::Invalid(format!(
                "gp dynamics needs a 16 -> 12 model, got {} -> {}",
                gp.input_dim(),
                gp.output_dim()
            )));
        }
        Ok(GpDynamics { params, gp })
    }
}

impl DynamicsModel for GpDynamics {
    fn derivative(&self, x: &QuadState, u: &ControlInput) -> Result<StateVec> {
        let mut dx = nominal_derivative(x, u, &self.params)?;
        let mu = gp_predict_mean(&self.gp, &HybridModel::raw_input(x, u))?;
        for i in 0..12 {
            dx[i] += mu[i];
        }
        Ok(dx)
    }
}
