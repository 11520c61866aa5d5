//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Bad configuration, CLI arguments, or malformed/missing input files.
    Config(String),
    /// Filesystem failure while reading or writing an artifact.
    Io { path: String, source: std::io::Error },
    /// Invalid data fed to an operation (dimension mismatch, negative thrust, ...).
    Invalid(String),
    /// Euler-rate kinematics evaluated too close to the representation singularity.
    GimbalLock { roll: f64, pitch: f64 },
    /// A computation produced NaN or infinity.
    NonFinite(String),
    /// Simulated state left the sanity bound (the integration blew up).
    Diverged { norm: f64, bound: f64 },
    /// Adaptive integrator could not reach the requested tolerance.
    StepControl(String),
    /// Matrix factorization failed (e.g. Gram matrix not positive definite).
    Factorization(String),
    /// Optimizer failed to produce a usable iterate.
    Solver(String),
}

impl Error {
    /// Process exit code for the CLI: 2 for config/input problems, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io { .. } | Error::Invalid(_) => 2,
            _ => 3,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Io { path, source } => write!(f, "io error on {path}: {source}"),
            Error::Invalid(msg) => write!(f, "invalid input: {msg}"),
            Error::GimbalLock { roll, pitch } => write!(
                f,
                "gimbal lock: attitude too close to singularity (roll {roll:.4}, pitch {pitch:.4})"
            ),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::Diverged { norm, bound } => {
                write!(f, "state diverged: |x| = {norm:.3e} exceeds bound {bound:.3e}")
            }
            Error::StepControl(msg) => write!(f, "integrator step control failed: {msg}"),
            Error::Factorization(msg) => write!(f, "factorization failed: {msg}"),
            Error::Solver(msg) => write!(f, "solver failed: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
