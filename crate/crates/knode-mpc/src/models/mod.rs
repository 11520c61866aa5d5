//! Learned corrections on top of the nominal dynamics: a small MLP residual
//! (the hybrid model) and a Gaussian-process baseline.

mod gp;
mod hybrid;
mod mlp;

pub use gp::{gp_fit, gp_predict_mean, GpDynamics, GpHyperparams, GpKernel, GpModel};
pub use hybrid::{hybrid_derivative, HybridModel, InputScaler, ResidualMask};
pub use mlp::{
    mlp_backward, mlp_forward, mlp_forward_cached, mlp_gradients, mlp_input_jacobian, Mlp,
    MlpCache, MlpGrads,
};
