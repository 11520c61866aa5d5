//! Fully connected network with tanh hidden layers and an identity output layer,
//! plus hand-rolled reverse-mode gradients.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Feed-forward network. `sizes` lists layer widths from input to output; every
/// hidden layer applies tanh, the output layer is affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    /// weights[l] has shape sizes[l+1] × sizes[l]
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(Error::Invalid(
            "network needs at least input and output layers".into(),
        ));
    }
    if sizes.iter().any(|s| *s == 0) {
        return Err(Error::Invalid("zero-width network layer".into()));
    }
    Ok(())
}

impl Mlp {
    /// All parameters zero (the network output is identically zero).
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        check_sizes(sizes)?;
        let weights = sizes
            .windows(2)
            .map(|w| DMatrix::zeros(w[1], w[0]))
            .collect();
        let biases = sizes[1..].iter().map(|n| DVector::zeros(*n)).collect();
        Ok(Mlp {
            sizes: sizes.to_vec(),
            weights,
            biases,
        })
    }

    /// Seeded initialization: every layer uniform in ±1/√(fan-in), except the
    /// output layer which starts at zero so the initial residual vanishes.
    pub fn random(sizes: &[usize], seed: u64) -> Result<Self> {
        let mut net = Mlp::zeros(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = net.weights.len() - 1;
        for l in 0..last {
            let bound = 1.0 / (sizes[l] as f64).sqrt();
            for w in net.weights[l].iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
            for b in net.biases[l].iter_mut() {
                *b = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Flatten all parameters (per layer: weights column-major, then bias).
    pub fn flat_params(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        DVector::from_vec(out)
    }

    pub fn set_flat_params(&mut self, flat: &DVector<f64>) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Invalid(format!(
                "parameter vector length {} != {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut k = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for v in w.iter_mut() {
                *v = flat[k];
                k += 1;
            }
            for v in b.iter_mut() {
                *v = flat[k];
                k += 1;
            }
        }
        Ok(())
    }
}

/// Per-layer inputs captured during a forward pass, for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// layer_inputs[l] is the input to layer l (layer_inputs[0] = network input)
    layer_inputs: Vec<DVector<f64>>,
}

/// Parameter gradients with the same shapes as the network.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGrads {
            weights: net
                .weights
                .iter()
                .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
                .collect(),
            biases: net.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in self.weights.iter_mut() {
            *w *= s;
        }
        for b in self.biases.iter_mut() {
            *b *= s;
        }
    }

    /// Same flattening order as [`Mlp::flat_params`].
    pub fn flat(&self) -> DVector<f64> {
        let n: usize = self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>();
        let mut out = Vec::with_capacity(n);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        DVector::from_vec(out)
    }
}

fn check_input(net: &Mlp, z: &DVector<f64>) -> Result<()> {
    if z.len() != net.input_dim() {
        return Err(Error::Invalid(format!(
            "network input length {} != {}",
            z.len(),
            net.input_dim()
        )));
    }
    Ok(())
}

/// Forward pass.
pub fn mlp_forward(net: &Mlp, z: &DVector<f64>) -> Result<DVector<f64>> {
    check_input(net, z)?;
    let last = net.weights.len() - 1;
    let mut a = z.clone();
    for l in 0..net.weights.len() {
        let mut pre = &net.weights[l] * &a + &net.biases[l];
        if l < last {
            pre.apply(|v| *v = v.tanh());
        }
        a = pre;
    }
    Ok(a)
}

/// Forward pass that also captures the per-layer inputs for a backward pass.
pub fn mlp_forward_cached(net: &Mlp, z: &DVector<f64>) -> Result<(DVector<f64>, MlpCache)> {
    check_input(net, z)?;
    let last = net.weights.len() - 1;
    let mut layer_inputs = Vec::with_capacity(net.weights.len());
    let mut a = z.clone();
    for l in 0..net.weights.len() {
        layer_inputs.push(a.clone());
        let mut pre = &net.weights[l] * &a + &net.biases[l];
        if l < last {
            pre.apply(|v| *v = v.tanh());
        }
        a = pre;
    }
    Ok((a, MlpCache { layer_inputs }))
}

/// Reverse pass from a cached forward: accumulates parameter gradients into
/// `grads` and returns the gradient with respect to the network input.
pub fn mlp_backward(
    net: &Mlp,
    cache: &MlpCache,
    upstream: &DVector<f64>,
    grads: &mut MlpGrads,
) -> Result<DVector<f64>> {
    if upstream.len() != net.output_dim() {
        return Err(Error::Invalid(format!(
            "upstream length {} != {}",
            upstream.len(),
            net.output_dim()
        )));
    }
    let mut delta = upstream.clone();
    for l in (0..net.weights.len()).rev() {
        let a_in = &cache.layer_inputs[l];
        grads.weights[l] += &delta * a_in.transpose();
        grads.biases[l] += &delta;
        let mut g = net.weights[l].transpose() * &delta;
        if l > 0 {
            // a_in was produced by tanh, so tanh' = 1 − a².
            for (gi, ai) in g.iter_mut().zip(a_in.iter()) {
                *gi *= 1.0 - ai * ai;
            }
        }
        delta = g;
    }
    Ok(delta)
}

/// Gradients of `upstreamᵀ·mlp_forward(net, z)` with respect to all parameters
/// and the input.
pub fn mlp_gradients(
    net: &Mlp,
    z: &DVector<f64>,
    upstream: &DVector<f64>,
) -> Result<(MlpGrads, DVector<f64>)> {
    let (_, cache) = mlp_forward_cached(net, z)?;
    let mut grads = MlpGrads::zeros_like(net);
    let input_grad = mlp_backward(net, &cache, upstream, &mut grads)?;
    Ok((grads, input_grad))
}

/// Full Jacobian ∂out/∂z (output_dim × input_dim), assembled forward through
/// the layers; cheaper than output_dim backward passes.
pub fn mlp_input_jacobian(net: &Mlp, z: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_input(net, z)?;
    let last = net.weights.len() - 1;
    let mut a = z.clone();
    let mut jac = net.weights[0].clone();
    for l in 0..net.weights.len() {
        if l > 0 {
            jac = &net.weights[l] * jac;
        }
        if l < last {
            let mut act = &net.weights[l] * &a + &net.biases[l];
            act.apply(|v| *v = v.tanh());
            // scale rows by tanh'
            for (i, ai) in act.iter().enumerate() {
                let s = 1.0 - ai * ai;
                jac.row_mut(i).scale_mut(s);
            }
            a = act;
        }
    }
    Ok(jac)
}
