//! Feed-forward networks with exact reverse-mode gradients, Adam, and
//! finite-difference gradient checking.
//!
//! Parameters live in one flat `Vec<f64>`. Each layer occupies a contiguous
//! block: the weight matrix in row-major `(out, in)` order followed by the
//! bias vector of length `out`. Gradients use the same layout, so optimizers
//! and gradient checks can treat a network as a plain parameter vector.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Hidden-layer nonlinearity. The output layer is always linear.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// A multi-layer perceptron stored as a flat parameter vector plus its
/// shape manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward_cached`] for a later backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// `layers[0]` is the input batch, `layers[L]` the output batch.
    layers: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.layers.last().expect("cache holds at least the input")
    }

    pub fn batch_size(&self) -> usize {
        self.layers[0].nrows()
    }
}

/// Gradients for a batch: parameter gradients (summed over the batch, same
/// layout as [`Mlp::params`]) and per-sample input gradients.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Array2<f64>,
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::InvalidArchitecture(format!(
            "need at least 2 layer sizes, got {}",
            layer_sizes.len()
        )));
    }
    if let Some(pos) = layer_sizes.iter().position(|&n| n == 0) {
        return Err(Error::InvalidArchitecture(format!(
            "layer {pos} has size 0"
        )));
    }
    Ok(())
}

impl Mlp {
    /// Total number of parameters for the given layer sizes.
    pub fn param_count_for(layer_sizes: &[usize]) -> usize {
        layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Random initialization: weights uniform in `±sqrt(6 / (fan_in + fan_out))`,
    /// biases zero. Deterministic for a given seed.
    pub fn new(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(Self::param_count_for(layer_sizes));
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.random_range(-bound..bound));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            params,
        })
    }

    /// All weights and biases zero.
    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            params: vec![0.0; Self::param_count_for(layer_sizes)],
        })
    }

    pub fn from_flat(layer_sizes: &[usize], activation: Activation, params: Vec<f64>) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let expected = Self::param_count_for(layer_sizes);
        if params.len() != expected {
            return Err(Error::Shape(format!(
                "expected {expected} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            params,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Offset of layer `l`'s weight block and its `(out, in)` shape.
    fn layer_offset(&self, l: usize) -> (usize, usize, usize) {
        let mut off = 0;
        for w in self.layer_sizes.windows(2).take(l) {
            off += w[0] * w[1] + w[1];
        }
        (off, self.layer_sizes[l + 1], self.layer_sizes[l])
    }

    /// Weight matrix of layer `l`, shape `(out, in)`.
    pub fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let (off, out, inp) = self.layer_offset(l);
        ArrayView2::from_shape((out, inp), &self.params[off..off + out * inp]).unwrap()
    }

    pub fn bias(&self, l: usize) -> ArrayView1<'_, f64> {
        let (off, out, inp) = self.layer_offset(l);
        ArrayView1::from(&self.params[off + out * inp..off + out * inp + out])
    }

    pub fn weight_mut(&mut self, l: usize) -> ArrayViewMut2<'_, f64> {
        let (off, out, inp) = self.layer_offset(l);
        ArrayViewMut2::from_shape((out, inp), &mut self.params[off..off + out * inp]).unwrap()
    }

    pub fn bias_mut(&mut self, l: usize) -> ArrayViewMut1<'_, f64> {
        let (off, out, inp) = self.layer_offset(l);
        ArrayViewMut1::from(&mut self.params[off + out * inp..off + out * inp + out])
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has length {}, network expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        let mut x = input.to_vec();
        let last = self.num_layers() - 1;
        for l in 0..self.num_layers() {
            let w = self.weight(l);
            let b = self.bias(l);
            let mut y = b.to_vec();
            for (j, row) in w.outer_iter().enumerate() {
                y[j] += row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
            }
            if l != last {
                for v in &mut y {
                    *v = self.activation.apply(*v);
                }
            }
            x = y;
        }
        Ok(x)
    }

    /// Batched forward pass; rows of `x` are samples.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let cache = self.forward_cached(x)?;
        Ok(cache.layers.into_iter().last().unwrap())
    }

    /// Batched forward pass that keeps every layer's activations.
    pub fn forward_cached(&self, x: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input batch has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let batch = x.nrows();
        let mut layers = Vec::with_capacity(self.layer_sizes.len());
        layers.push(x.to_owned());
        let last = self.num_layers() - 1;
        for l in 0..self.num_layers() {
            let w = self.weight(l);
            let b = self.bias(l);
            let mut y = Array2::zeros((batch, w.nrows()));
            y += &b;
            general_mat_mul(1.0, &layers[l], &w.t(), 1.0, &mut y);
            if l != last {
                let act = self.activation;
                y.mapv_inplace(|v| act.apply(v));
            }
            layers.push(y);
        }
        Ok(ForwardCache { layers })
    }

    /// Reverse accumulation through a cached forward pass. `upstream` is the
    /// gradient of the loss with respect to the network output, one row per
    /// sample. Parameter gradients are summed over the batch.
    pub fn backward(&self, cache: &ForwardCache, upstream: ArrayView2<'_, f64>) -> Result<Gradients> {
        let out = cache.output();
        if upstream.dim() != out.dim() {
            return Err(Error::Shape(format!(
                "upstream gradient has shape {:?}, output has shape {:?}",
                upstream.dim(),
                out.dim()
            )));
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = upstream.to_owned();
        for l in (0..self.num_layers()).rev() {
            let (off, n_out, n_in) = self.layer_offset(l);
            let input = &cache.layers[l];
            {
                let (gw, gb) = grads[off..off + n_out * n_in + n_out].split_at_mut(n_out * n_in);
                let mut gw = ArrayViewMut2::from_shape((n_out, n_in), gw).unwrap();
                general_mat_mul(1.0, &delta.t(), input, 0.0, &mut gw);
                for (g, s) in gb.iter_mut().zip(delta.sum_axis(Axis(0))) {
                    *g = s;
                }
            }
            let mut dx = delta.dot(&self.weight(l));
            if l > 0 {
                let act = self.activation;
                ndarray::Zip::from(&mut dx)
                    .and(input)
                    .for_each(|d, &y| *d *= act.derivative_from_output(y));
            }
            delta = dx;
        }
        Ok(Gradients {
            params: grads,
            input: delta,
        })
    }

    /// Single-sample gradients: returns (parameter gradients, input gradients).
    pub fn gradients(&self, input: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "upstream gradient has length {}, output has length {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        let x = ArrayView2::from_shape((1, input.len()), input).unwrap();
        let cache = self.forward_cached(x)?;
        let up = ArrayView2::from_shape((1, upstream.len()), upstream).unwrap();
        let g = self.backward(&cache, up)?;
        Ok((g.params, g.input.into_raw_vec_and_offset().0))
    }

    pub fn to_checkpoint(&self) -> MlpCheckpoint {
        let mut weights = Vec::with_capacity(self.num_layers());
        let mut biases = Vec::with_capacity(self.num_layers());
        for l in 0..self.num_layers() {
            weights.push(self.weight(l).outer_iter().map(|r| r.to_vec()).collect());
            biases.push(self.bias(l).to_vec());
        }
        MlpCheckpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            layer_sizes: self.layer_sizes.clone(),
            activation: self.activation,
            weights,
            biases,
        }
    }

    pub fn from_checkpoint(ckpt: &MlpCheckpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported network format_version {}",
                ckpt.format_version
            )));
        }
        let sizes = &ckpt.layer_sizes;
        validate_sizes(sizes)?;
        if ckpt.weights.len() != sizes.len() - 1 || ckpt.biases.len() != sizes.len() - 1 {
            return Err(Error::Shape("layer count does not match layer_sizes".into()));
        }
        let mut params = Vec::with_capacity(Self::param_count_for(sizes));
        for (l, w) in sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let rows = &ckpt.weights[l];
            if rows.len() != n_out || rows.iter().any(|r| r.len() != n_in) {
                return Err(Error::Shape(format!("layer {l} weights are not {n_out}x{n_in}")));
            }
            if ckpt.biases[l].len() != n_out {
                return Err(Error::Shape(format!("layer {l} bias is not length {n_out}")));
            }
            rows.iter().for_each(|r| params.extend_from_slice(r));
            params.extend_from_slice(&ckpt.biases[l]);
        }
        Self::from_flat(sizes, ckpt.activation, params)
    }
}

/// Serialized network. `weights[l][j][i]` connects input `i` to output `j`
/// of layer `l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub format_version: u32,
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam state holds {} parameters, got params {} / grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

/// Compares the analytic gradient returned by `loss` against central
/// differences with the given step. Returns the maximum over parameters of
/// `|analytic - numeric| / max(1e-8, |numeric|)`.
pub fn grad_check<F>(mut loss: F, params: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(step > 0.0) {
        return Err(Error::Argument(format!("finite-difference step must be > 0, got {step}")));
    }
    let (_, analytic) = loss(params)?;
    if analytic.len() != params.len() {
        return Err(Error::Shape(format!(
            "analytic gradient has length {}, params {}",
            analytic.len(),
            params.len()
        )));
    }
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let (plus, _) = loss(&probe)?;
        probe[i] = params[i] - step;
        let (minus, _) = loss(&probe)?;
        probe[i] = params[i];
        let numeric = (plus - minus) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
