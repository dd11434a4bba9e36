//! Fully connected noise-prediction network `eps(A_k, k, O)`.
//!
//! The input vector is `flatten(A_k) ++ embed(k / K) ++ flatten(O)` where `O`
//! holds the last `obs_history` observations, oldest first. Hidden layers
//! share one activation; the output layer is linear and has `horizon * dim`
//! units.

mod backprop;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use backprop::{Gradients, NoisedBatch};
pub use train::{train, TrainConfig, TrainReport, TrainingData};

use crate::error::{Error, Result};
use crate::kernels;

/// Width of every hidden layer in the default architecture.
pub const DEFAULT_HIDDEN_WIDTH: usize = 256;
pub const DEFAULT_HIDDEN_LAYERS: usize = 3;
pub const DEFAULT_STEP_EMBED_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output `h = f(z)`.
    #[inline]
    pub fn derivative_from_output(self, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - h * h,
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

/// Shapes of everything the network consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelLayout {
    pub horizon: usize,
    pub action_dim: usize,
    pub obs_dim: usize,
    pub obs_history: usize,
    pub step_embed_dim: usize,
    pub total_steps: usize,
}

impl ModelLayout {
    pub fn chunk_len(&self) -> usize {
        self.horizon * self.action_dim
    }

    pub fn cond_len(&self) -> usize {
        self.obs_dim * self.obs_history
    }

    pub fn input_dim(&self) -> usize {
        self.chunk_len() + self.step_embed_dim + self.cond_len()
    }

    fn validate(&self) -> Result<()> {
        if self.horizon == 0
            || self.action_dim == 0
            || self.obs_history == 0
            || self.total_steps == 0
            || self.step_embed_dim % 2 != 0
        {
            return Err(Error::invalid(format!("invalid model layout {self:?}")));
        }
        Ok(())
    }
}

/// Sinusoidal features of the normalized step `k / K`: pairs
/// `(sin(2^i pi x), cos(2^i pi x))` for `i = 0..dim/2`.
pub fn step_embedding(k: usize, total_steps: usize, out: &mut [f64]) {
    let x = k as f64 / total_steps as f64;
    let mut freq = std::f64::consts::PI;
    for pair in out.chunks_exact_mut(2) {
        let (s, c) = (freq * x).sin_cos();
        pair[0] = s;
        pair[1] = c;
        freq *= 2.0;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim × in_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn uniform<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = || rng.random_range(-bound..bound);
        let weights = (0..in_dim * out_dim).map(|_| draw()).collect();
        let bias = (0..out_dim).map(|_| draw()).collect();
        Dense {
            in_dim,
            out_dim,
            weights,
            bias,
        }
    }
}

/// Reusable buffers for single-sample inference.
#[derive(Debug, Clone, Default)]
pub struct Scratch {
    input: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    layout: ModelLayout,
    activation: Activation,
    layers: Vec<Dense>,
}

impl DenoiserModel {
    /// Hidden and output layers drawn uniformly in `±1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(
        layout: ModelLayout,
        hidden: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        layout.validate()?;
        let sizes = Self::sizes(&layout, hidden)?;
        let layers = sizes
            .windows(2)
            .map(|w| Dense::uniform(w[0], w[1], rng))
            .collect();
        Ok(DenoiserModel {
            layout,
            activation,
            layers,
        })
    }

    /// All parameters zero; the output is identically zero.
    pub fn zeros(layout: ModelLayout, hidden: &[usize], activation: Activation) -> Result<Self> {
        layout.validate()?;
        let sizes = Self::sizes(&layout, hidden)?;
        let layers = sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(DenoiserModel {
            layout,
            activation,
            layers,
        })
    }

    /// Assembles a model from explicit layers; shapes must chain from the
    /// layout's input to its chunk length.
    pub fn from_layers(layout: ModelLayout, activation: Activation, layers: Vec<Dense>) -> Result<Self> {
        layout.validate()?;
        if layers.is_empty() {
            return Err(Error::invalid("model needs at least one layer"));
        }
        let mut expected_in = layout.input_dim();
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim != expected_in
                || l.weights.len() != l.in_dim * l.out_dim
                || l.bias.len() != l.out_dim
            {
                return Err(Error::invalid(format!("layer {i} has inconsistent shape")));
            }
            expected_in = l.out_dim;
        }
        if expected_in != layout.chunk_len() {
            return Err(Error::invalid(format!(
                "output width {expected_in} does not match chunk length {}",
                layout.chunk_len()
            )));
        }
        Ok(DenoiserModel {
            layout,
            activation,
            layers,
        })
    }

    fn sizes(layout: &ModelLayout, hidden: &[usize]) -> Result<Vec<usize>> {
        if hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        let mut sizes = vec![layout.input_dim()];
        sizes.extend_from_slice(hidden);
        sizes.push(layout.chunk_len());
        Ok(sizes)
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    /// `[input, hidden..., output]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layout.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.out_dim));
        sizes
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameter `index` in the flat order: per layer, weights then biases.
    pub fn param(&self, mut index: usize) -> f64 {
        for l in &self.layers {
            if index < l.weights.len() {
                return l.weights[index];
            }
            index -= l.weights.len();
            if index < l.bias.len() {
                return l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut index: usize, value: f64) {
        for l in &mut self.layers {
            if index < l.weights.len() {
                l.weights[index] = value;
                return;
            }
            index -= l.weights.len();
            if index < l.bias.len() {
                l.bias[index] = value;
                return;
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    fn check_shapes(&self, chunk: &[f64], k: usize, obs: &[f64]) -> Result<()> {
        if chunk.len() != self.layout.chunk_len() {
            return Err(Error::invalid(format!(
                "chunk has {} values, model expects {}",
                chunk.len(),
                self.layout.chunk_len()
            )));
        }
        if obs.len() != self.layout.cond_len() {
            return Err(Error::invalid(format!(
                "observation block has {} values, model expects {}",
                obs.len(),
                self.layout.cond_len()
            )));
        }
        if k == 0 || k > self.layout.total_steps {
            return Err(Error::invalid(format!(
                "step {k} outside 1..={}",
                self.layout.total_steps
            )));
        }
        Ok(())
    }

    /// Writes the network input for `(chunk, k, obs)` into `input`.
    pub fn assemble_input(&self, chunk: &[f64], k: usize, obs: &[f64], input: &mut Vec<f64>) {
        let l = &self.layout;
        input.clear();
        input.extend_from_slice(chunk);
        let start = input.len();
        input.resize(start + l.step_embed_dim, 0.0);
        step_embedding(k, l.total_steps, &mut input[start..]);
        input.extend_from_slice(obs);
    }

    /// Predicted noise for one chunk.
    pub fn forward(&self, chunk: &[f64], k: usize, obs: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.layout.chunk_len()];
        self.forward_into(chunk, k, obs, &mut Scratch::default(), &mut out)?;
        Ok(out)
    }

    pub fn forward_into(
        &self,
        chunk: &[f64],
        k: usize,
        obs: &[f64],
        scratch: &mut Scratch,
        out: &mut [f64],
    ) -> Result<()> {
        self.check_shapes(chunk, k, obs)?;
        if out.len() != self.layout.chunk_len() {
            return Err(Error::invalid("output buffer has wrong length"));
        }
        let Scratch { input, a, b } = scratch;
        self.assemble_input(chunk, k, obs, input);
        let (last, hidden) = self.layers.split_last().expect("model has layers");
        let mut cur: &mut Vec<f64> = input;
        let mut nxt: &mut Vec<f64> = a;
        let mut spare: &mut Vec<f64> = b;
        for layer in hidden {
            nxt.resize(layer.out_dim, 0.0);
            kernels::affine(&layer.weights, &layer.bias, cur, nxt);
            for v in nxt.iter_mut() {
                *v = self.activation.apply(*v);
            }
            std::mem::swap(&mut cur, &mut nxt);
            std::mem::swap(&mut nxt, &mut spare);
        }
        kernels::affine(&last.weights, &last.bias, cur, out);
        Ok(())
    }
}
