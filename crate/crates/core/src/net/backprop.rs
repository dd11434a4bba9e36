use rand::Rng;
use rand_distr::StandardNormal;

use super::DenoiserModel;
use crate::error::{Error, Result};
use crate::kernels::{gemm, Strides};
use crate::schedule::NoiseSchedule;

/// Network inputs and regression targets for one minibatch, with the noise
/// level and noise already drawn. Evaluating a `NoisedBatch` is a pure
/// function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedBatch {
    pub size: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Row-major `size × input_dim`.
    pub inputs: Vec<f64>,
    /// Row-major `size × output_dim`; the noise each row was corrupted with.
    pub targets: Vec<f64>,
    pub steps: Vec<usize>,
}

impl NoisedBatch {
    /// Reorders rows; used to check that the loss is order independent.
    pub fn permuted(&self, order: &[usize]) -> NoisedBatch {
        assert_eq!(order.len(), self.size);
        let mut out = NoisedBatch {
            size: self.size,
            input_dim: self.input_dim,
            output_dim: self.output_dim,
            inputs: Vec::with_capacity(self.inputs.len()),
            targets: Vec::with_capacity(self.targets.len()),
            steps: Vec::with_capacity(self.size),
        };
        for &i in order {
            out.inputs
                .extend_from_slice(&self.inputs[i * self.input_dim..(i + 1) * self.input_dim]);
            out.targets
                .extend_from_slice(&self.targets[i * self.output_dim..(i + 1) * self.output_dim]);
            out.steps.push(self.steps[i]);
        }
        out
    }

    /// Appends a copy of every row to the batch.
    pub fn duplicated(&self) -> NoisedBatch {
        let order: Vec<usize> = (0..self.size).chain(0..self.size).collect();
        let mut out = NoisedBatch {
            size: self.size * 2,
            ..self.clone()
        };
        out.inputs.clear();
        out.targets.clear();
        out.steps.clear();
        for &i in &order {
            out.inputs
                .extend_from_slice(&self.inputs[i * self.input_dim..(i + 1) * self.input_dim]);
            out.targets
                .extend_from_slice(&self.targets[i * self.output_dim..(i + 1) * self.output_dim]);
            out.steps.push(self.steps[i]);
        }
        out
    }
}

/// Parameter gradients, shaped like the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &DenoiserModel) -> Self {
        Gradients {
            weights: model.layers().iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: model.layers().iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.weights
            .iter()
            .chain(&self.biases)
            .flat_map(|v| v.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            for g in v.iter_mut() {
                *g *= factor;
            }
        }
    }

    /// Gradient entry in the model's flat parameter order.
    pub fn get(&self, mut index: usize) -> f64 {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            if index < w.len() {
                return w[index];
            }
            index -= w.len();
            if index < b.len() {
                return b[index];
            }
            index -= b.len();
        }
        panic!("gradient index out of range");
    }
}

/// Per-layer activations kept for the backward pass.
struct Tape {
    /// `acts[0]` is the input, `acts[i]` the output of layer `i - 1`.
    acts: Vec<Vec<f64>>,
}

impl DenoiserModel {
    /// Draws `k ~ U{1..K}` and `eps ~ N(0, I)` per sample and forms the
    /// forward-noised chunks. `samples` pairs clean chunks with their
    /// conditioning block.
    pub fn draw_noised_batch<R: Rng + ?Sized>(
        &self,
        samples: &[(&[f64], &[f64])],
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<NoisedBatch> {
        if samples.is_empty() {
            return Err(Error::invalid("empty training batch"));
        }
        let layout = *self.layout();
        if schedule.total_steps() != layout.total_steps {
            return Err(Error::invalid(format!(
                "schedule has {} steps, model was built for {}",
                schedule.total_steps(),
                layout.total_steps
            )));
        }
        let (input_dim, output_dim) = (layout.input_dim(), layout.chunk_len());
        let mut batch = NoisedBatch {
            size: samples.len(),
            input_dim,
            output_dim,
            inputs: Vec::with_capacity(samples.len() * input_dim),
            targets: Vec::with_capacity(samples.len() * output_dim),
            steps: Vec::with_capacity(samples.len()),
        };
        let mut noisy = vec![0.0; output_dim];
        let mut row = Vec::with_capacity(input_dim);
        for (clean, obs) in samples {
            if clean.len() != output_dim || obs.len() != layout.cond_len() {
                return Err(Error::invalid("training sample has wrong shape"));
            }
            let k = rng.random_range(1..=layout.total_steps);
            let ab = schedule.alpha_bar(k);
            let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
            for (dst, &a0) in noisy.iter_mut().zip(clean.iter()) {
                let eps: f64 = rng.sample(StandardNormal);
                batch.targets.push(eps);
                *dst = signal * a0 + noise * eps;
            }
            self.assemble_input(&noisy, k, obs, &mut row);
            batch.inputs.extend_from_slice(&row);
            batch.steps.push(k);
        }
        Ok(batch)
    }

    fn forward_tape(&self, inputs: &[f64], size: usize) -> Tape {
        let mut acts = Vec::with_capacity(self.layers().len() + 1);
        acts.push(inputs.to_vec());
        let last = self.layers().len() - 1;
        for (i, layer) in self.layers().iter().enumerate() {
            let mut out = vec![0.0; size * layer.out_dim];
            for row in out.chunks_exact_mut(layer.out_dim) {
                row.copy_from_slice(&layer.bias);
            }
            gemm(
                size,
                layer.in_dim,
                layer.out_dim,
                1.0,
                &acts[i],
                Strides::row_major(layer.in_dim),
                &layer.weights,
                Strides::transposed(layer.in_dim),
                1.0,
                &mut out,
            );
            if i != last {
                let act = self.activation();
                for v in out.iter_mut() {
                    *v = act.apply(*v);
                }
            }
            acts.push(out);
        }
        Tape { acts }
    }

    /// Batched forward pass; rows of the result follow rows of `inputs`.
    pub fn forward_batch(&self, inputs: &[f64], size: usize) -> Vec<f64> {
        assert_eq!(inputs.len(), size * self.layout().input_dim());
        self.forward_tape(inputs, size).acts.pop().expect("output layer")
    }

    /// Backpropagates `d_out` (gradient w.r.t. the network output). Fills
    /// `grads` when given; otherwise returns the gradient w.r.t. the input
    /// rows (empty when `grads` is given).
    fn backward(&self, tape: &Tape, size: usize, d_out: Vec<f64>, mut grads: Option<&mut Gradients>) -> Vec<f64> {
        let act = self.activation();
        let mut delta = d_out;
        for (i, layer) in self.layers().iter().enumerate().rev() {
            if i != self.layers().len() - 1 {
                for (d, h) in delta.iter_mut().zip(&tape.acts[i + 1]) {
                    *d *= act.derivative_from_output(*h);
                }
            }
            if let Some(g) = grads.as_deref_mut() {
                // dW = delta^T · x
                gemm(
                    layer.out_dim,
                    size,
                    layer.in_dim,
                    1.0,
                    &delta,
                    Strides::transposed(layer.out_dim),
                    &tape.acts[i],
                    Strides::row_major(layer.in_dim),
                    1.0,
                    &mut g.weights[i],
                );
                for row in delta.chunks_exact(layer.out_dim) {
                    for (gb, d) in g.biases[i].iter_mut().zip(row) {
                        *gb += d;
                    }
                }
            }
            if i == 0 && grads.is_some() {
                return Vec::new();
            }
            let mut d_in = vec![0.0; size * layer.in_dim];
            gemm(
                size,
                layer.out_dim,
                layer.in_dim,
                1.0,
                &delta,
                Strides::row_major(layer.out_dim),
                &layer.weights,
                Strides::row_major(layer.in_dim),
                0.0,
                &mut d_in,
            );
            delta = d_in;
        }
        delta
    }

    /// Mean over rows of `||eps - eps_hat||^2`.
    pub fn batch_loss(&self, batch: &NoisedBatch) -> f64 {
        let pred = self.forward_batch(&batch.inputs, batch.size);
        squared_error(&pred, &batch.targets) / batch.size as f64
    }

    /// Loss and exact parameter gradients on an already drawn batch.
    pub fn loss_and_grad_on(&self, batch: &NoisedBatch) -> (f64, Gradients) {
        let tape = self.forward_tape(&batch.inputs, batch.size);
        let pred = tape.acts.last().expect("output layer");
        let scale = 1.0 / batch.size as f64;
        let loss = squared_error(pred, &batch.targets) * scale;
        let d_out: Vec<f64> = pred
            .iter()
            .zip(&batch.targets)
            .map(|(p, t)| 2.0 * (p - t) * scale)
            .collect();
        let mut grads = Gradients::zeros_like(self);
        self.backward(&tape, batch.size, d_out, Some(&mut grads));
        (loss, grads)
    }

    /// Draws noise levels and noise for `samples`, then returns the mean
    /// epsilon-matching loss and its gradient.
    pub fn loss_and_grad<R: Rng + ?Sized>(
        &self,
        samples: &[(&[f64], &[f64])],
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<(f64, Gradients)> {
        let batch = self.draw_noised_batch(samples, schedule, rng)?;
        Ok(self.loss_and_grad_on(&batch))
    }

    /// Vector-Jacobian product `J^T v` of the network output w.r.t. the
    /// action-chunk part of the input, at `(chunk, k, obs)`.
    pub fn chunk_vjp(&self, chunk: &[f64], k: usize, obs: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        // forward() validates the shapes.
        self.forward(chunk, k, obs)?;
        if cotangent.len() != self.layout().chunk_len() {
            return Err(Error::invalid("cotangent has wrong length"));
        }
        let mut input = Vec::new();
        self.assemble_input(chunk, k, obs, &mut input);
        let tape = self.forward_tape(&input, 1);
        let mut d_in = self.backward(&tape, 1, cotangent.to_vec(), None);
        d_in.truncate(self.layout().chunk_len());
        Ok(d_in)
    }
}

fn squared_error(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum()
}
