use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DenoiserModel, Gradients, NoisedBatch};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// Minibatch SGD settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Heavy-ball momentum; 0 disables it.
    pub momentum: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    /// Cosine decay of the learning rate towards 5% of its initial value.
    pub cosine_decay: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 128,
            learning_rate: 0.05,
            momentum: 0.9,
            grad_clip: 5.0,
            cosine_decay: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::invalid("grad_clip must be positive"));
        }
        Ok(())
    }
}

/// Normalized training pairs: clean chunks and their conditioning blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub chunk_len: usize,
    pub cond_len: usize,
    pub chunks: Vec<f64>,
    pub conds: Vec<f64>,
}

impl TrainingData {
    pub fn len(&self) -> usize {
        if self.chunk_len == 0 {
            0
        } else {
            self.chunks.len() / self.chunk_len
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pair(&self, i: usize) -> (&[f64], &[f64]) {
        (
            &self.chunks[i * self.chunk_len..(i + 1) * self.chunk_len],
            &self.conds[i * self.cond_len..(i + 1) * self.cond_len],
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean minibatch loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Loss on a fixed noised hold-out batch after each epoch.
    pub eval_curve: Vec<f64>,
    pub updates: usize,
}

const EVAL_ROWS: usize = 512;

/// Trains `model` in place with clipped momentum SGD on the
/// epsilon-matching objective.
pub fn train(
    model: &mut DenoiserModel,
    data: &TrainingData,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_e7a1);
    let eval_batch: NoisedBatch = {
        let pairs: Vec<_> = (0..EVAL_ROWS.min(data.len()))
            .map(|i| data.pair(i * data.len() / EVAL_ROWS.min(data.len())))
            .collect();
        model.draw_noised_batch(&pairs, schedule, &mut eval_rng)?
    };

    let mut velocity = Gradients::zeros_like(model);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batches_per_epoch = data.len().div_ceil(config.batch_size);
    let total_updates = batches_per_epoch * config.epochs;
    let mut report = TrainReport {
        loss_curve: Vec::with_capacity(config.epochs),
        eval_curve: Vec::with_capacity(config.epochs),
        updates: 0,
    };

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let pairs: Vec<_> = idx.iter().map(|&i| data.pair(i)).collect();
            let (loss, mut grads) = model.loss_and_grad(&pairs, schedule, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite training loss at epoch {epoch}, batch {b}"
                )));
            }
            epoch_loss += loss;
            let norm = grads.norm();
            if norm > config.grad_clip {
                grads.scale(config.grad_clip / norm);
            }
            let lr = if config.cosine_decay {
                let progress = report.updates as f64 / total_updates as f64;
                config.learning_rate * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
            } else {
                config.learning_rate
            };
            apply_update(model, &mut velocity, &grads, lr, config.momentum);
            report.updates += 1;
        }
        report.loss_curve.push(epoch_loss / batches_per_epoch as f64);
        let eval = model.batch_loss(&eval_batch);
        if !eval.is_finite() {
            return Err(Error::Numerical(format!("non-finite evaluation loss after epoch {epoch}")));
        }
        report.eval_curve.push(eval);
        log::debug!(
            "epoch {epoch}: train {:.5} eval {:.5}",
            report.loss_curve[epoch],
            eval
        );
    }
    Ok(report)
}

fn apply_update(model: &mut DenoiserModel, velocity: &mut Gradients, grads: &Gradients, lr: f64, momentum: f64) {
    for (i, layer) in model.layers_mut().iter_mut().enumerate() {
        let params = layer.weights.iter_mut().chain(layer.bias.iter_mut());
        let vel = velocity.weights[i].iter_mut().chain(velocity.biases[i].iter_mut());
        let g = grads.weights[i].iter().chain(grads.biases[i].iter());
        for ((p, v), g) in params.zip(vel).zip(g) {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, ModelLayout};
    use crate::schedule::ScheduleKind;

    fn layout() -> ModelLayout {
        ModelLayout {
            horizon: 4,
            action_dim: 2,
            obs_dim: 2,
            obs_history: 2,
            step_embed_dim: 8,
            total_steps: 50,
        }
    }

    fn constant_data(n: usize) -> TrainingData {
        TrainingData {
            chunk_len: 8,
            cond_len: 4,
            chunks: vec![0.0; n * 8],
            conds: (0..n * 4).map(|i| ((i % 7) as f64 - 3.0) / 3.0).collect(),
        }
    }

    #[test]
    fn zero_learning_rate_leaves_model_untouched() {
        let sched = NoiseSchedule::new(ScheduleKind::SquaredCosine, 50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = DenoiserModel::new(layout(), &[16, 16], Activation::Relu, &mut rng).unwrap();
        let before = model.clone();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 32,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &constant_data(100), &sched, &cfg).unwrap();
        assert_eq!(model, before);
        assert!(report.eval_curve.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn training_is_reproducible() {
        let sched = NoiseSchedule::new(ScheduleKind::SquaredCosine, 50).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut model = DenoiserModel::new(layout(), &[16, 16], Activation::Relu, &mut rng).unwrap();
            let cfg = TrainConfig {
                epochs: 4,
                batch_size: 16,
                seed: 9,
                ..TrainConfig::default()
            };
            train(&mut model, &constant_data(64), &sched, &cfg).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn constant_actions_are_learned() {
        let sched = NoiseSchedule::new(ScheduleKind::SquaredCosine, 50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = DenoiserModel::new(layout(), &[32, 32], Activation::Relu, &mut rng).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 3,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &constant_data(512), &sched, &cfg).unwrap();
        let (first, last) = (report.loss_curve[0], *report.loss_curve.last().unwrap());
        assert!(last < 0.1 * first, "loss {first} -> {last}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { learning_rate: f64::NAN, ..TrainConfig::default() },
            TrainConfig { momentum: 1.0, ..TrainConfig::default() },
            TrainConfig { grad_clip: 0.0, ..TrainConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn exploding_updates_abort_with_diagnostic() {
        let sched = NoiseSchedule::new(ScheduleKind::SquaredCosine, 50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = DenoiserModel::new(layout(), &[16], Activation::Relu, &mut rng).unwrap();
        model.set_param(0, f64::INFINITY);
        let cfg = TrainConfig { epochs: 1, batch_size: 8, ..TrainConfig::default() };
        let err = train(&mut model, &constant_data(16), &sched, &cfg).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
    }
}
