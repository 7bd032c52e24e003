use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::dataset::SyntheticScene;
use crate::error::{Error, Result};
use crate::net::{Gradients, Network};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 0.03,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub held_out_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub initial_accuracy: f64,
    pub history: Vec<EpochStats>,
}

impl TrainOutcome {
    pub fn final_accuracy(&self) -> f64 {
        self.history
            .last()
            .map_or(self.initial_accuracy, |e| e.held_out_accuracy)
    }
}

/// Fraction of scenes whose predicted class matches the pattern class. Images
/// go through the network's preprocessing first.
pub fn accuracy(net: &Network, scenes: &[SyntheticScene]) -> Result<f64> {
    if scenes.is_empty() {
        return Ok(0.0);
    }
    let pre = &net.spec().preprocess;
    let correct: Vec<bool> = scenes
        .par_iter()
        .map(|s| Ok(net.forward(&pre.apply(&s.image)?)?.predicted == s.pattern_class))
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / scenes.len() as f64)
}

/// `w - lr * g` for every parameter.
pub fn sgd_step(net: &Network, grads: &Gradients, learning_rate: f64) -> Result<Network> {
    let w = net.flat_params();
    let g = grads.flat();
    let updated: Vec<f64> = w.iter().zip(&g).map(|(w, g)| w - learning_rate * g).collect();
    net.with_flat_params(&updated)
}

/// Plain minibatch SGD on softmax cross-entropy over preprocessed images.
pub fn train(
    net: &Network,
    train_set: &[SyntheticScene],
    held_out: &[SyntheticScene],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if let Some(s) = train_set
        .iter()
        .chain(held_out)
        .find(|s| s.pattern_class >= net.spec().class_count)
    {
        return Err(Error::Config(format!(
            "scene class {} exceeds network class count {}",
            s.pattern_class,
            net.spec().class_count
        )));
    }
    let pre = &net.spec().preprocess;
    let inputs: Vec<Tensor> = train_set
        .iter()
        .map(|s| pre.apply(&s.image))
        .collect::<Result<_>>()?;
    let initial_accuracy = accuracy(net, held_out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut current = net.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let diverged = |e: Error| match e {
            Error::Numeric(message) => Error::Training { epoch, message },
            other => other,
        };
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk
                .iter()
                .map(|&i| (&inputs[i], train_set[i].pattern_class))
                .collect();
            let grads = current.batch_gradients(&batch).map_err(diverged)?;
            if !grads.loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: format!("loss became {}", grads.loss),
                });
            }
            loss_sum += grads.loss;
            batches += 1;
            if cfg.learning_rate != 0.0 {
                current = sgd_step(&current, &grads, cfg.learning_rate).map_err(diverged)?;
            }
        }
        history.push(EpochStats {
            epoch,
            mean_loss: loss_sum / batches.max(1) as f64,
            held_out_accuracy: accuracy(&current, held_out).map_err(diverged)?,
        });
    }
    Ok(TrainOutcome {
        network: current,
        initial_accuracy,
        history,
    })
}
