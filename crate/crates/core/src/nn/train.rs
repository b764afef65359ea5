//! Mini-batch training loop with chronological validation and early stopping.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::rmsprop_step;
use super::Network;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub gradient_clip_norm: Option<f64>,
    pub seed: u64,
    /// Trailing fraction of the training windows held out for validation.
    pub validation_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            rmsprop_decay: 0.9,
            epsilon: 1e-8,
            epochs: 100,
            batch_size: 32,
            gradient_clip_norm: Some(5.0),
            seed: 0,
            validation_fraction: 0.1,
            patience: Some(10),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::param("learning_rate must be positive"));
        }
        if !(self.rmsprop_decay > 0.0 && self.rmsprop_decay < 1.0) {
            return Err(Error::param("rmsprop_decay must lie in (0, 1)"));
        }
        if !(self.epsilon > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::param("epsilon, batch_size and epochs must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::param("validation_fraction must lie in [0, 1)"));
        }
        if self.gradient_clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::param("gradient_clip_norm must be positive"));
        }
        Ok(())
    }
}

/// Supervised windows: `inputs` is `n x steps x width`, `extra` holds the
/// head-side inputs and `targets` the next-window values.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowDataset {
    pub inputs: Array3<f64>,
    pub extra: Array2<f64>,
    pub targets: Array2<f64>,
}

impl WindowDataset {
    pub fn new(inputs: Array3<f64>, extra: Array2<f64>, targets: Array2<f64>) -> Result<Self> {
        let n = inputs.dim().0;
        if extra.nrows() != n || targets.nrows() != n {
            return Err(Error::shape(format!(
                "{n} windows but {} extra rows and {} targets",
                extra.nrows(),
                targets.nrows()
            )));
        }
        Ok(Self { inputs, extra, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select(Axis(0), idx),
            extra: self.extra.select(Axis(0), idx),
            targets: self.targets.select(Axis(0), idx),
        }
    }

    pub fn range(&self, r: std::ops::Range<usize>) -> Self {
        let idx: Vec<usize> = r.collect();
        self.select(&idx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
}

/// Mean over all entries of the squared difference.
pub fn mse_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", pred.dim(), target.dim())));
    }
    if pred.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

fn dataset_mse<N: Network>(net: &N, data: &WindowDataset) -> Result<f64> {
    let pred = net.predict(data.inputs.view(), data.extra.view())?;
    mse_loss(pred.view(), data.targets.view())
}

/// Trains `net` in place of a copy and returns the best weights seen plus the
/// per-epoch loss history. With a validation split the best epoch is judged
/// on validation loss, otherwise on training loss.
pub fn train<N: Network>(net: N, data: &WindowDataset, config: &TrainConfig) -> Result<(N, Vec<EpochLoss>)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training windows"));
    }
    let n_val = ((data.len() as f64) * config.validation_fraction).floor() as usize;
    let n_val = if n_val >= data.len() { 0 } else { n_val };
    let n_train = data.len() - n_val;
    let train_set = data.range(0..n_train);
    let val_set = (n_val > 0).then(|| data.range(n_train..data.len()));

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = net;
    let mut state = net.zeros_like();
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best = (f64::INFINITY, net.clone());
    let mut since_best = 0usize;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = train_set.select(chunk);
            let (loss, grad) = net.loss_grad(batch.inputs.view(), batch.extra.view(), batch.targets.view())?;
            rmsprop_step(&mut net, &grad, &mut state, config);
            sum += loss * chunk.len() as f64;
        }
        let train_mse = sum / n_train as f64;
        let val_mse = val_set.as_ref().map(|v| dataset_mse(&net, v)).transpose()?;
        history.push(EpochLoss {
            epoch,
            train_mse,
            val_mse,
        });
        if !train_mse.is_finite() {
            log::warn!("training diverged at epoch {epoch}");
            break;
        }
        let score = val_mse.unwrap_or(train_mse);
        if score < best.0 {
            best = (score, net.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience.is_some_and(|p| since_best >= p) {
                log::debug!("early stop at epoch {epoch}");
                break;
            }
        }
    }
    Ok((best.1, history))
}
