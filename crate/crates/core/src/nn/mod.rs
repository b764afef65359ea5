//! Recurrent and dense networks trained with manual backpropagation.

mod cell;
mod forecast;
mod gradcheck;
mod mlp;
mod optim;
mod stack;
mod train;

pub use cell::{Cell, CellKind, State, StepCache};
pub use forecast::{make_windows, Architecture, ForecastData, ForecastModel, Net};
pub use gradcheck::{gradient_check, GradCheck};
pub use mlp::DenseNet;
pub use optim::{clip_scale, global_norm, rmsprop_step, rmsprop_update};
pub use stack::StackedNet;
pub use train::{mse_loss, train, EpochLoss, TrainConfig, WindowDataset};

use ndarray::{Array1, Array2, ArrayView2, ArrayView3, Axis};
use rand::Rng;

use crate::error::{Error, Result};

/// Logistic function, evaluated without overflow for any finite input.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Glorot-uniform `rows x cols` matrix.
pub(crate) fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let limit = (6.0 / (rows + cols).max(1) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..=limit))
}

/// Affine layer `y = x W^T + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array2::zeros((output, input)),
            b: Array1::zeros(output),
        }
    }

    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w: glorot(output, input, rng),
            b: Array1::zeros(output),
        }
    }

    pub fn input(&self) -> usize {
        self.w.ncols()
    }

    pub fn output(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    /// Accumulates weight gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: &Array2<f64>, grad: &mut Dense) -> Array2<f64> {
        ndarray::linalg::general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut grad.w);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w)
    }

    pub fn params(&self) -> [&[f64]; 2] {
        [
            self.w.as_slice().expect("standard layout"),
            self.b.as_slice().expect("standard layout"),
        ]
    }

    pub fn params_mut(&mut self) -> [&mut [f64]; 2] {
        [
            self.w.as_slice_mut().expect("standard layout"),
            self.b.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// A model mapping a batch of input windows (`batch x steps x width`) plus
/// per-window extra head inputs (`batch x extra`) to predictions.
///
/// Gradients and optimizer state are values of the same type, so parameter
/// slices line up one-to-one.
pub trait Network: Clone + Send + Sync {
    fn predict(&self, x: ArrayView3<f64>, extra: ArrayView2<f64>) -> Result<Array2<f64>>;

    /// Mean squared error over the batch and its gradient.
    fn loss_grad(&self, x: ArrayView3<f64>, extra: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Self)>;

    fn zeros_like(&self) -> Self;

    fn params(&self) -> Vec<&[f64]>;

    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Shared checks on a batch; returns the batch size.
pub(crate) fn check_batch(
    x: &ArrayView3<f64>,
    extra: &ArrayView2<f64>,
    steps: Option<usize>,
    width: usize,
    n_extra: usize,
) -> Result<usize> {
    let (b, t, d) = x.dim();
    if d != width || extra.ncols() != n_extra || extra.nrows() != b || steps.is_some_and(|s| s != t) || t == 0 {
        return Err(Error::shape(format!(
            "network expects (_, {}, {width}) inputs with {n_extra} extras, got {:?} and {:?}",
            steps.map_or("t".to_string(), |s| s.to_string()),
            x.dim(),
            extra.dim()
        )));
    }
    Ok(b)
}

/// Head gradient of the mean squared error: `2 (y - target) / (batch * out)`.
pub(crate) fn mse_grad(pred: &Array2<f64>, target: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(format!("prediction {:?} vs target {:?}", pred.dim(), target.dim())));
    }
    let n = pred.len().max(1) as f64;
    let diff = pred - &target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff * (2.0 / n)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(2.0) - 0.880_797_077_977_882_4).abs() < 1e-15);
        for x in [-700.0, -3.2, 0.1, 5.0, 700.0] {
            let s = sigmoid(x);
            assert!(s.is_finite() && (0.0..=1.0).contains(&s));
            assert!((sigmoid(-x) - (1.0 - s)).abs() < 1e-15);
        }
    }
}
