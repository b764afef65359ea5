//! Coefficient-vector forecaster: windowing, normalization, training and
//! next-window demand prediction.

use std::ops::Range;

use ndarray::{concatenate, s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{train, EpochLoss, TrainConfig, WindowDataset};
use super::{CellKind, DenseNet, Network, StackedNet};
use crate::error::{Error, Result};
use crate::features::{select_columns, FeatureSet, MinMaxScaler};
use crate::nmf::NmfModel;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Architecture {
    Recurrent { cell: CellKind, hidden: Vec<usize> },
    Mlp { hidden: Vec<usize> },
}

impl Architecture {
    pub fn recurrent(cell: CellKind, hidden: &[usize]) -> Self {
        Architecture::Recurrent {
            cell,
            hidden: hidden.to_vec(),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Architecture::Recurrent { cell, .. } => cell.label(),
            Architecture::Mlp { .. } => "mlp",
        }
    }

    pub fn hidden(&self) -> &[usize] {
        match self {
            Architecture::Recurrent { hidden, .. } | Architecture::Mlp { hidden } => hidden,
        }
    }

    fn init(&self, steps: usize, input: usize, extra: usize, output: usize, seed: u64) -> Result<Net> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match self {
            Architecture::Recurrent { cell, hidden } => {
                Net::Recurrent(StackedNet::init(*cell, input, hidden, extra, output, &mut rng)?)
            }
            Architecture::Mlp { hidden } => Net::Mlp(DenseNet::init(steps, input, hidden, extra, output, &mut rng)?),
        })
    }

    /// Zero-weight network of this shape, used when loading stored weights.
    pub fn zeros(&self, steps: usize, input: usize, extra: usize, output: usize) -> Result<Net> {
        Ok(match self {
            Architecture::Recurrent { cell, hidden } => {
                Net::Recurrent(StackedNet::zeros(*cell, input, hidden, extra, output)?)
            }
            Architecture::Mlp { hidden } => Net::Mlp(DenseNet::zeros(steps, input, hidden, extra, output)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Net {
    Recurrent(StackedNet),
    Mlp(DenseNet),
}

impl Network for Net {
    fn predict(&self, x: ArrayView3<f64>, extra: ArrayView2<f64>) -> Result<Array2<f64>> {
        match self {
            Net::Recurrent(n) => n.predict(x, extra),
            Net::Mlp(n) => n.predict(x, extra),
        }
    }

    fn loss_grad(&self, x: ArrayView3<f64>, extra: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Self)> {
        Ok(match self {
            Net::Recurrent(n) => {
                let (l, g) = n.loss_grad(x, extra, target)?;
                (l, Net::Recurrent(g))
            }
            Net::Mlp(n) => {
                let (l, g) = n.loss_grad(x, extra, target)?;
                (l, Net::Mlp(g))
            }
        })
    }

    fn zeros_like(&self) -> Self {
        match self {
            Net::Recurrent(n) => Net::Recurrent(n.zeros_like()),
            Net::Mlp(n) => Net::Mlp(n.zeros_like()),
        }
    }

    fn params(&self) -> Vec<&[f64]> {
        match self {
            Net::Recurrent(n) => n.params(),
            Net::Mlp(n) => n.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Net::Recurrent(n) => n.params_mut(),
            Net::Mlp(n) => n.params_mut(),
        }
    }
}

/// Raw (unnormalized) per-window coefficient vectors and exogenous features
/// over one contiguous span.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastData {
    pub coefficients: Array2<f64>,
    pub features: Array2<f64>,
}

impl ForecastData {
    pub fn new(coefficients: Array2<f64>, features: Array2<f64>) -> Result<Self> {
        if coefficients.nrows() != features.nrows() {
            return Err(Error::Misaligned(format!(
                "{} coefficient rows vs {} feature rows",
                coefficients.nrows(),
                features.nrows()
            )));
        }
        Ok(Self { coefficients, features })
    }

    pub fn len(&self) -> usize {
        self.coefficients.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends `other` after `self` along time.
    pub fn concat(&self, other: &ForecastData) -> Result<Self> {
        let c = concatenate![Axis(0), self.coefficients, other.coefficients];
        let f = concatenate![Axis(0), self.features, other.features];
        Self::new(c, f)
    }
}

/// Builds supervised windows predicting row `tau` from rows `tau - lag..tau`.
///
/// Each input step is the coefficient row joined with the feature row. With
/// `head_forecast` the target window's own features go to the head.
pub fn make_windows(
    coefficients: &Array2<f64>,
    features: &Array2<f64>,
    lag: usize,
    targets: Range<usize>,
    head_forecast: bool,
) -> Result<WindowDataset> {
    if lag == 0 {
        return Err(Error::param("lag must be at least 1"));
    }
    if coefficients.nrows() != features.nrows() {
        return Err(Error::Misaligned("coefficient and feature rows differ".into()));
    }
    if targets.start < lag || targets.end > coefficients.nrows() {
        return Err(Error::InsufficientHistory(format!(
            "targets {targets:?} with lag {lag} over {} windows",
            coefficients.nrows()
        )));
    }
    let (m, f) = (coefficients.ncols(), features.ncols());
    let n = targets.len();
    let mut inputs = Array3::zeros((n, lag, m + f));
    let mut extra = Array2::zeros((n, if head_forecast { f } else { 0 }));
    let mut y = Array2::zeros((n, m));
    for (i, tau) in targets.enumerate() {
        let mut win = inputs.index_axis_mut(Axis(0), i);
        win.slice_mut(s![.., ..m])
            .assign(&coefficients.slice(s![tau - lag..tau, ..]));
        win.slice_mut(s![.., m..]).assign(&features.slice(s![tau - lag..tau, ..]));
        if head_forecast {
            extra.row_mut(i).assign(&features.row(tau));
        }
        y.row_mut(i).assign(&coefficients.row(tau));
    }
    WindowDataset::new(inputs, extra, y)
}

/// Trained forecaster plus everything needed to turn raw inputs into
/// denormalized coefficient forecasts.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastModel {
    pub arch: Architecture,
    pub lag: usize,
    pub features: FeatureSet,
    pub head_forecast: bool,
    /// Columns of the full feature matrix the model reads.
    pub feature_columns: Vec<usize>,
    pub coef_scaler: MinMaxScaler,
    pub feature_scaler: MinMaxScaler,
    pub config: TrainConfig,
    pub history: Vec<EpochLoss>,
    pub net: Net,
}

impl ForecastModel {
    /// Fits normalization on `train` and trains on every window of it that
    /// has `lag` windows of history.
    pub fn fit(
        arch: Architecture,
        lag: usize,
        features: FeatureSet,
        head_forecast: bool,
        train_data: &ForecastData,
        config: &TrainConfig,
    ) -> Result<Self> {
        if lag >= train_data.len() {
            return Err(Error::InsufficientHistory(format!(
                "lag {lag} needs more than {} training windows",
                train_data.len()
            )));
        }
        let feature_columns = select_columns(features, train_data.features.ncols());
        let coef_scaler = MinMaxScaler::fit(&train_data.coefficients);
        let feature_scaler = MinMaxScaler::fit(&train_data.features.select(Axis(1), &feature_columns));
        let mut model = Self {
            arch,
            lag,
            features,
            head_forecast,
            feature_columns,
            coef_scaler,
            feature_scaler,
            config: config.clone(),
            history: Vec::new(),
            net: Net::Mlp(DenseNet::zeros(1, 1, &[1], 0, 1)?),
        };
        let (c, f) = model.normalize(train_data)?;
        let data = make_windows(&c, &f, lag, lag..train_data.len(), head_forecast)?;
        let (steps, width) = (data.inputs.dim().1, data.inputs.dim().2);
        let net = model
            .arch
            .init(steps, width, data.extra.ncols(), c.ncols(), config.seed)?;
        let (net, history) = train(net, &data, config)?;
        model.net = net;
        model.history = history;
        Ok(model)
    }

    pub fn label(&self) -> &'static str {
        self.arch.label()
    }

    pub fn n_params(&self) -> usize {
        self.net.n_params()
    }

    pub fn n_components(&self) -> usize {
        self.coef_scaler.width()
    }

    fn normalize(&self, data: &ForecastData) -> Result<(Array2<f64>, Array2<f64>)> {
        if data.features.ncols() <= self.feature_columns.iter().copied().max().unwrap_or(0) && !self.feature_columns.is_empty() {
            return Err(Error::shape("feature matrix narrower than the model's columns"));
        }
        let c = self.coef_scaler.transform(&data.coefficients)?;
        let f = self
            .feature_scaler
            .transform(&data.features.select(Axis(1), &self.feature_columns))?;
        Ok((c, f))
    }

    /// Denormalized, non-negative coefficient forecasts for every row of
    /// `targets`, each using the `lag` preceding rows of `data`.
    pub fn predict_range(&self, data: &ForecastData, targets: Range<usize>) -> Result<Array2<f64>> {
        let (c, f) = self.normalize(data)?;
        let windows = make_windows(&c, &f, self.lag, targets, self.head_forecast)?;
        let y = self.net.predict(windows.inputs.view(), windows.extra.view())?;
        let mut y = self.coef_scaler.inverse(&y)?;
        y.mapv_inplace(|v| v.max(0.0));
        Ok(y)
    }

    /// Next-window demand from the last `lag` coefficient and feature rows and
    /// the next window's features.
    pub fn predict_next(
        &self,
        last_coefficients: &Array2<f64>,
        last_features: &Array2<f64>,
        next_features: &Array1<f64>,
        nmf: &NmfModel,
    ) -> Result<Array1<f64>> {
        if last_coefficients.nrows() != self.lag || last_features.nrows() != self.lag {
            return Err(Error::shape(format!("expected {} history rows", self.lag)));
        }
        if nmf.n_components() != self.n_components() {
            return Err(Error::shape(format!(
                "forecaster predicts {} coefficients, basis has {}",
                self.n_components(),
                nmf.n_components()
            )));
        }
        let pad = Array2::zeros((1, self.n_components()));
        let coefs = concatenate![Axis(0), *last_coefficients, pad];
        let feats = concatenate![Axis(0), *last_features, next_features.view().insert_axis(Axis(0))];
        let data = ForecastData::new(coefs, feats)?;
        let coef = self.predict_range(&data, self.lag..self.lag + 1)?;
        Ok(nmf.inverse(&coef)?.row(0).to_owned())
    }
}
