//! End-to-end experiment: cluster, aggregate, decompose, fit every model and
//! score it on the test span.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use chrono::{NaiveDate, TimeDelta};
use ndarray::{concatenate, s, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{calendar_range, knn_predict_batch, var_fit_exog, CalendarKind, VarModel};
use crate::cluster::{filter_insignificant, grid_partition, k_search, kmeans_4d, pair_2d, KSearchReport, TravelClusterModel, DEFAULT_MIN_TRAVELS};
use crate::error::{Error, Result};
use crate::features::{build_features, select_columns, FeatureSet, MinMaxScaler};
use crate::geo::Trip;
use crate::metrics::{evaluate, EvalReport};
use crate::nmf::{nmf_fit, NmfConfig, NmfModel};
use crate::nn::{make_windows, Architecture, CellKind, ForecastData, ForecastModel, TrainConfig};
use crate::series::{aggregate_od_series, train_test_split, OdSeries};
use crate::synth::WeatherTable;

/// A forecasting model taking part in the comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    Recurrent(CellKind),
    Mlp,
    Var,
    Knn,
    Calendar(CalendarKind),
}

impl ModelKind {
    pub fn label(&self) -> String {
        match self {
            ModelKind::Recurrent(c) => format!("nmf_{c}"),
            ModelKind::Mlp => "nmf_mlp".into(),
            ModelKind::Var => "nmf_var".into(),
            ModelKind::Knn => "nmf_knn".into(),
            ModelKind::Calendar(c) => c.label().into(),
        }
    }

    pub fn all() -> Vec<ModelKind> {
        let mut v: Vec<ModelKind> = CellKind::ALL.into_iter().map(ModelKind::Recurrent).collect();
        v.extend([ModelKind::Mlp, ModelKind::Var, ModelKind::Knn]);
        v.extend(CalendarKind::ALL.into_iter().map(ModelKind::Calendar));
        v
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        if s.starts_with("calendar") {
            return s.parse().map(ModelKind::Calendar);
        }
        match s.trim_start_matches("nmf_") {
            "mlp" => Ok(ModelKind::Mlp),
            "var" => Ok(ModelKind::Var),
            "knn" => Ok(ModelKind::Knn),
            other => other.parse().map(ModelKind::Recurrent),
        }
    }
}

impl Serialize for ModelKindList {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.0.iter().map(|m| m.label()))
    }
}

impl<'de> Deserialize<'de> for ModelKindList {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        names
            .iter()
            .map(|n| n.parse().map_err(serde::de::Error::custom))
            .collect::<std::result::Result<_, _>>()
            .map(ModelKindList)
    }
}

/// How trips are grouped into flows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ClusterSpec {
    /// K-means in origin-destination space with `n_clusters` flows, or the
    /// smallest candidate K meeting `zone_search`.
    FourD,
    Paired2d { k_origin: usize, k_dest: usize },
    Grid { cell_size_m: f64 },
}

/// Choose K as the smallest candidate whose mean zone size meets the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneSearch {
    pub target_zone_max_m: f64,
    pub candidate_ks: Vec<usize>,
}

/// Model list serialized by label, e.g. `["nmf_gru", "calendar_hourly"]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelKindList(pub Vec<ModelKind>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub clustering: ClusterSpec,
    pub n_clusters: usize,
    pub zone_search: Option<ZoneSearch>,
    pub min_travels: usize,
    pub cluster_seed: u64,
    pub window_minutes: i64,
    /// Input windows per forecast.
    pub lag: usize,
    pub nmf: NmfConfig,
    pub train_days: i64,
    pub test_days: i64,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub features: FeatureSet,
    /// Feed the target window's weather and time features to the head.
    pub head_forecast: bool,
    /// Give NMF-VAR the target window's features as exogenous regressors.
    /// Off by default: the baseline regresses on past coefficients only.
    pub var_exogenous: bool,
    pub knn_k: usize,
    pub models: ModelKindList,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            clustering: ClusterSpec::FourD,
            n_clusters: 200,
            zone_search: None,
            min_travels: DEFAULT_MIN_TRAVELS,
            cluster_seed: 0,
            window_minutes: 60,
            lag: 3,
            nmf: NmfConfig::new(20),
            train_days: 38,
            test_days: 7,
            hidden: vec![128, 128, 128],
            train: TrainConfig::default(),
            features: FeatureSet::ALL,
            head_forecast: true,
            var_exogenous: false,
            knn_k: 5,
            models: ModelKindList(ModelKind::all()),
        }
    }
}

impl ExperimentConfig {
    pub fn window_len(&self) -> TimeDelta {
        TimeDelta::minutes(self.window_minutes)
    }

    /// Lag covering the same 3 hours at a different window length.
    pub fn lag_for_window(window_minutes: i64) -> usize {
        (180 / window_minutes.max(1)).max(1) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_minutes <= 0 || 1440 % self.window_minutes != 0 {
            return Err(Error::param("window_minutes must divide a day"));
        }
        if self.lag == 0 || self.n_clusters == 0 || self.knn_k == 0 {
            return Err(Error::param("lag, n_clusters and knn_k must be positive"));
        }
        if self.train_days <= 0 || self.test_days <= 0 {
            return Err(Error::param("split days must be positive"));
        }
        self.train.validate()
    }
}

/// Clustered, aggregated and decomposed data over the train and test spans.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub clusters: TravelClusterModel,
    /// Counts over the full span, one column per retained flow.
    pub series: OdSeries,
    pub n_train: usize,
    pub nmf: NmfModel,
    /// Train coefficients from the fit, test coefficients from projection.
    pub coefficients: Array2<f64>,
    pub features: Array2<f64>,
}

impl Prepared {
    pub fn n_test(&self) -> usize {
        self.series.n_windows() - self.n_train
    }

    pub fn test_range(&self) -> Range<usize> {
        self.n_train..self.series.n_windows()
    }

    pub fn test_counts(&self) -> Array2<f64> {
        self.series.counts.slice(s![self.n_train.., ..]).to_owned()
    }

    pub fn windows_per_day(&self) -> usize {
        self.series.windows_per_day()
    }

    pub fn data(&self) -> Result<ForecastData> {
        ForecastData::new(self.coefficients.clone(), self.features.clone())
    }

    pub fn train_data(&self) -> Result<ForecastData> {
        ForecastData::new(
            self.coefficients.slice(s![..self.n_train, ..]).to_owned(),
            self.features.slice(s![..self.n_train, ..]).to_owned(),
        )
    }
}

/// Clusters the training-span trips and drops small flows. Returns the
/// K sweep when a zone-size search chose K.
pub fn cluster_training_trips(
    trips: &[Trip],
    split_at: chrono::DateTime<chrono::Utc>,
    cfg: &ExperimentConfig,
) -> Result<(TravelClusterModel, Option<KSearchReport>)> {
    let train: Vec<Trip> = trips.iter().filter(|t| t.timestamp < split_at).cloned().collect();
    if train.is_empty() {
        return Err(Error::Empty("training trips"));
    }
    let mut search = None;
    let model = match &cfg.clustering {
        ClusterSpec::FourD => {
            let k = match &cfg.zone_search {
                Some(z) => {
                    let report = k_search(&train, z.target_zone_max_m, &z.candidate_ks, cfg.cluster_seed)?;
                    let k = report.chosen_k;
                    search = Some(report);
                    k
                }
                None => cfg.n_clusters,
            };
            kmeans_4d(&train, k.min(train.len()), cfg.cluster_seed)?
        }
        ClusterSpec::Paired2d { k_origin, k_dest } => pair_2d(
            &train,
            (*k_origin).min(train.len()),
            (*k_dest).min(train.len()),
            cfg.cluster_seed,
        )?,
        ClusterSpec::Grid { cell_size_m } => grid_partition(&train, *cell_size_m)?,
    };
    let (model, dropped) = filter_insignificant(&model, cfg.min_travels);
    log::info!(
        "clustered {} training trips into {} flows, dropped {} below {} trips",
        train.len(),
        model.n_flows(),
        dropped.len(),
        cfg.min_travels
    );
    Ok((model, search))
}

/// Windows the counts and splits them chronologically.
pub fn aggregate(
    trips: &[Trip],
    clusters: &TravelClusterModel,
    start: chrono::DateTime<chrono::Utc>,
    cfg: &ExperimentConfig,
) -> Result<(OdSeries, usize)> {
    let end = start + TimeDelta::days(cfg.train_days + cfg.test_days);
    let in_span: Vec<Trip> = trips
        .iter()
        .filter(|t| t.timestamp >= start && t.timestamp < end)
        .cloned()
        .collect();
    let ids = clusters.assign_trips(&in_span);
    let series = aggregate_od_series(&in_span, &ids, clusters.n_flows(), start, end, cfg.window_len())?;
    let (train, _) = train_test_split(&series, cfg.train_days, cfg.test_days)?;
    Ok((series, train.n_windows()))
}

/// NMF on the training counts and projection of the test counts.
pub fn decompose(series: &OdSeries, n_train: usize, nmf: &NmfConfig) -> Result<(NmfModel, Array2<f64>)> {
    let train = series.counts.slice(s![..n_train, ..]).to_owned();
    let test = series.counts.slice(s![n_train.., ..]).to_owned();
    let model = nmf_fit(&train, nmf)?;
    let test_coef = model.transform(&test)?;
    let coefficients = concatenate![Axis(0), model.coefficients, test_coef];
    Ok((model, coefficients))
}

/// Runs clustering through decomposition.
pub fn prepare(
    trips: &[Trip],
    weather: &WeatherTable,
    holidays: &[NaiveDate],
    cfg: &ExperimentConfig,
) -> Result<Prepared> {
    cfg.validate()?;
    let start = weather.start;
    let split_at = start + TimeDelta::days(cfg.train_days);
    let (clusters, _) = cluster_training_trips(trips, split_at, cfg)?;
    let (series, n_train) = aggregate(trips, &clusters, start, cfg)?;
    let (nmf, coefficients) = decompose(&series, n_train, &cfg.nmf)?;
    let features = build_features(weather, &series.window_starts, holidays, cfg.window_len())?;
    Ok(Prepared {
        clusters,
        series,
        n_train,
        nmf,
        coefficients,
        features,
    })
}

/// Test-span demand predictions of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub model: String,
    pub predictions: Array2<f64>,
    /// Trainable parameters, for network models.
    pub n_params: Option<usize>,
    pub forecaster: Option<ForecastModel>,
}

fn to_demand(nmf: &NmfModel, mut coef: Array2<f64>) -> Result<Array2<f64>> {
    coef.mapv_inplace(|v| v.max(0.0));
    nmf.inverse(&coef)
}

/// Normalized windows for the non-network NMF baselines.
fn flat_windows(prep: &Prepared, cfg: &ExperimentConfig, targets: Range<usize>, scalers: &(MinMaxScaler, MinMaxScaler, Vec<usize>)) -> Result<(Array2<f64>, Array2<f64>)> {
    let (cs, fs, cols) = scalers;
    let c = cs.transform(&prep.coefficients)?;
    let f = fs.transform(&prep.features.select(Axis(1), cols))?;
    let w = make_windows(&c, &f, cfg.lag, targets, cfg.head_forecast)?;
    let n = w.len();
    let flat = w
        .inputs
        .into_shape_with_order((n, cfg.lag * (c.ncols() + f.ncols())))
        .map_err(|e| Error::shape(e.to_string()))?;
    Ok((concatenate![Axis(1), flat, w.extra], w.targets))
}

/// Trained state of one model. KNN and the calendar models keep no state
/// beyond the data itself.
#[derive(Debug, Clone)]
pub enum Fitted {
    Network(Box<ForecastModel>),
    Var(VarModel),
    Lazy,
}

/// Min-max scaled feature columns used as VAR regressors, when enabled.
fn var_exog(prep: &Prepared, cfg: &ExperimentConfig) -> Option<Array2<f64>> {
    let cols = select_columns(cfg.features, prep.features.ncols());
    if !cfg.var_exogenous || cols.is_empty() {
        return None;
    }
    let f = prep.features.select(Axis(1), &cols);
    let scaler = MinMaxScaler::fit(&f.slice(s![..prep.n_train, ..]).to_owned());
    Some(scaler.transform(&f).expect("scaler fitted on the same columns"))
}

/// Fits `kind` on the training span.
pub fn fit_model(prep: &Prepared, kind: ModelKind, cfg: &ExperimentConfig) -> Result<Fitted> {
    Ok(match kind {
        ModelKind::Recurrent(_) | ModelKind::Mlp => {
            let arch = match kind {
                ModelKind::Recurrent(cell) => Architecture::recurrent(cell, &cfg.hidden),
                _ => Architecture::Mlp {
                    hidden: cfg.hidden.clone(),
                },
            };
            let model = ForecastModel::fit(arch, cfg.lag, cfg.features, cfg.head_forecast, &prep.train_data()?, &cfg.train)?;
            Fitted::Network(Box::new(model))
        }
        ModelKind::Var => {
            let exog = var_exog(prep, cfg);
            let train_coef = prep.coefficients.slice(s![..prep.n_train, ..]).to_owned();
            let train_exog = exog.as_ref().map(|e| e.slice(s![..prep.n_train, ..]).to_owned());
            Fitted::Var(var_fit_exog(&train_coef, train_exog.as_ref(), cfg.lag)?)
        }
        ModelKind::Knn | ModelKind::Calendar(_) => Fitted::Lazy,
    })
}

/// Demand predictions of a fitted model for every test window.
pub fn predict_model(prep: &Prepared, kind: ModelKind, fitted: &Fitted, cfg: &ExperimentConfig) -> Result<Array2<f64>> {
    let targets = prep.test_range();
    match (kind, fitted) {
        (ModelKind::Recurrent(_) | ModelKind::Mlp, Fitted::Network(model)) => {
            let coef = model.predict_range(&prep.data()?, targets)?;
            prep.nmf.inverse(&coef)
        }
        (ModelKind::Var, Fitted::Var(var)) => {
            let exog = var_exog(prep, cfg);
            let coef = var.predict_range(&prep.coefficients, exog.as_ref(), targets)?;
            to_demand(&prep.nmf, coef)
        }
        (ModelKind::Knn, Fitted::Lazy) => {
            let cols = select_columns(cfg.features, prep.features.ncols());
            let cs = MinMaxScaler::fit(&prep.coefficients.slice(s![..prep.n_train, ..]).to_owned());
            let fs = MinMaxScaler::fit(&prep.features.slice(s![..prep.n_train, ..]).select(Axis(1), &cols));
            let scalers = (cs, fs, cols);
            let (train_x, train_y) = flat_windows(prep, cfg, cfg.lag..prep.n_train, &scalers)?;
            let (test_x, _) = flat_windows(prep, cfg, targets, &scalers)?;
            let k = cfg.knn_k.min(train_x.nrows());
            let y = knn_predict_batch(train_x.view(), train_y.view(), test_x.view(), k)?;
            let coef = scalers.0.inverse(&y)?;
            to_demand(&prep.nmf, coef)
        }
        (ModelKind::Calendar(c), Fitted::Lazy) => calendar_range(&prep.series.counts, prep.windows_per_day(), c, targets),
        (kind, _) => Err(Error::param(format!("fitted state does not belong to {kind}"))),
    }
}

/// Fits `kind` on the training span and predicts every test window.
pub fn run_model(prep: &Prepared, kind: ModelKind, cfg: &ExperimentConfig) -> Result<ModelOutput> {
    let fitted = fit_model(prep, kind, cfg)?;
    let predictions = predict_model(prep, kind, &fitted, cfg)?;
    let (n_params, forecaster) = match fitted {
        Fitted::Network(m) => (Some(m.n_params()), Some(*m)),
        _ => (None, None),
    };
    Ok(ModelOutput {
        model: kind.label(),
        predictions,
        n_params,
        forecaster,
    })
}

/// First test window every model in `models` has history for.
pub fn first_common_target(prep: &Prepared, models: &[ModelKind], lag: usize) -> usize {
    let wpd = prep.windows_per_day();
    models
        .iter()
        .map(|m| match m {
            ModelKind::Calendar(c) => c.history(wpd),
            _ => lag,
        })
        .fold(prep.n_train, usize::max)
}

/// Scores outputs on the shared evaluable part of the test span.
pub fn score(prep: &Prepared, outputs: &[ModelOutput], from: usize, window_minutes: i64) -> Result<Vec<EvalReport>> {
    let skip = from.saturating_sub(prep.n_train);
    let target = prep.series.counts.slice(s![from.., ..]).to_owned();
    outputs
        .iter()
        .map(|o| {
            let p = o.predictions.slice(s![skip.., ..]).to_owned();
            evaluate(&o.model, window_minutes, &p, &target)
        })
        .collect()
}

/// Fits every configured model concurrently and scores each.
pub fn compare_models(prep: &Prepared, cfg: &ExperimentConfig) -> Result<(Vec<ModelOutput>, Vec<EvalReport>)> {
    let models = &cfg.models.0;
    let outputs: Vec<ModelOutput> = models
        .par_iter()
        .map(|&m| run_model(prep, m, cfg))
        .collect::<Result<_>>()?;
    let from = first_common_target(prep, models, cfg.lag);
    let reports = score(prep, &outputs, from, cfg.window_minutes)?;
    Ok((outputs, reports))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub lag: usize,
    pub cell: CellKind,
    pub mape_at_1: Option<f64>,
    pub mse: f64,
    pub mae: f64,
}

/// Trains one recurrent model per (input length, cell kind) and scores each
/// on the test windows all lengths can predict.
pub fn input_length_sweep(prep: &Prepared, lengths: &[usize], cells: &[CellKind], cfg: &ExperimentConfig) -> Result<Vec<SweepCell>> {
    let max_lag = lengths.iter().copied().max().ok_or(Error::Empty("input lengths"))?;
    if lengths.contains(&0) {
        return Err(Error::param("input lengths must be at least 1"));
    }
    if max_lag >= prep.n_train {
        return Err(Error::InsufficientHistory(format!(
            "input length {max_lag} exceeds {} training windows",
            prep.n_train
        )));
    }
    let grid: Vec<(usize, CellKind)> = lengths.iter().flat_map(|&l| cells.iter().map(move |&c| (l, c))).collect();
    grid.par_iter()
        .map(|&(lag, cell)| {
            let mut c = cfg.clone();
            c.lag = lag;
            let out = run_model(prep, ModelKind::Recurrent(cell), &c)?;
            let from = first_common_target(prep, &[], max_lag);
            let r = score(prep, &[out], from, cfg.window_minutes)?.remove(0);
            Ok(SweepCell {
                lag,
                cell,
                mape_at_1: r.mape_at_1,
                mse: r.mse,
                mae: r.mae,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub cell: CellKind,
    pub features: String,
    pub mape_at_1: Option<f64>,
    pub mse: f64,
    pub mae: f64,
}

/// Four runs per cell kind: no extra features, time only, weather only,
/// both.
pub fn feature_ablation(prep: &Prepared, cells: &[CellKind], cfg: &ExperimentConfig) -> Result<Vec<AblationCell>> {
    let sets = [
        FeatureSet::NONE,
        FeatureSet {
            weather: false,
            time: true,
        },
        FeatureSet {
            weather: true,
            time: false,
        },
        FeatureSet::ALL,
    ];
    let grid: Vec<(CellKind, FeatureSet)> = cells.iter().flat_map(|&c| sets.iter().map(move |&f| (c, f))).collect();
    grid.par_iter()
        .map(|&(cell, features)| {
            let mut c = cfg.clone();
            c.features = features;
            let out = run_model(prep, ModelKind::Recurrent(cell), &c)?;
            let from = first_common_target(prep, &[], cfg.lag);
            let r = score(prep, &[out], from, cfg.window_minutes)?.remove(0);
            Ok(AblationCell {
                cell,
                features: features.label().to_string(),
                mape_at_1: r.mape_at_1,
                mse: r.mse,
                mae: r.mae,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_labels_round_trip() {
        for m in ModelKind::all() {
            assert_eq!(m.label().parse::<ModelKind>().unwrap(), m);
        }
        let list: ModelKindList = serde_json::from_str(r#"["nmf_gru","calendar_daily"]"#).unwrap();
        assert_eq!(list.0, vec![ModelKind::Recurrent(CellKind::Gru), ModelKind::Calendar(CalendarKind::Daily)]);
        assert_eq!(serde_json::to_string(&list).unwrap(), r#"["nmf_gru","calendar_daily"]"#);
    }

    #[test]
    fn lag_for_window() {
        assert_eq!(ExperimentConfig::lag_for_window(60), 3);
        assert_eq!(ExperimentConfig::lag_for_window(30), 6);
    }
}
