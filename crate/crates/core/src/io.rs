//! File formats: trips, weather, holidays, OD series, predictions, loss logs
//! and model files (JSON header plus little-endian `f64` blobs).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, SecondsFormat, TimeDelta, Utc};
use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::VarModel;
use crate::cluster::{SweepRow, TravelClusterModel};
use crate::error::{Error, Result};
use crate::features::{FeatureSet, MinMaxScaler};
use crate::geo::{LatLon, Trip};
use crate::metrics::EvalReport;
use crate::nmf::NmfModel;
use crate::nn::{Architecture, EpochLoss, ForecastModel, Network, TrainConfig};
use crate::series::OdSeries;
use crate::synth::{WeatherTable, WEATHER_CHANNELS};

pub fn format_time(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

pub fn parse_time(s: &str) -> Result<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s.trim())
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| Error::Parse(format!("timestamp {s:?}: {e}")))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut f = BufReader::new(File::open(path)?);
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

#[derive(Debug, Serialize, Deserialize)]
struct TripRow {
    timestamp: String,
    origin_lat: f64,
    origin_lon: f64,
    dest_lat: f64,
    dest_lon: f64,
}

pub fn write_trips(path: &Path, trips: &[Trip]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for t in trips {
        w.serialize(TripRow {
            timestamp: format_time(t.timestamp),
            origin_lat: t.origin.lat,
            origin_lon: t.origin.lon,
            dest_lat: t.dest.lat,
            dest_lon: t.dest.lon,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trips(path: &Path) -> Result<Vec<Trip>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<TripRow>()
        .map(|row| {
            let row = row?;
            Ok(Trip::new(
                parse_time(&row.timestamp)?,
                LatLon::new(row.origin_lat, row.origin_lon)?,
                LatLon::new(row.dest_lat, row.dest_lon)?,
            ))
        })
        .collect()
}

pub fn write_weather(path: &Path, weather: &WeatherTable) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["timestamp"];
    header.extend(WEATHER_CHANNELS);
    w.write_record(&header)?;
    for (h, row) in weather.values.outer_iter().enumerate() {
        let mut rec = vec![format_time(weather.timestamp(h))];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an hourly weather table; rows must be consecutive hours.
pub fn read_weather(path: &Path) -> Result<WeatherTable> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let expected: Vec<&str> = std::iter::once("timestamp").chain(WEATHER_CHANNELS).collect();
    if header != expected {
        return Err(Error::Parse(format!("weather header {header:?}, expected {expected:?}")));
    }
    let mut start = None;
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        let t = parse_time(&rec[0])?;
        let first = *start.get_or_insert(t);
        if t != first + TimeDelta::hours(rows as i64) {
            return Err(Error::WeatherGap(format!("row {} at {}", rows + 1, &rec[0])));
        }
        for v in rec.iter().skip(1) {
            data.push(v.trim().parse::<f64>().map_err(|e| Error::Parse(format!("weather value {v:?}: {e}")))?);
        }
        rows += 1;
    }
    let start = start.ok_or(Error::Empty("weather table"))?;
    let values = Array2::from_shape_vec((rows, WEATHER_CHANNELS.len()), data).map_err(|e| Error::shape(e.to_string()))?;
    Ok(WeatherTable { start, values })
}

pub fn write_holidays(path: &Path, days: &[NaiveDate]) -> Result<()> {
    let mut w = create(path)?;
    for d in days {
        writeln!(w, "{d}")?;
    }
    w.flush()?;
    Ok(())
}

/// One `YYYY-MM-DD` per line; blank lines are skipped.
pub fn read_holidays(path: &Path) -> Result<Vec<NaiveDate>> {
    BufReader::new(File::open(path)?)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| {
            let l = l?;
            l.trim()
                .parse()
                .map_err(|e| Error::Parse(format!("holiday {l:?}: {e}")))
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct SeriesRow {
    window_start: String,
    cluster_id: usize,
    count: f64,
}

/// Long format, every window and flow including zeros.
pub fn write_series(path: &Path, series: &OdSeries) -> Result<()> {
    let mut w = csv_writer(path)?;
    for (t, row) in series.counts.outer_iter().enumerate() {
        let ts = format_time(series.window_starts[t]);
        for (j, &c) in row.iter().enumerate() {
            w.serialize(SeriesRow {
                window_start: ts.clone(),
                cluster_id: series.cluster_ids[j],
                count: c,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a long-format series; windows are inferred from the distinct
/// starts, which must be evenly spaced by `window_len`.
pub fn read_series(path: &Path, window_len: TimeDelta) -> Result<OdSeries> {
    let mut r = csv::Reader::from_path(path)?;
    let mut cells: BTreeMap<(DateTime<Utc>, usize), f64> = BTreeMap::new();
    let mut ids = std::collections::BTreeSet::new();
    let mut starts = std::collections::BTreeSet::new();
    for row in r.deserialize::<SeriesRow>() {
        let row = row?;
        let t = parse_time(&row.window_start)?;
        ids.insert(row.cluster_id);
        starts.insert(t);
        *cells.entry((t, row.cluster_id)).or_insert(0.0) += row.count;
    }
    let start = *starts.first().ok_or(Error::Empty("series"))?;
    let last = *starts.last().expect("non-empty");
    let n_windows = ((last - start).num_seconds() / window_len.num_seconds()) as usize + 1;
    let ids: Vec<usize> = ids.into_iter().collect();
    let col: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(j, &id)| (id, j)).collect();
    let mut counts = Array2::zeros((n_windows, ids.len()));
    for ((t, id), c) in cells {
        let secs = (t - start).num_seconds();
        if secs % window_len.num_seconds() != 0 {
            return Err(Error::Misaligned(format!("window start {} off the {window_len} grid", format_time(t))));
        }
        counts[[(secs / window_len.num_seconds()) as usize, col[&id]]] = c;
    }
    OdSeries::new(counts, window_len, start, ids)
}

/// One predicted row per test window: `model,window_start,cluster_id,prediction`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub model: String,
    pub window_start: String,
    pub cluster_id: usize,
    pub prediction: f64,
}

pub fn write_predictions(
    path: &Path,
    model: &str,
    window_starts: &[DateTime<Utc>],
    cluster_ids: &[usize],
    predictions: &Array2<f64>,
) -> Result<()> {
    if predictions.dim() != (window_starts.len(), cluster_ids.len()) {
        return Err(Error::Misaligned(format!(
            "{model}: {:?} predictions for {} windows x {} flows",
            predictions.dim(),
            window_starts.len(),
            cluster_ids.len()
        )));
    }
    let mut w = csv_writer(path)?;
    for (t, row) in predictions.outer_iter().enumerate() {
        let ts = format_time(window_starts[t]);
        for (j, &p) in row.iter().enumerate() {
            w.serialize(PredictionRow {
                model: model.to_string(),
                window_start: ts.clone(),
                cluster_id: cluster_ids[j],
                prediction: p,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads predictions back into a matrix over the given windows and flows.
pub fn read_predictions(path: &Path, window_starts: &[DateTime<Utc>], cluster_ids: &[usize]) -> Result<(String, Array2<f64>)> {
    let row_of: BTreeMap<DateTime<Utc>, usize> = window_starts.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let col_of: BTreeMap<usize, usize> = cluster_ids.iter().enumerate().map(|(j, &c)| (c, j)).collect();
    let mut out = Array2::from_elem((window_starts.len(), cluster_ids.len()), f64::NAN);
    let mut model = None;
    let mut r = csv::Reader::from_path(path)?;
    for row in r.deserialize::<PredictionRow>() {
        let row = row?;
        let t = parse_time(&row.window_start)?;
        let (Some(&i), Some(&j)) = (row_of.get(&t), col_of.get(&row.cluster_id)) else {
            return Err(Error::Misaligned(format!("prediction at {} for flow {}", row.window_start, row.cluster_id)));
        };
        if model.get_or_insert_with(|| row.model.clone()) != &row.model {
            return Err(Error::Parse(format!("mixed models in {}", path.display())));
        }
        out[[i, j]] = row.prediction;
    }
    if out.iter().any(|v| v.is_nan()) {
        return Err(Error::Misaligned(format!("{} does not cover every window and flow", path.display())));
    }
    Ok((model.ok_or(Error::Empty("predictions"))?, out))
}

pub fn write_loss_log(path: &Path, history: &[EpochLoss]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["epoch", "train_mse", "val_mse"])?;
    for e in history {
        let val = e.val_mse.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([e.epoch.to_string(), e.train_mse.to_string(), val])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["K", "mean_zone_max_m", "n_significant"])?;
    for r in rows {
        w.write_record([r.k.to_string(), r.mean_zone_max_m.to_string(), r.n_significant.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Metrics table; an undefined MAPE@1 is left empty.
pub fn write_reports(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["model", "window_minutes", "mse", "mae", "mape_at_1", "n_windows", "n_nonzero_targets"])?;
    for r in reports {
        w.write_record([
            r.model.clone(),
            r.window_minutes.to_string(),
            r.mse.to_string(),
            r.mae.to_string(),
            r.mape_at_1.map(|v| v.to_string()).unwrap_or_default(),
            r.n_windows.to_string(),
            r.n_nonzero_targets.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Name and shape of one array in a model's blob file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile<H> {
    header: H,
    blob_file: String,
    blobs: Vec<BlobSpec>,
}

/// Path of the blob file paired with a model header.
pub fn blob_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("bin")
}

/// Writes `header` as JSON at `path` and the arrays, row-major little-endian
/// `f64` in the given order, next to it.
pub fn write_model<H: Serialize>(path: &Path, header: &H, blobs: &[(&str, Vec<usize>, &[f64])]) -> Result<()> {
    for (name, shape, data) in blobs {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!("blob {name}: shape {shape:?} vs {} values", data.len())));
        }
    }
    let bin = blob_path(path);
    let file = ModelFile {
        header,
        blob_file: bin.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        blobs: blobs
            .iter()
            .map(|(n, s, _)| BlobSpec {
                name: n.to_string(),
                shape: s.clone(),
            })
            .collect(),
    };
    write_json(path, &file)?;
    let mut w = create(&bin)?;
    for (_, _, data) in blobs {
        for v in *data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a model header and its arrays.
pub fn read_model<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<(BlobSpec, Vec<f64>)>)> {
    let file: ModelFile<H> = read_json(path)?;
    let bytes = std::fs::read(path.with_file_name(&file.blob_file))?;
    let total: usize = file.blobs.iter().map(|b| b.shape.iter().product::<usize>()).sum();
    if bytes.len() != total * 8 {
        return Err(Error::shape(format!("blob file holds {} bytes, header declares {} values", bytes.len(), total)));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let blobs = file
        .blobs
        .into_iter()
        .map(|spec| {
            let n = spec.shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            (spec, data)
        })
        .collect();
    Ok((file.header, blobs))
}

fn matrix(spec: &BlobSpec, data: Vec<f64>) -> Result<Array2<f64>> {
    match spec.shape[..] {
        [r, c] => Array2::from_shape_vec((r, c), data).map_err(|e| Error::shape(e.to_string())),
        _ => Err(Error::shape(format!("blob {} is not a matrix: {:?}", spec.name, spec.shape))),
    }
}

fn take_blob(blobs: &mut Vec<(BlobSpec, Vec<f64>)>, name: &str) -> Result<(BlobSpec, Vec<f64>)> {
    let i = blobs
        .iter()
        .position(|(s, _)| s.name == name)
        .ok_or_else(|| Error::Parse(format!("missing blob {name}")))?;
    Ok(blobs.remove(i))
}

#[derive(Debug, Serialize, Deserialize)]
struct ClusterHeader {
    model: TravelClusterModel,
    n_origin_centers: usize,
}

pub fn save_clusters(path: &Path, model: &TravelClusterModel) -> Result<()> {
    let centers = model.center_matrix();
    let n_origin = match &model.geometry {
        crate::cluster::Geometry::Paired { origin_centers, .. } => origin_centers.nrows(),
        _ => 0,
    };
    let data = centers.as_standard_layout().to_owned();
    write_model(
        path,
        &ClusterHeader {
            model: model.clone(),
            n_origin_centers: n_origin,
        },
        &[("centers", vec![data.nrows(), data.ncols()], data.as_slice().expect("standard layout"))],
    )
}

/// Loads a clustering; per-trip training assignments are not stored.
pub fn load_clusters(path: &Path) -> Result<TravelClusterModel> {
    let (h, mut blobs): (ClusterHeader, _) = read_model(path)?;
    let (spec, data) = take_blob(&mut blobs, "centers")?;
    let mut model = h.model;
    model.set_center_matrix(matrix(&spec, data)?, h.n_origin_centers)?;
    Ok(model)
}

pub fn save_nmf(path: &Path, model: &NmfModel) -> Result<()> {
    let b = model.basis.as_standard_layout().to_owned();
    let c = model.coefficients.as_standard_layout().to_owned();
    write_model(
        path,
        model,
        &[
            ("basis", vec![b.nrows(), b.ncols()], b.as_slice().expect("standard layout")),
            ("coefficients", vec![c.nrows(), c.ncols()], c.as_slice().expect("standard layout")),
        ],
    )
}

pub fn load_nmf(path: &Path) -> Result<NmfModel> {
    let (mut model, mut blobs): (NmfModel, _) = read_model(path)?;
    let (s, d) = take_blob(&mut blobs, "basis")?;
    model.basis = matrix(&s, d)?;
    let (s, d) = take_blob(&mut blobs, "coefficients")?;
    model.coefficients = matrix(&s, d)?;
    Ok(model)
}

#[derive(Debug, Serialize, Deserialize)]
struct ForecastHeader {
    arch: Architecture,
    lag: usize,
    features: FeatureSet,
    head_forecast: bool,
    feature_columns: Vec<usize>,
    coef_scaler: MinMaxScaler,
    feature_scaler: MinMaxScaler,
    config: TrainConfig,
    history: Vec<EpochLoss>,
    n_params: usize,
}

impl ForecastHeader {
    fn shapes(&self) -> (usize, usize, usize, usize) {
        let m = self.coef_scaler.width();
        let f = self.feature_columns.len();
        (self.lag, m + f, if self.head_forecast { f } else { 0 }, m)
    }
}

/// Saves a forecaster; weights follow the network's parameter order.
pub fn save_forecaster(path: &Path, model: &ForecastModel) -> Result<()> {
    let header = ForecastHeader {
        arch: model.arch.clone(),
        lag: model.lag,
        features: model.features,
        head_forecast: model.head_forecast,
        feature_columns: model.feature_columns.clone(),
        coef_scaler: model.coef_scaler.clone(),
        feature_scaler: model.feature_scaler.clone(),
        config: model.config.clone(),
        history: model.history.clone(),
        n_params: model.n_params(),
    };
    let params = model.net.params();
    let names: Vec<String> = (0..params.len()).map(|i| format!("p{i}")).collect();
    let blobs: Vec<(&str, Vec<usize>, &[f64])> = params
        .iter()
        .zip(&names)
        .map(|(p, n)| (n.as_str(), vec![p.len()], *p))
        .collect();
    write_model(path, &header, &blobs)
}

pub fn load_forecaster(path: &Path) -> Result<ForecastModel> {
    let (h, blobs): (ForecastHeader, _) = read_model(path)?;
    let (steps, input, extra, output) = h.shapes();
    let mut net = h.arch.zeros(steps, input, extra, output)?;
    {
        let mut params = net.params_mut();
        if params.len() != blobs.len() {
            return Err(Error::shape(format!("{} weight blobs for {} parameter groups", blobs.len(), params.len())));
        }
        for (p, (spec, data)) in params.iter_mut().zip(blobs) {
            if p.len() != data.len() {
                return Err(Error::shape(format!("blob {}: {} values, expected {}", spec.name, data.len(), p.len())));
            }
            p.copy_from_slice(&data);
        }
    }
    if net.n_params() != h.n_params {
        return Err(Error::shape("parameter count differs from header"));
    }
    Ok(ForecastModel {
        arch: h.arch,
        lag: h.lag,
        features: h.features,
        head_forecast: h.head_forecast,
        feature_columns: h.feature_columns,
        coef_scaler: h.coef_scaler,
        feature_scaler: h.feature_scaler,
        config: h.config,
        history: h.history,
        net,
    })
}

pub fn save_var(path: &Path, model: &VarModel) -> Result<()> {
    write_json(path, model)
}

pub fn load_var(path: &Path) -> Result<VarModel> {
    read_json(path)
}
