//! Staged experiment runs over an artifact directory.
//!
//! Each stage writes its outputs plus `<stage>/manifest.json`, which records
//! the hash of the stage's config section and input files. A stage whose
//! manifest matches the current inputs and whose outputs are intact is
//! skipped.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use chrono::{NaiveDate, Utc};
use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cluster::{count_histogram, TravelClusterModel};
use crate::error::{Error, Result};
use crate::experiment::{
    aggregate, cluster_training_trips, decompose, feature_ablation, fit_model, first_common_target, input_length_sweep,
    predict_model, score, AblationCell, ExperimentConfig, Fitted, ModelKind, ModelOutput, Prepared, SweepCell,
};
use crate::features::build_features;
use crate::io;
use crate::metrics::EvalReport;
use crate::nn::CellKind;
use crate::series::OdSeries;
use crate::synth::{generate_city, CityConfig, WeatherTable};

/// Bumped when an artifact layout changes, invalidating old manifests.
pub const ARTIFACT_VERSION: u32 = 1;

/// Where trips and weather come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// [`CityConfig::synthetic`] with the given size.
    Synthetic {
        n_pairs: usize,
        duration_days: u32,
        target_trips: f64,
        seed: u64,
    },
    /// A fully specified synthetic city.
    City(CityConfig),
    /// Existing trips and weather CSVs and an optional holiday list.
    Files {
        trips: PathBuf,
        weather: PathBuf,
        holidays: Option<PathBuf>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            n_pairs: 20,
            duration_days: 45,
            target_trips: 50_000.0,
            seed: 0,
        }
    }
}

fn default_trace_clusters() -> usize {
    4
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    /// Flows sampled for predicted-vs-true traces.
    #[serde(default = "default_trace_clusters")]
    pub trace_clusters: usize,
    #[serde(default)]
    pub trace_seed: u64,
    /// Write an SVG bar chart of MAPE@1 next to the tables.
    #[serde(default = "default_true")]
    pub charts: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            experiment: ExperimentConfig::default(),
            trace_clusters: default_trace_clusters(),
            trace_seed: 0,
            charts: true,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = io::read_json(path)?;
        // Relative data paths are taken from the config's directory.
        if let DataSource::Files { trips, weather, holidays } = &mut cfg.data {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [Some(trips), Some(weather), holidays.as_mut()].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Replaces every seed with `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        match &mut self.data {
            DataSource::Synthetic { seed: s, .. } => *s = seed,
            DataSource::City(c) => c.seed = seed,
            DataSource::Files { .. } => {}
        }
        let e = &mut self.experiment;
        e.cluster_seed = seed;
        e.nmf.seed = seed;
        e.train.seed = seed;
        self.trace_seed = seed;
    }

    /// Sets the window length and the lag covering the same three hours.
    pub fn set_window(&mut self, minutes: i64) {
        self.experiment.window_minutes = minutes;
        self.experiment.lag = ExperimentConfig::lag_for_window(minutes);
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment.validate()?;
        if self.experiment.models.0.is_empty() {
            return Err(Error::param("no models configured"));
        }
        if let DataSource::Files { trips, weather, holidays } = &self.data {
            for p in [Some(trips), Some(weather), holidays.as_ref()].into_iter().flatten() {
                if !p.exists() {
                    return Err(Error::param(format!("input file {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    fn city(&self) -> Option<CityConfig> {
        match &self.data {
            DataSource::Synthetic {
                n_pairs,
                duration_days,
                target_trips,
                seed,
            } => Some(CityConfig::synthetic(*n_pairs, *duration_days, *target_trips, *seed)),
            DataSource::City(c) => Some(c.clone()),
            DataSource::Files { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Generate,
    Cluster,
    Aggregate,
    Decompose,
    Train,
    Evaluate,
    Compare,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Generate,
        Stage::Cluster,
        Stage::Aggregate,
        Stage::Decompose,
        Stage::Train,
        Stage::Evaluate,
        Stage::Compare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Cluster => "cluster",
            Stage::Aggregate => "aggregate",
            Stage::Decompose => "decompose",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Compare => "compare",
        }
    }

    /// Stages whose outputs this stage reads.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Generate => &[],
            Stage::Cluster => &[Stage::Generate],
            Stage::Aggregate => &[Stage::Generate, Stage::Cluster],
            Stage::Decompose => &[Stage::Aggregate],
            Stage::Train => &[Stage::Generate, Stage::Cluster, Stage::Aggregate, Stage::Decompose],
            Stage::Evaluate => &[
                Stage::Generate,
                Stage::Cluster,
                Stage::Aggregate,
                Stage::Decompose,
                Stage::Train,
            ],
            Stage::Compare => &[Stage::Aggregate, Stage::Evaluate],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown stage `{s}`")))
    }
}

/// Record of one stage execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: u32,
    pub config_hash: String,
    /// Hash over the config hash and every input file hash.
    pub input_hash: String,
    /// Input files relative to the artifact root (absolute for external
    /// files), with their SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub started_at: String,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

/// Sizes recorded after clustering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub n_training_trips: usize,
    pub n_clusters: usize,
    pub n_flows: usize,
    pub n_dropped: usize,
    /// Travel count -> number of flows with that count.
    pub count_histogram: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub window_minutes: i64,
    pub n_windows: usize,
    pub n_train: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CoefficientHeader {
    n_train: usize,
}

/// Comparison summary written by the compare stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub window_minutes: i64,
    pub reports: Vec<EvalReport>,
    /// Model with the lowest MAPE@1, if any is defined.
    pub best_mape_at_1: Option<String>,
    pub trace_cluster_ids: Vec<usize>,
    /// Trainable parameters per network model.
    pub n_params: BTreeMap<String, usize>,
}

const TRIPS: &str = "generate/trips.csv";
const WEATHER: &str = "generate/weather.csv";
const HOLIDAYS: &str = "generate/holidays.txt";
const CITY: &str = "generate/city.json";
const CLUSTERS: &str = "cluster/clusters.json";
const SERIES: &str = "aggregate/series.csv";
const SPLIT: &str = "aggregate/split.json";
const NMF: &str = "decompose/nmf.json";
const COEFFICIENTS: &str = "decompose/coefficients.json";
const METRICS: &str = "evaluate/metrics.json";

fn model_file(kind: ModelKind) -> String {
    format!("train/{}.json", kind.label())
}

fn loss_file(kind: ModelKind) -> String {
    format!("train/{}_loss.csv", kind.label())
}

fn predictions_file(kind: ModelKind) -> String {
    format!("evaluate/predictions_{}.csv", kind.label())
}

/// A configured run rooted at an artifact directory.
#[derive(Debug, Clone)]
pub struct Pipeline {
    root: PathBuf,
    config: PipelineConfig,
}

impl Pipeline {
    pub fn new(root: impl Into<PathBuf>, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            root: root.into(),
            config,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest_path(&self, stage_dir: &str) -> PathBuf {
        self.root.join(stage_dir).join("manifest.json")
    }

    pub fn read_manifest(&self, stage_dir: &str) -> Result<Manifest> {
        io::read_json(&self.manifest_path(stage_dir))
    }

    /// Runs every stage in order.
    pub fn run_all(&self) -> Result<Vec<(Stage, StageStatus)>> {
        Stage::ALL.iter().map(|&s| Ok((s, self.run_stage(s)?))).collect()
    }

    /// Runs one stage, or skips it when its manifest is current. Errors name
    /// the stage.
    pub fn run_stage(&self, stage: Stage) -> Result<StageStatus> {
        self.run_stage_inner(stage).map_err(|e| match e {
            Error::Stage { .. } => e,
            other => Error::Stage {
                stage: stage.name().to_string(),
                source: Box::new(other),
            },
        })
    }

    fn run_stage_inner(&self, stage: Stage) -> Result<StageStatus> {
        let e = &self.config.experiment;
        let (section, seed) = match stage {
            Stage::Generate => (json!({ "data": self.config.data }), self.data_seed()),
            Stage::Cluster => (
                json!({
                    "clustering": e.clustering,
                    "n_clusters": e.n_clusters,
                    "zone_search": e.zone_search,
                    "min_travels": e.min_travels,
                    "cluster_seed": e.cluster_seed,
                    "train_days": e.train_days,
                }),
                Some(e.cluster_seed),
            ),
            Stage::Aggregate => (
                json!({
                    "window_minutes": e.window_minutes,
                    "train_days": e.train_days,
                    "test_days": e.test_days,
                }),
                None,
            ),
            Stage::Decompose => (json!({ "nmf": e.nmf }), Some(e.nmf.seed)),
            Stage::Train => (self.model_section(), Some(e.train.seed)),
            Stage::Evaluate => (self.model_section(), None),
            Stage::Compare => (
                json!({
                    "models": e.models,
                    "trace_clusters": self.config.trace_clusters,
                    "trace_seed": self.config.trace_seed,
                    "charts": self.config.charts,
                }),
                Some(self.config.trace_seed),
            ),
        };
        let mut inputs = BTreeMap::new();
        for up in stage.upstream() {
            let m = self.read_manifest(up.name()).map_err(|_| {
                Error::param(format!("stage `{stage}` needs the outputs of `{up}`; run `{up}` first"))
            })?;
            inputs.extend(m.outputs.keys().map(|k| (k.clone(), String::new())));
        }
        if let DataSource::Files { trips, weather, holidays } = &self.config.data {
            if stage == Stage::Generate {
                for p in [Some(trips), Some(weather), holidays.as_ref()].into_iter().flatten() {
                    inputs.insert(p.display().to_string(), String::new());
                }
            }
        }
        let body = |this: &Self| -> Result<Vec<String>> {
            match stage {
                Stage::Generate => this.generate(),
                Stage::Cluster => this.cluster(),
                Stage::Aggregate => this.aggregate(),
                Stage::Decompose => this.decompose(),
                Stage::Train => this.train(),
                Stage::Evaluate => this.evaluate(),
                Stage::Compare => this.compare(),
            }
        };
        self.cached(stage.name(), section, inputs, seed, body)
    }

    fn data_seed(&self) -> Option<u64> {
        match &self.config.data {
            DataSource::Synthetic { seed, .. } => Some(*seed),
            DataSource::City(c) => Some(c.seed),
            DataSource::Files { .. } => None,
        }
    }

    fn model_section(&self) -> serde_json::Value {
        let e = &self.config.experiment;
        json!({
            "window_minutes": e.window_minutes,
            "lag": e.lag,
            "hidden": e.hidden,
            "train": e.train,
            "features": e.features,
            "head_forecast": e.head_forecast,
            "var_exogenous": e.var_exogenous,
            "knn_k": e.knn_k,
            "models": e.models,
        })
    }

    fn hash_input(&self, key: &str) -> Result<String> {
        let p = Path::new(key);
        let path = if p.is_absolute() { p.to_path_buf() } else { self.path(key) };
        io::sha256_file(&path).map_err(|e| Error::param(format!("input {key}: {e}")))
    }

    /// Shared skip-or-run logic. `inputs` keys are filled with file hashes.
    fn cached(
        &self,
        dir: &str,
        section: serde_json::Value,
        mut inputs: BTreeMap<String, String>,
        seed: Option<u64>,
        body: impl FnOnce(&Self) -> Result<Vec<String>>,
    ) -> Result<StageStatus> {
        for (k, v) in inputs.iter_mut() {
            *v = self.hash_input(k)?;
        }
        let config_hash = io::sha256_bytes(serde_json::to_string(&section)?.as_bytes());
        let input_hash = io::sha256_bytes(
            serde_json::to_string(&json!({
                "version": ARTIFACT_VERSION,
                "config": config_hash,
                "inputs": inputs,
            }))?
            .as_bytes(),
        );
        if let Ok(old) = self.read_manifest(dir) {
            let intact = old
                .outputs
                .iter()
                .all(|(k, h)| self.hash_input(k).is_ok_and(|cur| &cur == h));
            if old.input_hash == input_hash && old.version == ARTIFACT_VERSION && intact {
                log::info!("{dir}: up to date, skipped");
                return Ok(StageStatus::Skipped);
            }
        }
        let stage_dir = self.root.join(dir);
        if stage_dir.exists() {
            std::fs::remove_dir_all(&stage_dir)?;
        }
        std::fs::create_dir_all(&stage_dir)?;
        let started_at = io::format_time(Utc::now());
        let clock = Instant::now();
        log::info!("{dir}: running");
        let produced = body(self)?;
        let mut outputs = BTreeMap::new();
        for rel in produced {
            let h = self.hash_input(&rel)?;
            outputs.insert(rel, h);
        }
        let manifest = Manifest {
            stage: dir.to_string(),
            version: ARTIFACT_VERSION,
            config_hash,
            input_hash,
            inputs,
            outputs,
            seed,
            started_at,
            elapsed_seconds: clock.elapsed().as_secs_f64(),
        };
        io::write_json(&self.manifest_path(dir), &manifest)?;
        log::info!("{dir}: done in {:.1} s", manifest.elapsed_seconds);
        Ok(StageStatus::Ran)
    }

    fn generate(&self) -> Result<Vec<String>> {
        let mut out = vec![TRIPS.to_string(), WEATHER.to_string(), HOLIDAYS.to_string()];
        match (&self.config.data, self.config.city()) {
            (_, Some(city)) => {
                let (trips, weather) = generate_city(&city)?;
                log::info!("generated {} trips over {} days", trips.len(), city.duration_days);
                io::write_trips(&self.path(TRIPS), &trips)?;
                io::write_weather(&self.path(WEATHER), &weather)?;
                io::write_holidays(&self.path(HOLIDAYS), &city.holidays)?;
                io::write_json(&self.path(CITY), &city)?;
                out.push(CITY.to_string());
            }
            (DataSource::Files { trips, weather, holidays }, None) => {
                // Parse before copying so bad inputs fail here.
                let t = io::read_trips(trips)?;
                let w = io::read_weather(weather)?;
                let h = match holidays {
                    Some(p) => io::read_holidays(p)?,
                    None => Vec::new(),
                };
                io::write_trips(&self.path(TRIPS), &t)?;
                io::write_weather(&self.path(WEATHER), &w)?;
                io::write_holidays(&self.path(HOLIDAYS), &h)?;
            }
            _ => unreachable!("synthetic sources always yield a city"),
        }
        Ok(out)
    }

    fn load_inputs(&self) -> Result<(Vec<crate::geo::Trip>, WeatherTable, Vec<NaiveDate>)> {
        Ok((
            io::read_trips(&self.path(TRIPS))?,
            io::read_weather(&self.path(WEATHER))?,
            io::read_holidays(&self.path(HOLIDAYS))?,
        ))
    }

    fn cluster(&self) -> Result<Vec<String>> {
        let e = &self.config.experiment;
        let (trips, weather, _) = self.load_inputs()?;
        let split_at = weather.start + chrono::TimeDelta::days(e.train_days);
        let n_training_trips = trips.iter().filter(|t| t.timestamp < split_at).count();
        let (model, search) = cluster_training_trips(&trips, split_at, e)?;
        io::save_clusters(&self.path(CLUSTERS), &model)?;
        let summary = ClusterSummary {
            n_training_trips,
            n_clusters: model.n_clusters,
            n_flows: model.n_flows(),
            n_dropped: model.dropped.len(),
            count_histogram: count_histogram(&model),
        };
        io::write_json(&self.path("cluster/summary.json"), &summary)?;
        let mut out = vec![
            CLUSTERS.to_string(),
            io::blob_path(Path::new(CLUSTERS)).display().to_string(),
            "cluster/summary.json".to_string(),
        ];
        if let Some(report) = search {
            io::write_sweep(&self.path("cluster/sweep.csv"), &report.rows)?;
            out.push("cluster/sweep.csv".to_string());
        }
        Ok(out)
    }

    fn load_clusters(&self) -> Result<TravelClusterModel> {
        io::load_clusters(&self.path(CLUSTERS))
    }

    fn aggregate(&self) -> Result<Vec<String>> {
        let e = &self.config.experiment;
        let (trips, weather, _) = self.load_inputs()?;
        let clusters = self.load_clusters()?;
        let (series, n_train) = aggregate(&trips, &clusters, weather.start, e)?;
        io::write_series(&self.path(SERIES), &series)?;
        io::write_json(
            &self.path(SPLIT),
            &SplitInfo {
                window_minutes: e.window_minutes,
                n_windows: series.n_windows(),
                n_train,
            },
        )?;
        Ok(vec![SERIES.to_string(), SPLIT.to_string()])
    }

    fn load_series(&self) -> Result<(OdSeries, usize)> {
        let split: SplitInfo = io::read_json(&self.path(SPLIT))?;
        let series = io::read_series(&self.path(SERIES), self.config.experiment.window_len())?;
        if series.n_windows() != split.n_windows {
            return Err(Error::Misaligned(format!(
                "series has {} windows, split expects {}",
                series.n_windows(),
                split.n_windows
            )));
        }
        Ok((series, split.n_train))
    }

    fn decompose(&self) -> Result<Vec<String>> {
        let (series, n_train) = self.load_series()?;
        let (nmf, coefficients) = decompose(&series, n_train, &self.config.experiment.nmf)?;
        io::save_nmf(&self.path(NMF), &nmf)?;
        io::write_model(
            &self.path(COEFFICIENTS),
            &CoefficientHeader { n_train },
            &[(
                "coefficients",
                vec![coefficients.nrows(), coefficients.ncols()],
                coefficients.as_slice().expect("standard layout"),
            )],
        )?;
        Ok(vec![
            NMF.to_string(),
            io::blob_path(Path::new(NMF)).display().to_string(),
            COEFFICIENTS.to_string(),
            io::blob_path(Path::new(COEFFICIENTS)).display().to_string(),
        ])
    }

    /// Rebuilds the prepared data from stage outputs.
    pub fn load_prepared(&self) -> Result<Prepared> {
        let (_, weather, holidays) = self.load_inputs()?;
        let clusters = self.load_clusters()?;
        let (series, n_train) = self.load_series()?;
        let nmf = io::load_nmf(&self.path(NMF))?;
        let (h, mut blobs): (CoefficientHeader, _) = io::read_model(&self.path(COEFFICIENTS))?;
        if h.n_train != n_train || blobs.len() != 1 {
            return Err(Error::Misaligned("coefficients do not match the aggregated split".into()));
        }
        let (spec, data) = blobs.remove(0);
        let coefficients = Array2::from_shape_vec((spec.shape[0], spec.shape[1]), data).map_err(|e| Error::shape(e.to_string()))?;
        let features = build_features(&weather, &series.window_starts, &holidays, self.config.experiment.window_len())?;
        Ok(Prepared {
            clusters,
            series,
            n_train,
            nmf,
            coefficients,
            features,
        })
    }

    fn train(&self) -> Result<Vec<String>> {
        let e = &self.config.experiment;
        let prep = self.load_prepared()?;
        let fitted: Vec<(ModelKind, Fitted)> = e
            .models
            .0
            .par_iter()
            .map(|&m| Ok((m, fit_model(&prep, m, e)?)))
            .collect::<Result<_>>()?;
        let mut out = Vec::new();
        for (kind, f) in &fitted {
            match f {
                Fitted::Network(model) => {
                    let rel = model_file(*kind);
                    io::save_forecaster(&self.path(&rel), model)?;
                    io::write_loss_log(&self.path(&loss_file(*kind)), &model.history)?;
                    out.push(io::blob_path(Path::new(&rel)).display().to_string());
                    out.push(rel);
                    out.push(loss_file(*kind));
                }
                Fitted::Var(var) => {
                    let rel = model_file(*kind);
                    io::save_var(&self.path(&rel), var)?;
                    out.push(rel);
                }
                Fitted::Lazy => {}
            }
        }
        Ok(out)
    }

    fn load_fitted(&self, kind: ModelKind) -> Result<Fitted> {
        let rel = model_file(kind);
        Ok(match kind {
            ModelKind::Recurrent(_) | ModelKind::Mlp => Fitted::Network(Box::new(io::load_forecaster(&self.path(&rel))?)),
            ModelKind::Var => Fitted::Var(io::load_var(&self.path(&rel))?),
            ModelKind::Knn | ModelKind::Calendar(_) => Fitted::Lazy,
        })
    }

    fn evaluate(&self) -> Result<Vec<String>> {
        let e = &self.config.experiment;
        let prep = self.load_prepared()?;
        let models = &e.models.0;
        let starts = &prep.series.window_starts[prep.test_range()];
        let ids = &prep.series.cluster_ids;
        models.par_iter().try_for_each(|&m| {
            let fitted = self.load_fitted(m)?;
            let pred = predict_model(&prep, m, &fitted, e)?;
            io::write_predictions(&self.path(&predictions_file(m)), &m.label(), starts, ids, &pred)
        })?;
        // Score from the files so the tables reflect exactly what was written.
        let outputs: Vec<ModelOutput> = models
            .iter()
            .map(|&m| {
                let (label, predictions) = io::read_predictions(&self.path(&predictions_file(m)), starts, ids)?;
                let n_params = match self.load_fitted(m)? {
                    Fitted::Network(f) => Some(f.n_params()),
                    _ => None,
                };
                Ok(ModelOutput {
                    model: label,
                    predictions,
                    n_params,
                    forecaster: None,
                })
            })
            .collect::<Result<_>>()?;
        let from = first_common_target(&prep, models, e.lag);
        if from >= prep.series.n_windows() {
            return Err(Error::InsufficientHistory(
                "no test window has enough history for every configured model".into(),
            ));
        }
        let reports = score(&prep, &outputs, from, e.window_minutes)?;
        let n_params: BTreeMap<String, usize> = outputs
            .iter()
            .filter_map(|o| o.n_params.map(|n| (o.model.clone(), n)))
            .collect();
        io::write_json(&self.path(METRICS), &json!({ "reports": reports, "n_params": n_params, "first_scored_window": from }))?;
        let mut out: Vec<String> = models.iter().map(|&m| predictions_file(m)).collect();
        out.push(METRICS.to_string());
        Ok(out)
    }

    fn compare(&self) -> Result<Vec<String>> {
        #[derive(Deserialize)]
        struct Metrics {
            reports: Vec<EvalReport>,
            n_params: BTreeMap<String, usize>,
        }
        let e = &self.config.experiment;
        let metrics: Metrics = io::read_json(&self.path(METRICS))?;
        let have: Vec<&str> = metrics.reports.iter().map(|r| r.model.as_str()).collect();
        let missing: Vec<String> = e
            .models
            .0
            .iter()
            .map(|m| m.label())
            .filter(|l| !have.contains(&l.as_str()))
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingEvaluations(missing));
        }
        let reports: Vec<EvalReport> = e
            .models
            .0
            .iter()
            .map(|m| metrics.reports.iter().find(|r| r.model == m.label()).cloned().expect("checked above"))
            .collect();
        let win = e.window_minutes;
        let table = format!("compare/metrics_{win}min.csv");
        io::write_reports(&self.path(&table), &reports)?;

        let (series, n_train) = self.load_series()?;
        let n = series.n_flows();
        let k = self.config.trace_clusters.min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.trace_seed);
        let mut cols = rand::seq::index::sample(&mut rng, n, k).into_vec();
        cols.sort_unstable();
        let starts = &series.window_starts[n_train..];
        let actual = series.counts.slice(s![n_train.., ..]);
        let traces = "compare/traces.csv";
        let mut w = csv::Writer::from_path(self.path(traces))?;
        w.write_record(["model", "window_start", "cluster_id", "actual", "prediction"])?;
        for m in &e.models.0 {
            let (_, pred) = io::read_predictions(&self.path(&predictions_file(*m)), starts, &series.cluster_ids)?;
            for &j in &cols {
                for (t, ts) in starts.iter().enumerate() {
                    w.write_record([
                        m.label(),
                        io::format_time(*ts),
                        series.cluster_ids[j].to_string(),
                        actual[[t, j]].to_string(),
                        pred[[t, j]].to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;

        let best = reports
            .iter()
            .filter_map(|r| r.mape_at_1.map(|v| (v, &r.model)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, m)| m.clone());
        let summary = CompareSummary {
            window_minutes: win,
            reports: reports.clone(),
            best_mape_at_1: best,
            trace_cluster_ids: cols.iter().map(|&j| series.cluster_ids[j]).collect(),
            n_params: metrics.n_params,
        };
        io::write_json(&self.path("compare/summary.json"), &summary)?;
        let mut out = vec![table, traces.to_string(), "compare/summary.json".to_string()];
        if self.config.charts {
            let chart = format!("compare/mape_{win}min.svg");
            std::fs::write(self.path(&chart), mape_chart(&reports, win))?;
            out.push(chart);
        }
        Ok(out)
    }

    /// Input-length sweep over the decomposed data, written to
    /// `sweep/input_length.csv`.
    pub fn sweep(&self, lengths: &[usize], cells: &[CellKind]) -> Result<Vec<SweepCell>> {
        let section = json!({ "models": self.model_section(), "lengths": lengths, "cells": cells });
        let inputs = self.upstream_inputs(&[Stage::Generate, Stage::Cluster, Stage::Aggregate, Stage::Decompose])?;
        let rel = "sweep/input_length.csv";
        self.cached("sweep", section, inputs, Some(self.config.experiment.train.seed), |this| {
            let prep = this.load_prepared()?;
            let rows = input_length_sweep(&prep, lengths, cells, &this.config.experiment)?;
            write_sweep_table(&this.path(rel), &rows)?;
            Ok(vec![rel.to_string()])
        })
        .map_err(|e| Error::Stage {
            stage: "sweep".into(),
            source: Box::new(e),
        })?;
        read_sweep_table(&self.path(rel))
    }

    /// Feature ablation, written to `ablation/features.csv`.
    pub fn ablation(&self, cells: &[CellKind]) -> Result<Vec<AblationCell>> {
        let section = json!({ "models": self.model_section(), "cells": cells });
        let inputs = self.upstream_inputs(&[Stage::Generate, Stage::Cluster, Stage::Aggregate, Stage::Decompose])?;
        let rel = "ablation/features.csv";
        self.cached("ablation", section, inputs, Some(self.config.experiment.train.seed), |this| {
            let prep = this.load_prepared()?;
            let rows = feature_ablation(&prep, cells, &this.config.experiment)?;
            let mut w = csv::Writer::from_path(this.path(rel))?;
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
            Ok(vec![rel.to_string()])
        })
        .map_err(|e| Error::Stage {
            stage: "ablation".into(),
            source: Box::new(e),
        })?;
        let mut r = csv::Reader::from_path(self.path(rel))?;
        Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
    }

    fn upstream_inputs(&self, stages: &[Stage]) -> Result<BTreeMap<String, String>> {
        let mut inputs = BTreeMap::new();
        for up in stages {
            let m = self
                .read_manifest(up.name())
                .map_err(|_| Error::param(format!("run `{up}` first")))?;
            inputs.extend(m.outputs.keys().map(|k| (k.clone(), String::new())));
        }
        Ok(inputs)
    }
}

/// Sweep table: one row per input length, one MAPE@1 column per cell kind.
pub fn write_sweep_table(path: &Path, rows: &[SweepCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lag", "cell", "mape_at_1", "mse", "mae"])?;
    for r in rows {
        w.write_record([
            r.lag.to_string(),
            r.cell.label().to_string(),
            r.mape_at_1.map(|v| v.to_string()).unwrap_or_default(),
            r.mse.to_string(),
            r.mae.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_table(path: &Path) -> Result<Vec<SweepCell>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse()
                    .map_err(|e| Error::Parse(format!("sweep column {i}: {e}")))
            };
            Ok(SweepCell {
                lag: rec[0].parse().map_err(|e| Error::Parse(format!("sweep lag: {e}")))?,
                cell: rec[1].parse()?,
                mape_at_1: if rec[2].is_empty() { None } else { Some(num(2)?) },
                mse: num(3)?,
                mae: num(4)?,
            })
        })
        .collect()
}

/// Horizontal bar chart of MAPE@1 per model.
pub fn mape_chart(reports: &[EvalReport], window_minutes: i64) -> String {
    let bar_h = 22.0;
    let left = 150.0;
    let width = 420.0;
    let max = reports
        .iter()
        .filter_map(|r| r.mape_at_1)
        .fold(0.0f64, f64::max)
        .max(1.0);
    let height = 40.0 + bar_h * reports.len() as f64;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"12\">\n",
        left + width + 70.0
    );
    svg += &format!("<text x=\"{left}\" y=\"16\">MAPE@1 (%), {window_minutes}-minute windows</text>\n");
    for (i, r) in reports.iter().enumerate() {
        let y = 28.0 + i as f64 * bar_h;
        svg += &format!("<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n", left - 6.0, y + 14.0, r.model);
        match r.mape_at_1 {
            Some(v) => {
                let w = width * v / max;
                svg += &format!(
                    "<rect x=\"{left}\" y=\"{y}\" width=\"{w:.2}\" height=\"{}\" fill=\"#4878a8\"/>\n<text x=\"{:.2}\" y=\"{}\">{v:.2}</text>\n",
                    bar_h - 4.0,
                    left + w + 4.0,
                    y + 14.0
                );
            }
            None => svg += &format!("<text x=\"{left}\" y=\"{}\">undefined</text>\n", y + 14.0),
        }
    }
    svg += "</svg>\n";
    svg
}
