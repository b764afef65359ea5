//! Exogenous per-window features and min-max normalization.

use chrono::{DateTime, Datelike, NaiveDate, TimeDelta, Timelike, Utc};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::synth::{WeatherTable, WEATHER_CHANNELS};

/// Which exogenous channel groups a model sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub weather: bool,
    pub time: bool,
}

impl FeatureSet {
    pub const ALL: FeatureSet = FeatureSet {
        weather: true,
        time: true,
    };
    pub const NONE: FeatureSet = FeatureSet {
        weather: false,
        time: false,
    };

    pub fn label(&self) -> &'static str {
        match (self.weather, self.time) {
            (false, false) => "none",
            (false, true) => "time",
            (true, false) => "weather",
            (true, true) => "both",
        }
    }
}

/// Column names of [`build_features`] output for the given window length.
pub fn feature_names(window_len: TimeDelta) -> Vec<&'static str> {
    let mut names: Vec<&'static str> = WEATHER_CHANNELS.to_vec();
    names.extend(["hour_sin", "hour_cos", "dow_sin", "dow_cos"]);
    if window_len < TimeDelta::hours(1) {
        names.extend(["part_of_hour_sin", "part_of_hour_cos"]);
    }
    names.push("is_holiday");
    names
}

/// Number of weather columns at the front of the feature matrix.
pub const N_WEATHER: usize = 7;

/// Weather, cyclic time encodings and the holiday flag per window.
///
/// Each window takes the weather of the hour containing its start.
pub fn build_features(
    weather: &WeatherTable,
    window_starts: &[DateTime<Utc>],
    holidays: &[NaiveDate],
    window_len: TimeDelta,
) -> Result<Array2<f64>> {
    let width = feature_names(window_len).len();
    let sub_hour = window_len < TimeDelta::hours(1);
    let mut out = Array2::zeros((window_starts.len(), width));
    for (i, &ws) in window_starts.iter().enumerate() {
        let offset = (ws - weather.start).num_seconds();
        let row = offset.div_euclid(3600);
        if offset < 0 || row as usize >= weather.values.nrows() {
            return Err(Error::WeatherGap(ws.to_rfc3339()));
        }
        let mut r = out.row_mut(i);
        for c in 0..N_WEATHER {
            r[c] = weather.values[[row as usize, c]];
        }
        let hour = TAU * ws.hour() as f64 / 24.0;
        let dow = TAU * ws.weekday().num_days_from_monday() as f64 / 7.0;
        let mut c = N_WEATHER;
        for v in [hour.sin(), hour.cos(), dow.sin(), dow.cos()] {
            r[c] = v;
            c += 1;
        }
        if sub_hour {
            let part = TAU * ws.minute() as f64 / 60.0;
            r[c] = part.sin();
            r[c + 1] = part.cos();
            c += 2;
        }
        r[c] = if holidays.contains(&ws.date_naive()) { 1.0 } else { 0.0 };
    }
    Ok(out)
}

/// Column indices of `set` within a [`build_features`] matrix of `width`.
pub fn select_columns(set: FeatureSet, width: usize) -> Vec<usize> {
    let mut cols = Vec::new();
    if set.weather {
        cols.extend(0..N_WEATHER);
    }
    if set.time {
        cols.extend(N_WEATHER..width);
    }
    cols
}

/// Per-column min-max scaling to `[0, 1]`. Constant columns map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(data: &Array2<f64>) -> Self {
        let min = data
            .axis_iter(Axis(1))
            .map(|c| c.iter().copied().fold(f64::INFINITY, f64::min))
            .collect();
        let max = data
            .axis_iter(Axis(1))
            .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        Self { min, max }
    }

    fn range(&self, j: usize) -> f64 {
        let r = self.max[j] - self.min[j];
        if r > 0.0 {
            r
        } else {
            1.0
        }
    }

    pub fn width(&self) -> usize {
        self.min.len()
    }

    pub fn transform(&self, data: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(data)?;
        let mut out = data.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.min[j]) / self.range(j);
            }
        }
        Ok(out)
    }

    pub fn inverse(&self, data: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(data)?;
        let mut out = data.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.range(j) + self.min[j];
            }
        }
        Ok(out)
    }

    fn check(&self, data: &Array2<f64>) -> Result<()> {
        if data.ncols() != self.width() {
            return Err(Error::shape(format!(
                "scaler fitted on {} columns, got {}",
                self.width(),
                data.ncols()
            )));
        }
        Ok(())
    }
}
