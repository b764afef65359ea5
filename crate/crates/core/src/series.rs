//! Windowed travel counts per flow.

use chrono::{DateTime, TimeDelta, Utc};
use ndarray::{s, Array2};

use crate::error::{Error, Result};
use crate::geo::Trip;

/// T x N matrix of travel counts per time window and flow.
#[derive(Debug, Clone, PartialEq)]
pub struct OdSeries {
    pub counts: Array2<f64>,
    pub window_len: TimeDelta,
    pub window_starts: Vec<DateTime<Utc>>,
    pub cluster_ids: Vec<usize>,
}

impl OdSeries {
    pub fn new(
        counts: Array2<f64>,
        window_len: TimeDelta,
        start: DateTime<Utc>,
        cluster_ids: Vec<usize>,
    ) -> Result<Self> {
        if window_len <= TimeDelta::zero() {
            return Err(Error::param("window length must be positive"));
        }
        if counts.ncols() != cluster_ids.len() {
            return Err(Error::shape("one cluster id per column required"));
        }
        if counts.iter().any(|&c| !(c >= 0.0)) {
            return Err(Error::param("counts must be non-negative"));
        }
        let window_starts = (0..counts.nrows())
            .map(|t| start + window_len * t as i32)
            .collect();
        Ok(Self {
            counts,
            window_len,
            window_starts,
            cluster_ids,
        })
    }

    pub fn n_windows(&self) -> usize {
        self.counts.nrows()
    }

    pub fn n_flows(&self) -> usize {
        self.counts.ncols()
    }

    pub fn start(&self) -> Option<DateTime<Utc>> {
        self.window_starts.first().copied()
    }

    /// Windows per day; only meaningful when the window divides a day.
    pub fn windows_per_day(&self) -> usize {
        (TimeDelta::days(1).num_seconds() / self.window_len.num_seconds()) as usize
    }

    /// Rows `range` as a new series.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            counts: self.counts.slice(s![range.clone(), ..]).to_owned(),
            window_len: self.window_len,
            window_starts: self.window_starts[range].to_vec(),
            cluster_ids: self.cluster_ids.clone(),
        }
    }
}

/// Number of windows of `window_len` needed to cover `[start, end)`.
pub fn window_count(start: DateTime<Utc>, end: DateTime<Utc>, window_len: TimeDelta) -> usize {
    let span = (end - start).num_seconds().max(0);
    let w = window_len.num_seconds();
    ((span + w - 1) / w) as usize
}

/// Counts trips per window and flow over `[start, end)`, zero-filling empty
/// windows. Trips whose id is `None` are skipped.
pub fn aggregate_od_series(
    trips: &[Trip],
    ids: &[Option<usize>],
    n_flows: usize,
    start: DateTime<Utc>,
    end: DateTime<Utc>,
    window_len: TimeDelta,
) -> Result<OdSeries> {
    if window_len <= TimeDelta::zero() {
        return Err(Error::param("window length must be positive"));
    }
    if trips.len() != ids.len() {
        return Err(Error::shape("one flow id per trip required"));
    }
    let t = window_count(start, end, window_len);
    let mut counts = Array2::<f64>::zeros((t, n_flows));
    let w = window_len.num_seconds();
    for (trip, id) in trips.iter().zip(ids) {
        let Some(id) = *id else { continue };
        if id >= n_flows {
            return Err(Error::UnknownCluster(id));
        }
        if trip.timestamp < start || trip.timestamp >= end {
            return Err(Error::Misaligned(format!(
                "trip at {} outside [{start}, {end})",
                trip.timestamp
            )));
        }
        let row = ((trip.timestamp - start).num_seconds() / w) as usize;
        counts[[row, id]] += 1.0;
    }
    OdSeries::new(counts, window_len, start, (0..n_flows).collect())
}

/// Chronological split: windows starting before `start + train_days` train,
/// the following `test_days` test.
pub fn train_test_split(series: &OdSeries, train_days: i64, test_days: i64) -> Result<(OdSeries, OdSeries)> {
    let start = series.start().ok_or(Error::Empty("series"))?;
    let split = start + TimeDelta::days(train_days);
    let end = split + TimeDelta::days(test_days);
    let last_end = *series.window_starts.last().expect("non-empty") + series.window_len;
    if last_end < end {
        return Err(Error::InsufficientHistory(format!(
            "series ends {last_end}, split needs {train_days}+{test_days} days to {end}"
        )));
    }
    let n_train = series.window_starts.iter().take_while(|&&s| s < split).count();
    let n_test = series.window_starts[n_train..]
        .iter()
        .take_while(|&&s| s < end)
        .count();
    Ok((
        series.slice(0..n_train),
        series.slice(n_train..n_train + n_test),
    ))
}
