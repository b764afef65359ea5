//! Reference predictors: calendar means, vector autoregression and KNN
//! regression.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CalendarKind {
    /// Mean of the previous 3 windows.
    Hourly,
    /// Mean of the same window of day over the previous 7 days.
    Daily,
    /// Mean of the same window and weekday over the previous 5 weeks.
    Weekly,
}

impl CalendarKind {
    pub const ALL: [CalendarKind; 3] = [CalendarKind::Hourly, CalendarKind::Daily, CalendarKind::Weekly];

    pub fn label(self) -> &'static str {
        match self {
            CalendarKind::Hourly => "calendar_hourly",
            CalendarKind::Daily => "calendar_daily",
            CalendarKind::Weekly => "calendar_weekly",
        }
    }

    /// Row offsets back from the target window that are averaged.
    fn offsets(self, windows_per_day: usize) -> Vec<usize> {
        match self {
            CalendarKind::Hourly => (1..=3).collect(),
            CalendarKind::Daily => (1..=7).map(|d| d * windows_per_day).collect(),
            CalendarKind::Weekly => (1..=5).map(|w| w * 7 * windows_per_day).collect(),
        }
    }

    /// History in windows the model needs before its first prediction.
    pub fn history(self, windows_per_day: usize) -> usize {
        *self.offsets(windows_per_day).last().expect("non-empty")
    }
}

impl fmt::Display for CalendarKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for CalendarKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim_start_matches("calendar_") {
            "hourly" => Ok(CalendarKind::Hourly),
            "daily" => Ok(CalendarKind::Daily),
            "weekly" => Ok(CalendarKind::Weekly),
            other => Err(Error::Parse(format!("unknown calendar model `{other}`"))),
        }
    }
}

/// Calendar mean for window `target` of a `T x N` count matrix.
pub fn calendar_predict(
    counts: &Array2<f64>,
    windows_per_day: usize,
    kind: CalendarKind,
    target: usize,
) -> Result<Array1<f64>> {
    if windows_per_day == 0 {
        return Err(Error::param("windows_per_day must be positive"));
    }
    let offsets = kind.offsets(windows_per_day);
    let need = *offsets.last().expect("non-empty");
    if target < need || target > counts.nrows() {
        return Err(Error::InsufficientHistory(format!(
            "{kind} needs {need} windows before target {target}"
        )));
    }
    let mut sum = Array1::zeros(counts.ncols());
    for off in &offsets {
        sum += &counts.row(target - off);
    }
    Ok(sum / offsets.len() as f64)
}

/// Calendar predictions for each row index in `targets`.
pub fn calendar_range(
    counts: &Array2<f64>,
    windows_per_day: usize,
    kind: CalendarKind,
    targets: Range<usize>,
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((targets.len(), counts.ncols()));
    for (i, t) in targets.enumerate() {
        out.row_mut(i).assign(&calendar_predict(counts, windows_per_day, kind, t)?);
    }
    Ok(out)
}

/// Relative ridge used to break ties on rank-deficient designs.
pub const VAR_RIDGE: f64 = 1e-8;

/// `y_t = c + sum_i A_i y_{t-i} (+ G x_t)`, fitted by least squares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarModel {
    pub lag: usize,
    pub intercept: Array1<f64>,
    /// `coefficients[i]` multiplies `y_{t-1-i}`; each is `M x M`.
    pub coefficients: Vec<Array2<f64>>,
    /// `M x E` loading on exogenous regressors, if any.
    pub exogenous: Option<Array2<f64>>,
    pub residual_mean: Array1<f64>,
    pub residual_cov: Array2<f64>,
}

impl VarModel {
    pub fn dim(&self) -> usize {
        self.intercept.len()
    }

    /// Point forecast from the last `lag` rows of history (oldest first).
    pub fn predict(&self, history: ArrayView2<f64>, exog: Option<ArrayView1<f64>>) -> Result<Array1<f64>> {
        if history.nrows() != self.lag || history.ncols() != self.dim() {
            return Err(Error::shape(format!(
                "VAR({}) over {} series needs a {}x{} history, got {:?}",
                self.lag,
                self.dim(),
                self.lag,
                self.dim(),
                history.dim()
            )));
        }
        let mut y = self.intercept.clone();
        for (i, a) in self.coefficients.iter().enumerate() {
            y += &a.dot(&history.row(self.lag - 1 - i));
        }
        match (&self.exogenous, exog) {
            (Some(g), Some(x)) if g.ncols() == x.len() => y += &g.dot(&x),
            (None, None) => {}
            _ => return Err(Error::shape("exogenous regressors do not match the fitted model")),
        }
        Ok(y)
    }

    /// Forecasts for each row index in `targets` of `series`.
    pub fn predict_range(
        &self,
        series: &Array2<f64>,
        exog: Option<&Array2<f64>>,
        targets: Range<usize>,
    ) -> Result<Array2<f64>> {
        if targets.start < self.lag || targets.end > series.nrows() {
            return Err(Error::InsufficientHistory(format!("targets {targets:?} with lag {}", self.lag)));
        }
        let mut out = Array2::zeros((targets.len(), self.dim()));
        for (i, t) in targets.enumerate() {
            let x = exog.map(|e| e.row(t));
            out.row_mut(i)
                .assign(&self.predict(series.slice(s![t - self.lag..t, ..]), x)?);
        }
        Ok(out)
    }
}

/// Ordinary least squares VAR(`lag`) on a `T x M` series.
pub fn var_fit(series: &Array2<f64>, lag: usize) -> Result<VarModel> {
    var_fit_exog(series, None, lag)
}

/// VAR with optional exogenous regressors `exog` (`T x E`, row `t` used for
/// target `t`).
///
/// The design is centered so the intercept is unpenalized, and a ridge of
/// [`VAR_RIDGE`] times the mean Gram diagonal selects the minimum-norm
/// solution when regressors are collinear.
pub fn var_fit_exog(series: &Array2<f64>, exog: Option<&Array2<f64>>, lag: usize) -> Result<VarModel> {
    let (t, m) = series.dim();
    if lag == 0 || m == 0 {
        return Err(Error::param("VAR needs lag >= 1 and at least one series"));
    }
    let e = exog.map_or(0, |x| x.ncols());
    if exog.is_some_and(|x| x.nrows() != t) {
        return Err(Error::Misaligned("exogenous rows differ from series rows".into()));
    }
    let k = lag * m + e;
    if t <= k + 1 {
        return Err(Error::InsufficientHistory(format!(
            "VAR({lag}) with {k} regressors needs more than {} windows, got {t}",
            k + 1
        )));
    }
    let n = t - lag;
    let mut z = Array2::zeros((n, k));
    for r in 0..n {
        let tau = r + lag;
        for i in 0..lag {
            z.slice_mut(s![r, i * m..(i + 1) * m]).assign(&series.row(tau - 1 - i));
        }
        if let Some(x) = exog {
            z.slice_mut(s![r, lag * m..]).assign(&x.row(tau));
        }
    }
    let y = series.slice(s![lag.., ..]).to_owned();
    if let Some(col) = (0..k).find(|&j| z.column(j).iter().any(|v| !v.is_finite())) {
        return Err(Error::SingularDesign { dimension: col });
    }
    let z_mean = z.mean_axis(Axis(0)).expect("n > 0");
    let y_mean = y.mean_axis(Axis(0)).expect("n > 0");
    let zc = &z - &z_mean;
    let yc = &y - &y_mean;

    let mut gram = zc.t().dot(&zc);
    let scale = gram.diag().mean().unwrap_or(0.0);
    let ridge = VAR_RIDGE * if scale > 0.0 { scale } else { 1.0 };
    for j in 0..k {
        gram[[j, j]] += ridge;
    }
    let rhs = zc.t().dot(&yc);
    let g = DMatrix::from_row_iterator(k, k, gram.iter().copied());
    let chol = Cholesky::new(g).ok_or_else(|| {
        let worst = (0..k)
            .min_by(|&a, &b| gram[[a, a]].total_cmp(&gram[[b, b]]))
            .unwrap_or(0);
        Error::SingularDesign { dimension: worst }
    })?;
    let b = DMatrix::from_row_iterator(k, m, rhs.iter().copied());
    let theta_na = chol.solve(&b);
    let theta = Array2::from_shape_fn((k, m), |(i, j)| theta_na[(i, j)]);

    let coefficients = (0..lag)
        .map(|i| theta.slice(s![i * m..(i + 1) * m, ..]).t().to_owned())
        .collect();
    let exogenous = exog.map(|_| theta.slice(s![lag * m.., ..]).t().to_owned());
    let intercept = &y_mean - &theta.t().dot(&z_mean);

    let fitted = z.dot(&theta) + &intercept;
    let resid = &y - &fitted;
    let residual_mean = resid.mean_axis(Axis(0)).expect("n > 0");
    let rc = &resid - &residual_mean;
    let residual_cov = rc.t().dot(&rc) / n as f64;
    Ok(VarModel {
        lag,
        intercept,
        coefficients,
        exogenous,
        residual_mean,
        residual_cov,
    })
}

/// Uniform-weight nearest-neighbour regression.
///
/// `train_x` holds one flattened window per row. Ties in distance go to the
/// earlier training row.
pub fn knn_predict(train_x: ArrayView2<f64>, train_y: ArrayView2<f64>, query: ArrayView1<f64>, k: usize) -> Result<Array1<f64>> {
    if k == 0 {
        return Err(Error::param("k must be positive"));
    }
    if k > train_x.nrows() {
        return Err(Error::InvalidK { k, n: train_x.nrows() });
    }
    if train_x.nrows() != train_y.nrows() || query.len() != train_x.ncols() {
        return Err(Error::shape("KNN query, inputs and targets disagree"));
    }
    let mut dist: Vec<(f64, usize)> = train_x
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| (r.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum(), i))
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out = Array1::zeros(train_y.ncols());
    for &(_, i) in &dist[..k] {
        out += &train_y.row(i);
    }
    Ok(out / k as f64)
}

/// [`knn_predict`] for every query row, in parallel.
pub fn knn_predict_batch(
    train_x: ArrayView2<f64>,
    train_y: ArrayView2<f64>,
    queries: ArrayView2<f64>,
    k: usize,
) -> Result<Array2<f64>> {
    let rows: Vec<Array1<f64>> = (0..queries.nrows())
        .into_par_iter()
        .map(|q| knn_predict(train_x, train_y, queries.row(q), k))
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros((queries.nrows(), train_y.ncols()));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    Ok(out)
}
