//! Error metrics on denormalized demand.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(pred: &ArrayView2<f64>, target: &ArrayView2<f64>) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", pred.dim(), target.dim())));
    }
    if pred.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    Ok(())
}

pub fn mse(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    check(&pred, &target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

pub fn mae(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    check(&pred, &target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Mean absolute percentage error over entries whose target is at least 1,
/// pooled over all windows and flows, in percent.
pub fn mape_at_1(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    check(&pred, &target)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, &t) in pred.iter().zip(target) {
        if t >= 1.0 {
            sum += (t - p).abs() / t;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoNonZeroTargets);
    }
    Ok(100.0 * sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub window_minutes: i64,
    pub mse: f64,
    pub mae: f64,
    /// Absent when no target reaches 1.
    pub mape_at_1: Option<f64>,
    pub n_windows: usize,
    pub n_nonzero_targets: usize,
}

/// All metrics for one model's `windows x flows` predictions.
pub fn evaluate(model: &str, window_minutes: i64, pred: &Array2<f64>, target: &Array2<f64>) -> Result<EvalReport> {
    if pred.dim() != target.dim() {
        return Err(Error::Misaligned(format!(
            "{model}: predictions {:?} vs targets {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let mape = match mape_at_1(pred.view(), target.view()) {
        Ok(v) => Some(v),
        Err(Error::NoNonZeroTargets) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        model: model.to_string(),
        window_minutes,
        mse: mse(pred.view(), target.view())?,
        mae: mae(pred.view(), target.view())?,
        mape_at_1: mape,
        n_windows: pred.nrows(),
        n_nonzero_targets: target.iter().filter(|&&t| t >= 1.0).count(),
    })
}
