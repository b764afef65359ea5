//! Central finite-difference check of analytic gradients.

use ndarray::{ArrayView2, ArrayView3};

use super::Network;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub failures: usize,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|)` among
    /// entries above the absolute floor.
    pub worst_relative: f64,
    pub worst_absolute: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

/// Perturbs every parameter by `+-step` and compares the loss slope with
/// the analytic gradient. An entry fails when its error exceeds both
/// `rel_tol` relative and `abs_floor` absolute.
pub fn gradient_check<N: Network>(
    net: &N,
    x: ArrayView3<f64>,
    extra: ArrayView2<f64>,
    target: ArrayView2<f64>,
    step: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> Result<GradCheck> {
    let (_, grad) = net.loss_grad(x, extra, target)?;
    let analytic: Vec<f64> = grad.params().iter().flat_map(|p| p.iter().copied()).collect();
    let mut probe = net.clone();
    let mut report = GradCheck {
        checked: 0,
        failures: 0,
        worst_relative: 0.0,
        worst_absolute: 0.0,
    };
    let loss = |n: &N| -> Result<f64> {
        let (l, _) = n.loss_grad(x, extra, target)?;
        Ok(l)
    };
    let sizes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
    let mut flat = 0;
    for (block, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let orig = probe.params()[block][i];
            probe.params_mut()[block][i] = orig + step;
            let up = loss(&probe)?;
            probe.params_mut()[block][i] = orig - step;
            let down = loss(&probe)?;
            probe.params_mut()[block][i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[flat];
            flat += 1;
            let err = (a - numeric).abs();
            report.checked += 1;
            report.worst_absolute = report.worst_absolute.max(err);
            if err > abs_floor {
                let rel = err / a.abs().max(numeric.abs());
                report.worst_relative = report.worst_relative.max(rel);
                if rel > rel_tol {
                    report.failures += 1;
                }
            }
        }
    }
    Ok(report)
}
