//! Beta-divergence non-negative matrix factorization with multiplicative
//! updates.
//!
//! The count matrix `V` (T windows by N flows) is approximated by `C B`,
//! with `C` holding one coefficient row per window and `B` the shared basis.

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to reconstructions and update denominators.
pub const EPS: f64 = 1e-12;

/// Ratio `(TM + MN) / TN` at or below which the factorization counts as a
/// real compression.
pub const COMPRESSION_RATIO_LIMIT: f64 = 0.25;

/// Scalar beta-divergence `d_beta(x | y)`.
///
/// `beta = 2` is half the squared error, `beta = 1` the generalized
/// Kullback-Leibler divergence and `beta = 0` Itakura-Saito. `x = 0` is
/// accepted where the limit exists (`0 log 0 = 0` for KL, `beta > 0`
/// otherwise).
pub fn beta_divergence(x: f64, y: f64, beta: f64) -> Result<f64> {
    let domain = || Error::DivergenceDomain { beta, x, y };
    if !(y > 0.0) || !(x >= 0.0) || !x.is_finite() || !y.is_finite() {
        return Err(domain());
    }
    if x == y {
        return Ok(0.0);
    }
    let d = if beta == 1.0 {
        if x == 0.0 {
            y
        } else {
            x * (x / y).ln() - x + y
        }
    } else if beta == 0.0 {
        if x == 0.0 {
            return Err(domain());
        }
        x / y - (x / y).ln() - 1.0
    } else {
        if x == 0.0 && beta < 0.0 {
            return Err(domain());
        }
        (x.powf(beta) + (beta - 1.0) * y.powf(beta) - beta * x * y.powf(beta - 1.0))
            / (beta * (beta - 1.0))
    };
    Ok(d)
}

/// `D(V | Y)`: elementwise beta-divergence summed over the matrix, with `Y`
/// floored at [`EPS`].
pub fn divergence(v: &Array2<f64>, y: &Array2<f64>, beta: f64) -> Result<f64> {
    if v.dim() != y.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", v.dim(), y.dim())));
    }
    let mut total = 0.0;
    for (&x, &yy) in v.iter().zip(y.iter()) {
        total += beta_divergence(x, yy.max(EPS), beta)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmfConfig {
    pub n_components: usize,
    pub beta: f64,
    pub max_iters: usize,
    /// Relative divergence decrease over [`NmfConfig::tol_window`] iterations
    /// below which fitting stops.
    pub tol: f64,
    pub tol_window: usize,
    pub seed: u64,
}

impl NmfConfig {
    pub fn new(n_components: usize) -> Self {
        Self {
            n_components,
            beta: 1.0,
            max_iters: 500,
            tol: 1e-5,
            tol_window: 10,
            seed: 0,
        }
    }

    /// `max(2, round(0.01 N))` components.
    pub fn default_components(n_flows: usize) -> usize {
        ((0.01 * n_flows as f64).round() as usize).max(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmfModel {
    pub config: NmfConfig,
    /// M x N basis.
    #[serde(skip)]
    pub basis: Array2<f64>,
    /// T x M training coefficients.
    #[serde(skip)]
    pub coefficients: Array2<f64>,
    pub n_windows: usize,
    pub n_flows: usize,
    pub iterations_run: usize,
    pub divergence_trace: Vec<f64>,
    /// Whether the trace never increased (beyond rounding).
    pub monotone: bool,
    pub compression_ratio: f64,
    pub compresses: bool,
}

impl NmfModel {
    pub fn n_components(&self) -> usize {
        self.config.n_components
    }

    pub fn final_divergence(&self) -> f64 {
        *self.divergence_trace.last().unwrap_or(&f64::NAN)
    }

    /// Reconstruction of the training matrix.
    pub fn reconstruction(&self) -> Array2<f64> {
        self.coefficients.dot(&self.basis)
    }

    /// Coefficient rows for new windows with the basis frozen, using the
    /// fit's iteration budget and tolerance.
    pub fn transform(&self, v_new: &Array2<f64>) -> Result<Array2<f64>> {
        self.transform_with(v_new, self.config.max_iters, self.config.tol)
    }

    pub fn transform_with(&self, v_new: &Array2<f64>, max_iters: usize, tol: f64) -> Result<Array2<f64>> {
        if v_new.ncols() != self.n_flows {
            return Err(Error::shape(format!(
                "expected {} columns, got {}",
                self.n_flows,
                v_new.ncols()
            )));
        }
        validate_counts(v_new, self.config.beta)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x7f4a_7c15);
        let mut c = random_init(&mut rng, v_new.nrows(), self.config.n_components);
        let mean_v = v_new.mean().unwrap_or(0.0);
        let mean_cb = c.dot(&self.basis).mean().unwrap_or(0.0);
        if mean_v > 0.0 && mean_cb > 0.0 {
            c.mapv_inplace(|x| x * mean_v / mean_cb);
        }
        let beta = self.config.beta;
        let mut trace = vec![divergence(v_new, &c.dot(&self.basis), beta)?];
        for it in 0..max_iters {
            update_coefficients(v_new, &mut c, &self.basis, beta);
            trace.push(divergence(v_new, &c.dot(&self.basis), beta)?);
            if stalled(&trace, it + 1, self.config.tol_window, tol) {
                break;
            }
        }
        Ok(c)
    }

    /// Maps coefficient rows back to flow counts (`rows . B`).
    pub fn inverse(&self, coefficients: &Array2<f64>) -> Result<Array2<f64>> {
        if coefficients.ncols() != self.config.n_components {
            return Err(Error::shape(format!(
                "coefficient width {} != {}",
                coefficients.ncols(),
                self.config.n_components
            )));
        }
        Ok(coefficients.dot(&self.basis))
    }
}

fn validate_counts(v: &Array2<f64>, beta: f64) -> Result<()> {
    if let Some(&bad) = v.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
        return Err(Error::param(format!("counts must be finite and non-negative, found {bad}")));
    }
    if beta <= 0.0 && v.iter().any(|&x| x == 0.0) {
        return Err(Error::DivergenceDomain { beta, x: 0.0, y: 1.0 });
    }
    Ok(())
}

fn random_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || 0.01 + rng.random::<f64>())
}

/// `(Y^(beta-2) . V, Y^(beta-1))` with `Y` floored at [`EPS`].
fn weighted_terms(v: &Array2<f64>, cb: &Array2<f64>, beta: f64) -> (Array2<f64>, Array2<f64>) {
    let mut num = Array2::zeros(v.dim());
    let mut den = Array2::zeros(v.dim());
    Zip::from(&mut num)
        .and(&mut den)
        .and(v)
        .and(cb)
        .for_each(|n, d, &x, &y| {
            let y = y.max(EPS);
            if beta == 2.0 {
                *n = x;
                *d = y;
            } else if beta == 1.0 {
                *n = x / y;
                *d = 1.0;
            } else {
                *n = y.powf(beta - 2.0) * x;
                *d = y.powf(beta - 1.0);
            }
        });
    (num, den)
}

fn multiplicative(target: &mut Array2<f64>, num: &Array2<f64>, den: &Array2<f64>) {
    Zip::from(target).and(num).and(den).for_each(|t, &n, &d| {
        *t *= n / d.max(EPS);
    });
}

fn update_basis(v: &Array2<f64>, c: &Array2<f64>, b: &mut Array2<f64>, beta: f64) {
    let (num, den) = weighted_terms(v, &c.dot(b), beta);
    let ct = c.t();
    multiplicative(b, &ct.dot(&num), &ct.dot(&den));
}

fn update_coefficients(v: &Array2<f64>, c: &mut Array2<f64>, b: &Array2<f64>, beta: f64) {
    let (num, den) = weighted_terms(v, &c.dot(b), beta);
    let bt = b.t();
    multiplicative(c, &num.dot(&bt), &den.dot(&bt));
}

fn stalled(trace: &[f64], iters: usize, window: usize, tol: f64) -> bool {
    let last = *trace.last().expect("non-empty trace");
    if last == 0.0 {
        return true;
    }
    if iters < window.max(1) {
        return false;
    }
    let before = trace[trace.len() - 1 - window.max(1)];
    (before - last) / before.abs().max(f64::MIN_POSITIVE) < tol
}

/// Fits `V ~ C B` by alternating multiplicative updates, basis first.
pub fn nmf_fit(v: &Array2<f64>, config: &NmfConfig) -> Result<NmfModel> {
    let (t, n) = v.dim();
    let m = config.n_components;
    if m == 0 || m > t.min(n) {
        return Err(Error::param(format!("n_components {m} outside 1..={}", t.min(n))));
    }
    validate_counts(v, config.beta)?;
    if v.iter().all(|&x| x == 0.0) {
        return Err(Error::param("count matrix is all zero"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut b = random_init(&mut rng, m, n);
    let mut c = random_init(&mut rng, t, m);
    let scale = (v.mean().expect("non-empty") / c.dot(&b).mean().expect("non-empty")).sqrt();
    b.mapv_inplace(|x| x * scale);
    c.mapv_inplace(|x| x * scale);

    let beta = config.beta;
    let mut trace = vec![divergence(v, &c.dot(&b), beta)?];
    let mut monotone = true;
    let floor_slack = v.len() as f64 * EPS;
    let mut iterations_run = 0;
    for it in 0..config.max_iters {
        update_basis(v, &c, &mut b, beta);
        update_coefficients(v, &mut c, &b, beta);
        let d = divergence(v, &c.dot(&b), beta)?;
        let prev = *trace.last().expect("non-empty");
        // Reconstructions floored at EPS contribute up to EPS per entry.
        if d > prev * (1.0 + 1e-9) + floor_slack {
            monotone = false;
            if (1.0..=2.0).contains(&beta) {
                log::warn!("NMF divergence increased at iteration {it}: {prev} -> {d}");
            }
        }
        trace.push(d);
        iterations_run = it + 1;
        if stalled(&trace, iterations_run, config.tol_window, config.tol) {
            break;
        }
    }
    let ratio = (t * m + m * n) as f64 / (t * n) as f64;
    Ok(NmfModel {
        config: config.clone(),
        basis: b,
        coefficients: c,
        n_windows: t,
        n_flows: n,
        iterations_run,
        divergence_trace: trace,
        monotone,
        compression_ratio: ratio,
        compresses: ratio <= COMPRESSION_RATIO_LIMIT,
    })
}

/// Divergence of `V` from its fitted reconstruction, relative to the
/// divergence from the constant matrix holding the mean of `V`.
pub fn relative_divergence(v: &Array2<f64>, reconstruction: &Array2<f64>, beta: f64) -> Result<f64> {
    let mean = v.mean().ok_or(Error::Empty("matrix"))?;
    let baseline = divergence(v, &Array2::from_elem(v.dim(), mean), beta)?;
    Ok(divergence(v, reconstruction, beta)? / baseline.max(f64::MIN_POSITIVE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn divergence_values() {
        for beta in [-1.0, 0.0, 0.5, 1.0, 1.5, 2.0, 3.0] {
            assert_eq!(beta_divergence(2.5, 2.5, beta).unwrap(), 0.0);
        }
        assert!((beta_divergence(3.0, 1.0, 2.0).unwrap() - 2.0).abs() < 1e-12);
        let kl = 2.0 * std::f64::consts::LN_2 - 1.0;
        assert!((beta_divergence(2.0, 1.0, 1.0).unwrap() - kl).abs() < 1e-12);
        let is = 1.0 - std::f64::consts::LN_2;
        assert!((beta_divergence(2.0, 1.0, 0.0).unwrap() - is).abs() < 1e-12);
    }

    #[test]
    fn zero_count_conventions() {
        assert_eq!(beta_divergence(0.0, 3.0, 1.0).unwrap(), 3.0);
        assert!(beta_divergence(0.0, 3.0, 0.0).is_err());
        assert!((beta_divergence(0.0, 3.0, 2.0).unwrap() - 4.5).abs() < 1e-12);
        assert!(beta_divergence(1.0, 0.0, 2.0).is_err());
    }

    #[test]
    fn rank_one_recovery() {
        let c = array![[1.0], [2.0], [0.5], [3.0]];
        let b = array![[1.0, 4.0, 2.0, 0.5, 1.5]];
        let v = c.dot(&b);
        let mut cfg = NmfConfig::new(1);
        cfg.beta = 2.0;
        cfg.max_iters = 2000;
        cfg.tol = 0.0;
        let model = nmf_fit(&v, &cfg).unwrap();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(model.final_divergence() < 1e-8 * norm);
        let rec = model.reconstruction();
        for (x, y) in v.iter().zip(rec.iter()) {
            assert!((x - y).abs() <= 1e-4 * x.abs());
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let v = array![[1.0, 2.0], [3.0, 4.0]];
        assert!(nmf_fit(&v, &NmfConfig::new(0)).is_err());
        assert!(nmf_fit(&v, &NmfConfig::new(3)).is_err());
        assert!(nmf_fit(&Array2::zeros((2, 2)), &NmfConfig::new(1)).is_err());
        assert!(nmf_fit(&array![[1.0, -1.0], [1.0, 1.0]], &NmfConfig::new(1)).is_err());
    }

    #[test]
    fn square_fit_does_not_increase() {
        let v = array![[1.0, 0.0, 2.0], [0.0, 3.0, 1.0], [4.0, 1.0, 0.0]];
        let mut cfg = NmfConfig::new(3);
        cfg.max_iters = 200;
        let model = nmf_fit(&v, &cfg).unwrap();
        assert!(model.final_divergence() <= model.divergence_trace[0]);
        assert!(model.monotone);
    }

    #[test]
    fn inverse_identities() {
        let v = array![[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [1.0, 1.0, 1.0]];
        let model = nmf_fit(&v, &NmfConfig::new(2)).unwrap();
        let zero = model.inverse(&Array2::zeros((1, 2))).unwrap();
        assert!(zero.iter().all(|&x| x == 0.0));
        let e1 = model.inverse(&array![[0.0, 1.0]]).unwrap();
        assert_eq!(e1.row(0), model.basis.row(1));
        assert!(model.inverse(&Array2::zeros((1, 3))).is_err());
    }

    #[test]
    fn compression_flag() {
        let v = Array2::from_shape_fn((40, 40), |(i, j)| ((i + j) % 5) as f64 + 1.0);
        let mut cfg = NmfConfig::new(2);
        cfg.max_iters = 5;
        let m = nmf_fit(&v, &cfg).unwrap();
        assert!((m.compression_ratio - 0.1).abs() < 1e-12);
        assert!(m.compresses);
        cfg.n_components = 20;
        assert!(!nmf_fit(&v, &cfg).unwrap().compresses);
    }

    #[test]
    fn transform_zero_row_is_exact_for_euclidean() {
        let v = array![[1.0, 2.0, 3.0], [2.0, 1.0, 0.5], [1.0, 1.0, 1.0]];
        let mut cfg = NmfConfig::new(2);
        cfg.beta = 2.0;
        let model = nmf_fit(&v, &cfg).unwrap();
        let c = model.transform(&Array2::zeros((1, 3))).unwrap();
        assert!(c.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn transform_recovers_known_coefficients() {
        let b = array![[1.0, 0.0, 2.0, 1.0], [0.0, 3.0, 1.0, 0.5]];
        let mut model = nmf_fit(&b, &NmfConfig::new(2)).unwrap();
        model.basis = b.clone();
        model.config.beta = 2.0;
        let c_true = array![[2.0, 0.5]];
        let c = model.transform_with(&c_true.dot(&b), 5000, 0.0).unwrap();
        for (x, y) in c.iter().zip(c_true.iter()) {
            assert!((x - y).abs() <= 1e-4 * y, "{c}");
        }
    }
}
