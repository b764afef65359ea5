//! Lloyd's K-means with K-means++ seeding.
//!
//! Ties in nearest-center search go to the lowest center index. Clusters that
//! empty out during iteration are re-seeded at the point farthest from its
//! current center, so the requested K is always kept.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once the largest center shift falls to this value or below.
    pub tol: f64,
    /// Independent K-means++ restarts; the lowest-cost run wins.
    pub n_init: usize,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iters: 300,
            tol: 1e-4,
            n_init: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centers: Array2<f64>,
    pub assignments: Vec<usize>,
    pub cost: f64,
    /// Cost after every assignment step, first entry from the seeding.
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
}

/// Squared Euclidean distance.
#[inline]
pub fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center (lowest index on ties) and its squared distance.
pub fn nearest_center(point: ArrayView1<f64>, centers: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.outer_iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn assign(points: &Array2<f64>, centers: &Array2<f64>) -> Vec<(usize, f64)> {
    let d = points.ncols();
    if d == 0 {
        return vec![(0, 0.0); points.nrows()];
    }
    // Flat row-major slices; same summation order as `sq_dist`.
    let points = points.as_standard_layout();
    let centers = centers.as_standard_layout();
    let cs = centers.as_slice().expect("standard layout");
    points
        .as_slice()
        .expect("standard layout")
        .par_chunks_exact(d)
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (i, c) in cs.chunks_exact(d).enumerate() {
                let dist: f64 = p.iter().zip(c).map(|(x, y)| (x - y) * (x - y)).sum();
                if dist < best.1 {
                    best = (i, dist);
                }
            }
            best
        })
        .collect()
}

/// Sum of squared distances from each point to its assigned center.
pub fn cost(points: &Array2<f64>, centers: &Array2<f64>, assignments: &[usize]) -> f64 {
    points
        .outer_iter()
        .zip(assignments)
        .map(|(p, &a)| sq_dist(p, centers.row(a)))
        .sum()
}

/// Means of the member points; empty clusters keep their previous center.
pub fn cluster_means(points: &Array2<f64>, assignments: &[usize], previous: &Array2<f64>) -> Array2<f64> {
    let (k, d) = previous.dim();
    let mut sums = Array2::<f64>::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (p, &a) in points.outer_iter().zip(assignments) {
        let mut row = sums.row_mut(a);
        row += &p;
        counts[a] += 1;
    }
    for (i, &c) in counts.iter().enumerate() {
        if c == 0 {
            sums.row_mut(i).assign(&previous.row(i));
        } else {
            sums.row_mut(i).mapv_inplace(|v| v / c as f64);
        }
    }
    sums
}

fn kmeans_plus_plus(points: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (n, d) = points.dim();
    let mut centers = Array2::<f64>::zeros((k, d));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&points.row(first));
    let mut dist: Vec<f64> = points
        .outer_iter()
        .map(|p| sq_dist(p, centers.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.outer_iter().enumerate() {
            let nd = sq_dist(p, centers.row(c));
            if nd < dist[i] {
                dist[i] = nd;
            }
        }
    }
    centers
}

/// Moves the farthest points into empty clusters. Donors must keep at least
/// one member. Returns whether anything changed.
fn reseed_empty(
    points: &Array2<f64>,
    centers: &mut Array2<f64>,
    assigned: &mut [(usize, f64)],
) -> bool {
    let k = centers.nrows();
    let mut counts = vec![0usize; k];
    for &(a, _) in assigned.iter() {
        counts[a] += 1;
    }
    let mut changed = false;
    for empty in 0..k {
        if counts[empty] != 0 {
            continue;
        }
        let mut far: Option<(usize, f64)> = None;
        for (i, &(a, d)) in assigned.iter().enumerate() {
            if counts[a] > 1 && far.is_none_or(|(_, fd)| d > fd) {
                far = Some((i, d));
            }
        }
        let Some((i, _)) = far else { break };
        let donor = assigned[i].0;
        counts[donor] -= 1;
        counts[empty] += 1;
        assigned[i] = (empty, 0.0);
        centers.row_mut(empty).assign(&points.row(i));
        changed = true;
    }
    changed
}

fn lloyd(points: &Array2<f64>, params: &KMeansParams, rng: &mut ChaCha8Rng) -> KMeansFit {
    let mut centers = kmeans_plus_plus(points, params.k, rng);
    let mut assigned = assign(points, &centers);
    reseed_empty(points, &mut centers, &mut assigned);
    let mut current_cost: f64 = assigned.iter().map(|a| a.1).sum();
    let mut cost_trace = vec![current_cost];
    let mut iterations = 0;
    while iterations < params.max_iters {
        iterations += 1;
        let labels: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        let new_centers = cluster_means(points, &labels, &centers);
        let shift = centers
            .outer_iter()
            .zip(new_centers.outer_iter())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centers = new_centers;
        assigned = assign(points, &centers);
        reseed_empty(points, &mut centers, &mut assigned);
        let new_cost: f64 = assigned.iter().map(|a| a.1).sum();
        debug_assert!(
            new_cost <= current_cost * (1.0 + 1e-12) + 1e-12,
            "Lloyd cost increased: {current_cost} -> {new_cost}"
        );
        cost_trace.push(new_cost);
        current_cost = new_cost;
        let unchanged = assigned.iter().map(|a| a.0).eq(labels.iter().copied());
        if unchanged || shift <= params.tol {
            break;
        }
    }
    let assignments: Vec<usize> = assigned.iter().map(|a| a.0).collect();
    // Final centers are exact member means.
    let centers = cluster_means(points, &assignments, &centers);
    let cost = cost(points, &centers, &assignments);
    KMeansFit {
        centers,
        assignments,
        cost,
        cost_trace,
        iterations,
    }
}

/// Runs K-means on the rows of `points`.
pub fn kmeans(points: &Array2<f64>, params: &KMeansParams) -> Result<KMeansFit> {
    let n = points.nrows();
    if params.k == 0 || params.k > n {
        return Err(Error::InvalidK { k: params.k, n });
    }
    if params.n_init == 0 {
        return Err(Error::param("n_init must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<KMeansFit> = None;
    for _ in 0..params.n_init {
        let fit = lloyd(points, params, &mut rng);
        if best.as_ref().is_none_or(|b| fit.cost < b.cost) {
            best = Some(fit);
        }
    }
    Ok(best.expect("n_init >= 1"))
}

/// Total, within-cluster and between-cluster scatter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterReport {
    pub s_t: f64,
    pub s_w: f64,
    pub s_b: f64,
}

impl ScatterReport {
    pub fn identity_gap(&self) -> f64 {
        (self.s_t - self.s_w - self.s_b).abs()
    }
}

/// Scatter decomposition of a clustering of `points` with the given centers.
pub fn scatter_report(points: &Array2<f64>, centers: &Array2<f64>, assignments: &[usize]) -> Result<ScatterReport> {
    if points.nrows() != assignments.len() {
        return Err(Error::shape(format!(
            "{} points but {} assignments",
            points.nrows(),
            assignments.len()
        )));
    }
    if points.nrows() == 0 {
        return Err(Error::Empty("points"));
    }
    let global: Array1<f64> = points.mean_axis(Axis(0)).expect("non-empty");
    let s_t = points.outer_iter().map(|p| sq_dist(p, global.view())).sum();
    let s_w = cost(points, centers, assignments);
    let mut sizes = vec![0usize; centers.nrows()];
    for &a in assignments {
        sizes[a] += 1;
    }
    let s_b = centers
        .outer_iter()
        .zip(&sizes)
        .map(|(c, &w)| w as f64 * sq_dist(c, global.view()))
        .sum();
    Ok(ScatterReport { s_t, s_w, s_b })
}
