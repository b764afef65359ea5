//! Travel-flow clustering: grid cells, paired 2D hotspots, and 4D K-means in
//! origin-destination space.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{max_pairwise_distance, LatLon, Trip, METERS_PER_DEGREE};
use crate::kmeans::{kmeans, nearest_center, KMeansParams};

/// Minimum number of travels for a flow to be kept.
pub const DEFAULT_MIN_TRAVELS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClusterMethod {
    Grid,
    Paired2D,
    FourD,
}

/// Per-dimension z-scoring. Zero-variance dimensions are only centered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(points: &Array2<f64>) -> Self {
        let n = points.nrows().max(1) as f64;
        let mut mean = vec![0.0; points.ncols()];
        let mut std = vec![0.0; points.ncols()];
        for (j, col) in points.columns().into_iter().enumerate() {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean[j] = m;
            let sd = var.sqrt();
            std[j] = if sd > 1e-12 * m.abs().max(1.0) { sd } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn apply(&self, points: &Array2<f64>) -> Array2<f64> {
        let mut out = points.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }
}

/// Grid anchored at the bounding-box minimum corner. Cells are closed on
/// their low edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub cell_size_m: f64,
    pub min_lat: f64,
    pub min_lon: f64,
    pub lat_step: f64,
    pub lon_step: f64,
    pub rows: usize,
    pub cols: usize,
}

impl GridGeometry {
    pub fn cell_of(&self, p: LatLon) -> Option<usize> {
        let r = ((p.lat - self.min_lat) / self.lat_step).floor();
        let c = ((p.lon - self.min_lon) / self.lon_step).floor();
        if r < 0.0 || c < 0.0 || r >= self.rows as f64 || c >= self.cols as f64 {
            return None;
        }
        Some(r as usize * self.cols + c as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Geometry {
    Grid(GridGeometry),
    Paired {
        origin_scaler: Standardizer,
        dest_scaler: Standardizer,
        /// Standardized (lat, lon) centers.
        #[serde(skip)]
        origin_centers: Array2<f64>,
        #[serde(skip)]
        dest_centers: Array2<f64>,
    },
    FourD {
        scaler: Standardizer,
        /// Standardized centers in `(o_lat, d_lat, o_lon, d_lon)` order.
        #[serde(skip)]
        centers: Array2<f64>,
    },
}

/// OD matrix sizes reported for comparison between methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OdSize {
    /// Product of the occupied origin and destination zones (or K for 4D).
    pub occupied: usize,
    /// Product of all zones the method defines.
    pub cartesian: usize,
}

/// A fitted travel clustering.
///
/// Raw cluster ids index `counts`; after [`filter_insignificant`] the
/// retained ones are re-indexed densely through `retained`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TravelClusterModel {
    pub method: ClusterMethod,
    pub seed: u64,
    pub n_clusters: usize,
    pub geometry: Geometry,
    /// Zone pair of each raw flow for grid and paired methods.
    pub flow_keys: Vec<(usize, usize)>,
    /// Raw cluster id of each training trip.
    #[serde(skip)]
    pub assignments: Vec<usize>,
    pub counts: Vec<usize>,
    /// Dense id -> raw id.
    pub retained: Vec<usize>,
    pub dropped: Vec<usize>,
    /// Final K-means cost in standardized space (4D only).
    pub cost: Option<f64>,
}

/// Zone size statistics for one cluster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoneStats {
    pub cluster_id: usize,
    pub origin_max_intra_m: f64,
    pub dest_max_intra_m: f64,
    pub travel_count: usize,
}

fn od_points(trips: &[Trip]) -> Array2<f64> {
    let mut pts = Array2::zeros((trips.len(), 4));
    for (mut row, t) in pts.rows_mut().into_iter().zip(trips) {
        for (v, x) in row.iter_mut().zip(t.od_point()) {
            *v = x;
        }
    }
    pts
}

fn endpoint_points(trips: &[Trip], origin: bool) -> Array2<f64> {
    Array2::from_shape_fn((trips.len(), 2), |(i, j)| {
        let p = if origin { trips[i].origin } else { trips[i].dest };
        if j == 0 {
            p.lat
        } else {
            p.lon
        }
    })
}

fn count_members(assignments: &[usize], n: usize) -> Vec<usize> {
    let mut counts = vec![0; n];
    for &a in assignments {
        counts[a] += 1;
    }
    counts
}

fn keyed_flows(keys: &[(usize, usize)]) -> (Vec<(usize, usize)>, Vec<usize>) {
    let distinct: BTreeSet<(usize, usize)> = keys.iter().copied().collect();
    let flow_keys: Vec<(usize, usize)> = distinct.into_iter().collect();
    let index: HashMap<(usize, usize), usize> =
        flow_keys.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    let assignments = keys.iter().map(|k| index[k]).collect();
    (flow_keys, assignments)
}

impl TravelClusterModel {
    fn from_parts(
        method: ClusterMethod,
        seed: u64,
        geometry: Geometry,
        flow_keys: Vec<(usize, usize)>,
        assignments: Vec<usize>,
        n_clusters: usize,
        cost: Option<f64>,
    ) -> Self {
        let counts = count_members(&assignments, n_clusters);
        Self {
            method,
            seed,
            n_clusters,
            geometry,
            flow_keys,
            assignments,
            counts,
            retained: (0..n_clusters).collect(),
            dropped: Vec::new(),
            cost,
        }
    }

    /// Number of flows left after filtering.
    pub fn n_flows(&self) -> usize {
        self.retained.len()
    }

    /// Number of raw clusters with at least one training trip.
    pub fn n_nonempty(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn od_size(&self) -> OdSize {
        match &self.geometry {
            Geometry::Grid(g) => {
                let occupied_cells: BTreeSet<usize> =
                    self.flow_keys.iter().flat_map(|&(o, d)| [o, d]).collect();
                OdSize {
                    occupied: occupied_cells.len().pow(2),
                    cartesian: (g.rows * g.cols).pow(2),
                }
            }
            Geometry::Paired {
                origin_centers,
                dest_centers,
                ..
            } => {
                let n = origin_centers.nrows() * dest_centers.nrows();
                OdSize {
                    occupied: n,
                    cartesian: n,
                }
            }
            Geometry::FourD { centers, .. } => OdSize {
                occupied: centers.nrows(),
                cartesian: centers.nrows(),
            },
        }
    }

    /// Centers as a row-major matrix (4D centers, or origin centers stacked
    /// above destination centers for the paired method). Empty for grids.
    pub fn center_matrix(&self) -> Array2<f64> {
        match &self.geometry {
            Geometry::Grid(_) => Array2::zeros((0, 2)),
            Geometry::Paired {
                origin_centers,
                dest_centers,
                ..
            } => ndarray::concatenate![ndarray::Axis(0), *origin_centers, *dest_centers],
            Geometry::FourD { centers, .. } => centers.clone(),
        }
    }

    /// Restores centers after deserializing the JSON header.
    pub fn set_center_matrix(&mut self, data: Array2<f64>, n_origin: usize) -> Result<()> {
        match &mut self.geometry {
            Geometry::Grid(_) => Ok(()),
            Geometry::Paired {
                origin_centers,
                dest_centers,
                ..
            } => {
                if data.ncols() != 2 || n_origin > data.nrows() {
                    return Err(Error::shape("paired centers need two columns"));
                }
                *origin_centers = data.slice(ndarray::s![..n_origin, ..]).to_owned();
                *dest_centers = data.slice(ndarray::s![n_origin.., ..]).to_owned();
                Ok(())
            }
            Geometry::FourD { centers, .. } => {
                if data.ncols() != 4 || data.nrows() != self.n_clusters {
                    return Err(Error::shape(format!(
                        "expected {}x4 centers, got {:?}",
                        self.n_clusters,
                        data.dim()
                    )));
                }
                *centers = data;
                Ok(())
            }
        }
    }

    /// Raw cluster id of each trip, `None` when the trip falls outside every
    /// known zone pair.
    pub fn assign_raw(&self, trips: &[Trip]) -> Vec<Option<usize>> {
        match &self.geometry {
            Geometry::Grid(g) => {
                let index: HashMap<(usize, usize), usize> =
                    self.flow_keys.iter().enumerate().map(|(i, &k)| (k, i)).collect();
                trips
                    .iter()
                    .map(|t| {
                        let key = (g.cell_of(t.origin)?, g.cell_of(t.dest)?);
                        index.get(&key).copied()
                    })
                    .collect()
            }
            Geometry::Paired {
                origin_scaler,
                dest_scaler,
                origin_centers,
                dest_centers,
            } => {
                let index: HashMap<(usize, usize), usize> =
                    self.flow_keys.iter().enumerate().map(|(i, &k)| (k, i)).collect();
                let o = origin_scaler.apply(&endpoint_points(trips, true));
                let d = dest_scaler.apply(&endpoint_points(trips, false));
                o.outer_iter()
                    .zip(d.outer_iter())
                    .map(|(op, dp)| {
                        let key = (
                            nearest_center(op, origin_centers).0,
                            nearest_center(dp, dest_centers).0,
                        );
                        index.get(&key).copied()
                    })
                    .collect()
            }
            Geometry::FourD { scaler, centers } => {
                let pts = scaler.apply(&od_points(trips));
                let rows: Vec<_> = pts.outer_iter().collect();
                rows.par_iter()
                    .map(|p| Some(nearest_center(*p, centers).0))
                    .collect()
            }
        }
    }

    /// Dense flow id of each trip; trips in dropped or unknown clusters map
    /// to `None`.
    pub fn assign_trips(&self, trips: &[Trip]) -> Vec<Option<usize>> {
        let mut dense = vec![None; self.n_clusters];
        for (i, &raw) in self.retained.iter().enumerate() {
            dense[raw] = Some(i);
        }
        self.assign_raw(trips)
            .into_iter()
            .map(|raw| raw.and_then(|r| dense[r]))
            .collect()
    }

    /// Zone statistics over the training trips the model was fitted on.
    pub fn zone_stats(&self, trips: &[Trip]) -> Result<Vec<ZoneStats>> {
        if trips.len() != self.assignments.len() {
            return Err(Error::shape(format!(
                "model was fitted on {} trips, got {}",
                self.assignments.len(),
                trips.len()
            )));
        }
        zone_stats(trips, &self.assignments, self.n_clusters)
    }
}

/// Per-cluster maximum intra-zone distances and travel counts.
pub fn zone_stats(trips: &[Trip], assignments: &[usize], n_clusters: usize) -> Result<Vec<ZoneStats>> {
    if trips.len() != assignments.len() {
        return Err(Error::shape("one assignment per trip required"));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    for (i, &a) in assignments.iter().enumerate() {
        members
            .get_mut(a)
            .ok_or(Error::UnknownCluster(a))?
            .push(i);
    }
    Ok(members
        .par_iter()
        .enumerate()
        .map(|(id, m)| {
            let origins: Vec<LatLon> = m.iter().map(|&i| trips[i].origin).collect();
            let dests: Vec<LatLon> = m.iter().map(|&i| trips[i].dest).collect();
            ZoneStats {
                cluster_id: id,
                origin_max_intra_m: max_pairwise_distance(&origins),
                dest_max_intra_m: max_pairwise_distance(&dests),
                travel_count: m.len(),
            }
        })
        .collect())
}

/// Assigns trips to (origin cell, destination cell) pairs of a square grid.
pub fn grid_partition(trips: &[Trip], cell_size_m: f64) -> Result<TravelClusterModel> {
    if trips.is_empty() {
        return Err(Error::Empty("trips"));
    }
    if !(cell_size_m > 0.0) {
        return Err(Error::param("cell size must be positive"));
    }
    let endpoints = trips.iter().flat_map(|t| [t.origin, t.dest]);
    let (mut min_lat, mut max_lat, mut min_lon, mut max_lon) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in endpoints {
        min_lat = min_lat.min(p.lat);
        max_lat = max_lat.max(p.lat);
        min_lon = min_lon.min(p.lon);
        max_lon = max_lon.max(p.lon);
    }
    let mid_lat = 0.5 * (min_lat + max_lat);
    let lat_step = cell_size_m / METERS_PER_DEGREE;
    let lon_step = cell_size_m / (METERS_PER_DEGREE * mid_lat.to_radians().cos().max(1e-12));
    let geometry = GridGeometry {
        cell_size_m,
        min_lat,
        min_lon,
        lat_step,
        lon_step,
        rows: ((max_lat - min_lat) / lat_step).floor() as usize + 1,
        cols: ((max_lon - min_lon) / lon_step).floor() as usize + 1,
    };
    let keys: Vec<(usize, usize)> = trips
        .iter()
        .map(|t| {
            let o = geometry.cell_of(t.origin).expect("inside bounding box");
            let d = geometry.cell_of(t.dest).expect("inside bounding box");
            (o, d)
        })
        .collect();
    let (flow_keys, assignments) = keyed_flows(&keys);
    let n = flow_keys.len();
    Ok(TravelClusterModel::from_parts(
        ClusterMethod::Grid,
        0,
        Geometry::Grid(geometry),
        flow_keys,
        assignments,
        n,
        None,
    ))
}

/// Clusters origins and destinations separately, then pairs the hotspots.
/// Only non-empty pairs become flows.
pub fn pair_2d(trips: &[Trip], k_origin: usize, k_dest: usize, seed: u64) -> Result<TravelClusterModel> {
    if trips.is_empty() {
        return Err(Error::Empty("trips"));
    }
    let o_raw = endpoint_points(trips, true);
    let d_raw = endpoint_points(trips, false);
    let origin_scaler = Standardizer::fit(&o_raw);
    let dest_scaler = Standardizer::fit(&d_raw);
    let o_fit = kmeans(&origin_scaler.apply(&o_raw), &KMeansParams::new(k_origin, seed))?;
    let d_fit = kmeans(
        &dest_scaler.apply(&d_raw),
        &KMeansParams::new(k_dest, seed.wrapping_add(1)),
    )?;
    let keys: Vec<(usize, usize)> = o_fit
        .assignments
        .iter()
        .zip(&d_fit.assignments)
        .map(|(&o, &d)| (o, d))
        .collect();
    let (flow_keys, assignments) = keyed_flows(&keys);
    let n = flow_keys.len();
    Ok(TravelClusterModel::from_parts(
        ClusterMethod::Paired2D,
        seed,
        Geometry::Paired {
            origin_scaler,
            dest_scaler,
            origin_centers: o_fit.centers,
            dest_centers: d_fit.centers,
        },
        flow_keys,
        assignments,
        n,
        None,
    ))
}

/// K-means over standardized `(o_lat, d_lat, o_lon, d_lon)` points; every
/// cluster is one travel flow.
pub fn kmeans_4d(trips: &[Trip], k: usize, seed: u64) -> Result<TravelClusterModel> {
    kmeans_4d_with(trips, &KMeansParams::new(k, seed))
}

pub fn kmeans_4d_with(trips: &[Trip], params: &KMeansParams) -> Result<TravelClusterModel> {
    if trips.is_empty() {
        return Err(Error::Empty("trips"));
    }
    let raw = od_points(trips);
    let scaler = Standardizer::fit(&raw);
    let pts = scaler.apply(&raw);
    let fit = kmeans(&pts, params)?;
    Ok(TravelClusterModel::from_parts(
        ClusterMethod::FourD,
        params.seed,
        Geometry::FourD {
            scaler,
            centers: fit.centers,
        },
        Vec::new(),
        fit.assignments,
        params.k,
        Some(fit.cost),
    ))
}

/// Standardized 4D points of `trips` under the model's scaler.
pub fn standardized_points(model: &TravelClusterModel, trips: &[Trip]) -> Result<Array2<f64>> {
    match &model.geometry {
        Geometry::FourD { scaler, .. } => Ok(scaler.apply(&od_points(trips))),
        _ => Err(Error::param("standardized 4D points need a FourD model")),
    }
}

/// Drops clusters with fewer than `min_travels` training trips and re-indexes
/// the rest densely. Returns the dropped raw ids.
pub fn filter_insignificant(model: &TravelClusterModel, min_travels: usize) -> (TravelClusterModel, Vec<usize>) {
    let mut out = model.clone();
    let (retained, dropped): (Vec<usize>, Vec<usize>) =
        (0..model.n_clusters).partition(|&i| model.counts[i] >= min_travels);
    out.retained = retained;
    out.dropped = dropped.clone();
    (out, dropped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub mean_zone_max_m: f64,
    pub n_significant: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSearchReport {
    pub chosen_k: usize,
    pub rows: Vec<SweepRow>,
    /// Set when no candidate reached the target and the largest K was taken.
    pub target_missed: bool,
}

/// Mean over non-empty clusters of the larger of the origin and destination
/// zone diameters.
pub fn mean_zone_max(stats: &[ZoneStats]) -> f64 {
    let sizes: Vec<f64> = stats
        .iter()
        .filter(|s| s.travel_count > 0)
        .map(|s| s.origin_max_intra_m.max(s.dest_max_intra_m))
        .collect();
    if sizes.is_empty() {
        0.0
    } else {
        sizes.iter().sum::<f64>() / sizes.len() as f64
    }
}

/// Mean diameter of the occupied origin and destination zones over the
/// trips the model was fitted on.
///
/// Paired and grid models share endpoint zones between flows, so each zone
/// counts once. A 4D cluster owns its origin and destination zones.
pub fn mean_endpoint_zone(model: &TravelClusterModel, trips: &[Trip]) -> Result<f64> {
    if trips.len() != model.assignments.len() {
        return Err(Error::shape(format!(
            "model was fitted on {} trips, got {}",
            model.assignments.len(),
            trips.len()
        )));
    }
    let sizes: Vec<f64> = match model.geometry {
        Geometry::FourD { .. } => model
            .zone_stats(trips)?
            .iter()
            .filter(|s| s.travel_count > 0)
            .flat_map(|s| [s.origin_max_intra_m, s.dest_max_intra_m])
            .collect(),
        _ => {
            let mut origins: BTreeMap<usize, Vec<LatLon>> = BTreeMap::new();
            let mut dests: BTreeMap<usize, Vec<LatLon>> = BTreeMap::new();
            for (t, &a) in trips.iter().zip(&model.assignments) {
                let (o, d) = model.flow_keys[a];
                origins.entry(o).or_default().push(t.origin);
                dests.entry(d).or_default().push(t.dest);
            }
            let zones: Vec<&Vec<LatLon>> = origins.values().chain(dests.values()).collect();
            zones.par_iter().map(|z| max_pairwise_distance(z)).collect()
        }
    };
    if sizes.is_empty() {
        return Err(Error::Empty("zones"));
    }
    Ok(sizes.iter().sum::<f64>() / sizes.len() as f64)
}

/// Picks the smallest K whose mean zone size is within `target_zone_max_m`.
pub fn k_search(trips: &[Trip], target_zone_max_m: f64, candidate_ks: &[usize], seed: u64) -> Result<KSearchReport> {
    if candidate_ks.is_empty() {
        return Err(Error::Empty("candidate Ks"));
    }
    if candidate_ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::param("candidate Ks must be strictly ascending"));
    }
    let mut rows = Vec::with_capacity(candidate_ks.len());
    for &k in candidate_ks {
        let model = kmeans_4d(trips, k, seed)?;
        let stats = model.zone_stats(trips)?;
        rows.push(SweepRow {
            k,
            mean_zone_max_m: mean_zone_max(&stats),
            n_significant: stats
                .iter()
                .filter(|s| s.travel_count >= DEFAULT_MIN_TRAVELS)
                .count(),
        });
    }
    let hit = rows.iter().find(|r| r.mean_zone_max_m <= target_zone_max_m);
    let (chosen_k, target_missed) = match hit {
        Some(r) => (r.k, false),
        None => {
            log::warn!("no K reaches mean zone size {target_zone_max_m} m; taking the largest");
            (*candidate_ks.last().expect("non-empty"), true)
        }
    };
    Ok(KSearchReport {
        chosen_k,
        rows,
        target_missed,
    })
}

/// Histogram of flows by training travel count, keyed by count.
pub fn count_histogram(model: &TravelClusterModel) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for &c in &model.counts {
        *h.entry(c).or_insert(0) += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};
    use crate::geo::haversine;

    fn trip(o: (f64, f64), d: (f64, f64)) -> Trip {
        Trip::new(
            Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(),
            LatLon::new(o.0, o.1).unwrap(),
            LatLon::new(d.0, d.1).unwrap(),
        )
    }

    #[test]
    fn grid_shared_cells_form_one_flow() {
        let trips = vec![
            trip((35.700, 51.400), (35.800, 51.500)),
            trip((35.701, 51.401), (35.801, 51.501)),
        ];
        let m = grid_partition(&trips, 3000.0).unwrap();
        assert_eq!(m.n_clusters, 1);
        assert_eq!(m.counts, vec![2]);
    }

    #[test]
    fn grid_straddling_boundary() {
        // Cells are 0.01 deg of latitude tall from the 35.70 corner; the
        // boundary sits at 35.70 + step. Two trips below it, two above, all
        // sharing the destination cell.
        let step = 1000.0 / METERS_PER_DEGREE;
        let b = 35.70 + step;
        let trips = vec![
            trip((35.70, 51.40), (35.70, 51.40)),
            trip((b - 1e-6, 51.40), (35.70, 51.40)),
            trip((b, 51.40), (35.70, 51.40)),
            trip((b + 1e-6, 51.40), (35.70, 51.40)),
        ];
        let m = grid_partition(&trips, 1000.0).unwrap();
        assert_eq!(m.n_clusters, 2);
        assert_eq!(m.assignments, vec![0, 0, 1, 1]);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(grid_partition(&[], 100.0).is_err());
        assert!(grid_partition(&[trip((0.0, 0.0), (0.0, 0.0))], 0.0).is_err());
    }

    /// Six trips on a constant latitude; longitudes in hundredths of a degree.
    /// Trips 0..3 share one travel pattern.
    fn split_pattern_trips() -> Vec<Trip> {
        let o = [3.0, 2.0, 0.0, -5.0, 7.0, 7.0];
        let d = [0.0, 3.0, 3.0, 8.0, -1.0, -6.0];
        o.iter()
            .zip(&d)
            .map(|(&a, &b)| trip((35.7, 51.4 + 0.01 * a), (35.7, 51.4 + 0.01 * b)))
            .collect()
    }

    #[test]
    fn paired_clustering_splits_one_pattern() {
        let trips = split_pattern_trips();
        let m = pair_2d(&trips, 2, 2, 0).unwrap();
        assert_eq!(m.n_clusters, 3);
        let pattern: BTreeSet<usize> = m.assignments[..3].iter().copied().collect();
        assert_eq!(pattern.len(), 3);
    }

    #[test]
    fn four_d_keeps_the_pattern_together() {
        // Brute-force optimal 3-partition in standardized space groups trips
        // {0,1,2}, {3}, {4,5}.
        let trips = split_pattern_trips();
        let mut p = KMeansParams::new(3, 0);
        p.n_init = 10;
        let m = kmeans_4d_with(&trips, &p).unwrap();
        let a = &m.assignments;
        assert!(a[0] == a[1] && a[1] == a[2]);
        assert_eq!(a[4], a[5]);
        assert!(a[3] != a[4] && a[3] != a[0] && a[4] != a[0]);
    }

    #[test]
    fn endpoint_zones_are_shared_by_paired_flows() {
        // Two origins 0.01 deg of longitude apart, one shared destination.
        let trips = vec![
            trip((35.7, 51.40), (35.7, 51.50)),
            trip((35.7, 51.41), (35.7, 51.50)),
            trip((35.7, 51.40), (35.7, 51.50)),
        ];
        let p = pair_2d(&trips, 1, 1, 0).unwrap();
        let o = haversine(trips[0].origin, trips[1].origin);
        assert!((mean_endpoint_zone(&p, &trips).unwrap() - o / 2.0).abs() < 1e-9);
        let f = kmeans_4d(&trips, 1, 0).unwrap();
        assert!((mean_endpoint_zone(&f, &trips).unwrap() - o / 2.0).abs() < 1e-9);
        assert!(mean_endpoint_zone(&p, &trips[..2]).is_err());
    }

    #[test]
    fn identical_trips_single_flow() {
        let trips = vec![trip((35.7, 51.4), (35.8, 51.5)); 5];
        let m = kmeans_4d(&trips, 1, 0).unwrap();
        assert_eq!(m.cost, Some(0.0));
        assert_eq!(m.counts, vec![5]);
        let p = pair_2d(&trips, 1, 1, 0).unwrap();
        assert_eq!(p.n_clusters, 1);
    }

    #[test]
    fn zone_stats_cases() {
        let trips = vec![trip((0.0, 0.0), (1.0, 1.0)), trip((0.0, 1.0), (1.0, 1.0)), trip((5.0, 5.0), (6.0, 6.0))];
        let stats = zone_stats(&trips, &[0, 0, 1], 2).unwrap();
        assert!((stats[0].origin_max_intra_m - 111_194.926_644_558_73).abs() < 1e-6);
        assert_eq!(stats[0].dest_max_intra_m, 0.0);
        assert_eq!(stats[0].travel_count, 2);
        assert_eq!((stats[1].origin_max_intra_m, stats[1].dest_max_intra_m, stats[1].travel_count), (0.0, 0.0, 1));
        assert!(matches!(zone_stats(&trips, &[0, 0, 2], 2), Err(Error::UnknownCluster(2))));
    }

    #[test]
    fn filter_threshold() {
        let trips = vec![trip((0.0, 0.0), (0.0, 0.0)); 4];
        let mut m = kmeans_4d(&trips, 1, 0).unwrap();
        m.n_clusters = 4;
        m.counts = vec![12, 3, 10, 9];
        m.retained = (0..4).collect();
        let (f, dropped) = filter_insignificant(&m, 10);
        assert_eq!(f.retained, vec![0, 2]);
        assert_eq!(dropped, vec![1, 3]);
        m.counts = vec![10, 11, 20, 30];
        let (f, dropped) = filter_insignificant(&m, 10);
        assert_eq!(f.retained, vec![0, 1, 2, 3]);
        assert!(dropped.is_empty());
    }

    #[test]
    fn assign_matches_training_member() {
        let trips = split_pattern_trips();
        let m = kmeans_4d(&trips, 3, 1).unwrap();
        let ids = m.assign_raw(&trips);
        for (id, &a) in ids.iter().zip(&m.assignments) {
            assert_eq!(*id, Some(a));
        }
    }

    #[test]
    fn assign_tie_goes_to_lowest_index() {
        let trips = vec![trip((0.0, 0.0), (0.0, 0.0)); 8];
        let mut m = kmeans_4d(&trips, 1, 0).unwrap();
        let mut centers = Array2::from_elem((8, 4), 5.0);
        centers.row_mut(3).fill(1.0);
        centers.row_mut(7).fill(-1.0);
        m.n_clusters = 8;
        m.set_center_matrix(centers, 0).unwrap();
        m.retained = (0..8).collect();
        m.counts = vec![1; 8];
        // The scaler centers the constant trips at zero: distance to rows 3 and 7 is equal.
        assert_eq!(m.assign_trips(&trips[..1]), vec![Some(3)]);
    }

    #[test]
    fn k_search_single_hotspot() {
        let trips: Vec<Trip> = (0..20)
            .map(|i| trip((35.7 + 1e-4 * i as f64, 51.4), (35.8, 51.5 + 1e-4 * i as f64)))
            .collect();
        let r = k_search(&trips, 5_000.0, &[1, 2], 0).unwrap();
        assert_eq!(r.chosen_k, 1);
        assert!(!r.target_missed);
        let r = k_search(&trips, 1.0, &[1, 2], 0).unwrap();
        assert!(r.target_missed);
        assert_eq!(r.chosen_k, 2);
    }
}
