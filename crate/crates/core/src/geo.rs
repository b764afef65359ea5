//! Geographic primitives: validated coordinates, trips and great-circle distances.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Length of one degree of latitude in meters on the spherical Earth.
pub const METERS_PER_DEGREE: f64 = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;

/// A WGS84 coordinate in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::InvalidCoordinate(format!("({lat}, {lon})")));
        }
        Ok(Self { lat, lon })
    }
}

/// One ride record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trip {
    pub timestamp: DateTime<Utc>,
    pub origin: LatLon,
    pub dest: LatLon,
}

impl Trip {
    pub fn new(timestamp: DateTime<Utc>, origin: LatLon, dest: LatLon) -> Self {
        Self {
            timestamp,
            origin,
            dest,
        }
    }

    /// The trip as a point in origin-destination space, ordered
    /// `(origin_lat, dest_lat, origin_lon, dest_lon)`.
    pub fn od_point(&self) -> [f64; 4] {
        [self.origin.lat, self.dest.lat, self.origin.lon, self.dest.lon]
    }
}

/// Great-circle distance in meters (haversine form).
pub fn haversine(a: LatLon, b: LatLon) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Converts a metric offset around `origin` into degrees of latitude and longitude.
pub fn meters_to_degrees(origin: LatLon, north_m: f64, east_m: f64) -> (f64, f64) {
    let dlat = north_m / METERS_PER_DEGREE;
    let coslat = origin.lat.to_radians().cos().max(1e-12);
    let dlon = east_m / (METERS_PER_DEGREE * coslat);
    (dlat, dlon)
}

/// Maximum pairwise haversine distance by exhaustive enumeration.
pub fn max_pairwise_exhaustive(points: &[LatLon]) -> f64 {
    let mut best = 0.0_f64;
    for (i, &a) in points.iter().enumerate() {
        for &b in &points[i + 1..] {
            best = best.max(haversine(a, b));
        }
    }
    best
}

/// Above this many points, the maximum pairwise distance is searched on the
/// convex hull only.
pub const HULL_THRESHOLD: usize = 2_000;

/// Maximum pairwise distance among `points`.
///
/// Small sets are enumerated exhaustively. Larger sets first reduce to the
/// convex hull of the points in a local equirectangular projection, which
/// contains the farthest pair for zone-sized extents.
pub fn max_pairwise_distance(points: &[LatLon]) -> f64 {
    if points.len() <= HULL_THRESHOLD {
        return max_pairwise_exhaustive(points);
    }
    let hull = convex_hull(points);
    max_pairwise_exhaustive(&hull)
}

/// Convex hull (Andrew's monotone chain) in a local equirectangular projection.
pub fn convex_hull(points: &[LatLon]) -> Vec<LatLon> {
    let mean_lat = points.iter().map(|p| p.lat).sum::<f64>() / points.len() as f64;
    let k = mean_lat.to_radians().cos();
    let mut pts: Vec<(f64, f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (p.lon * k, p.lat, i))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
    if pts.len() < 3 {
        return pts.iter().map(|p| points[p.2]).collect();
    }
    let cross = |o: (f64, f64, usize), a: (f64, f64, usize), b: (f64, f64, usize)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(f64, f64, usize)> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull.iter().map(|p| points[p.2]).collect()
}
