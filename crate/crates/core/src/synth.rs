//! Synthetic city: hotspot-pair trips with daily and weekly seasonality and
//! weather-coupled demand.

use chrono::{DateTime, Datelike, NaiveDate, TimeDelta, TimeZone, Timelike, Utc};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{meters_to_degrees, LatLon, Trip};

pub const WEATHER_CHANNELS: [&str; 7] = [
    "temperature",
    "pressure",
    "humidity",
    "wind_speed",
    "wind_direction",
    "dew_point",
    "visibility",
];

/// Bounds and hourly step size of one weather random walk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelWalk {
    pub low: f64,
    pub high: f64,
    pub step: f64,
    /// Wind direction wraps instead of reflecting.
    pub circular: bool,
}

impl ChannelWalk {
    fn center(&self) -> f64 {
        0.5 * (self.low + self.high)
    }

    fn half_width(&self) -> f64 {
        0.5 * (self.high - self.low)
    }
}

/// Default walks in degC, hPa, %, m/s, degrees, degC, km.
pub fn default_weather_walks() -> [ChannelWalk; 7] {
    let w = |low, high, step| ChannelWalk {
        low,
        high,
        step,
        circular: false,
    };
    [
        w(-5.0, 40.0, 0.8),
        w(990.0, 1030.0, 0.5),
        w(10.0, 100.0, 2.5),
        w(0.0, 20.0, 0.8),
        ChannelWalk {
            low: 0.0,
            high: 360.0,
            step: 15.0,
            circular: true,
        },
        w(-15.0, 25.0, 0.7),
        w(0.5, 20.0, 0.6),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HotspotPair {
    pub origin: LatLon,
    pub dest: LatLon,
    pub origin_spread_m: f64,
    pub dest_spread_m: f64,
    /// Mean trips per hour before seasonal and weather factors.
    pub base_rate: f64,
    /// Hour of day with peak demand.
    pub peak_hour: f64,
    /// Day of week with peak demand, Monday = 0.
    pub peak_day: f64,
}

fn default_sharpness() -> f64 {
    3.0
}

/// `exp(-k) I0(k)`: the day-average of `exp(k (cos x - 1))`.
fn bump_mean(k: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    let q = 0.25 * k * k;
    for j in 1..200 {
        term *= q / (j * j) as f64;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    (-k).exp() * sum
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityConfig {
    pub start: DateTime<Utc>,
    pub duration_days: u32,
    pub pairs: Vec<HotspotPair>,
    /// Share of demand following the daily peak, in `[0, 1]`; the rest is
    /// spread evenly over the day.
    pub daily_amplitude: f64,
    /// Concentration of the daily peak around `peak_hour`; 0 flattens it.
    #[serde(default = "default_sharpness")]
    pub daily_sharpness: f64,
    pub weekly_amplitude: f64,
    /// Log-rate coefficient per weather channel, applied to the channel
    /// rescaled to `[-1, 1]` over its walk bounds.
    pub weather_coupling: [f64; 7],
    pub weather_walks: [ChannelWalk; 7],
    pub holidays: Vec<NaiveDate>,
    pub holiday_factor: f64,
    pub seed: u64,
}

impl CityConfig {
    /// A city of `n_pairs` hotspot pairs scattered over a 30 km square, with
    /// base rates scaled so the expected total is roughly `target_trips`.
    pub fn synthetic(n_pairs: usize, duration_days: u32, target_trips: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c17e);
        let center = LatLon { lat: 35.70, lon: 51.40 };
        let place = |rng: &mut ChaCha8Rng| {
            let (dlat, dlon) = meters_to_degrees(
                center,
                rng.random_range(-15_000.0..15_000.0),
                rng.random_range(-15_000.0..15_000.0),
            );
            LatLon {
                lat: center.lat + dlat,
                lon: center.lon + dlon,
            }
        };
        let pairs: Vec<HotspotPair> = (0..n_pairs)
            .map(|_| HotspotPair {
                origin: place(&mut rng),
                dest: place(&mut rng),
                origin_spread_m: rng.random_range(500.0..1_200.0),
                dest_spread_m: rng.random_range(500.0..1_200.0),
                base_rate: rng.random_range(0.3..1.7),
                peak_hour: if rng.random::<bool>() {
                    rng.random_range(7.0..10.0)
                } else {
                    rng.random_range(16.0..20.0)
                },
                peak_day: rng.random_range(0.0..7.0),
            })
            .collect();
        let start = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
        let holidays = [11, 32]
            .iter()
            .filter(|&&d| d < duration_days as i64)
            .map(|&d| (start + TimeDelta::days(d)).date_naive())
            .collect();
        let mut config = Self {
            start,
            duration_days,
            pairs,
            daily_amplitude: 0.9,
            daily_sharpness: default_sharpness(),
            weekly_amplitude: 0.25,
            weather_coupling: [0.0, 0.0, 0.6, 0.0, 0.0, 0.0, -0.6],
            weather_walks: default_weather_walks(),
            holidays,
            holiday_factor: 0.6,
            seed,
        };
        let total = config.expected_total();
        if total > 0.0 {
            for p in &mut config.pairs {
                p.base_rate *= target_trips / total;
            }
        }
        config
    }

    /// Expected number of trips over the whole span under this config's
    /// weather.
    pub fn expected_total(&self) -> f64 {
        let weather = generate_weather(self);
        (0..weather.values.nrows())
            .map(|h| {
                let t = weather.timestamp(h);
                let w = weather.values.row(h);
                let w = w.as_slice().expect("contiguous");
                self.pairs.iter().map(|p| self.rate(p, t, w)).sum::<f64>()
            })
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.duration_days == 0 {
            return Err(Error::param("duration must be at least one day"));
        }
        if !(0.0..=1.0).contains(&self.daily_amplitude) || !(0.0..1.0).contains(&self.weekly_amplitude) {
            return Err(Error::param("daily amplitude must lie in [0, 1], weekly in [0, 1)"));
        }
        if !(self.daily_sharpness >= 0.0) || !self.daily_sharpness.is_finite() {
            return Err(Error::param("daily sharpness must be finite and non-negative"));
        }
        if !(self.holiday_factor >= 0.0) {
            return Err(Error::param("holiday factor must be non-negative"));
        }
        for (i, p) in self.pairs.iter().enumerate() {
            if !(p.base_rate >= 0.0) {
                return Err(Error::param(format!("pair {i}: negative rate")));
            }
            if !(p.origin_spread_m > 0.0) || !(p.dest_spread_m > 0.0) {
                return Err(Error::param(format!("pair {i}: spreads must be positive")));
            }
            LatLon::new(p.origin.lat, p.origin.lon)?;
            LatLon::new(p.dest.lat, p.dest.lon)?;
        }
        for w in &self.weather_walks {
            if !(w.high > w.low) || !(w.step >= 0.0) {
                return Err(Error::param("weather walk needs low < high and step >= 0"));
            }
        }
        Ok(())
    }

    pub fn end(&self) -> DateTime<Utc> {
        self.start + TimeDelta::days(self.duration_days as i64)
    }

    pub fn is_holiday(&self, t: DateTime<Utc>) -> bool {
        self.holidays.contains(&t.date_naive())
    }

    /// Daily profile with mean one over the day: a von Mises shaped peak at
    /// `peak_hour` carrying `daily_amplitude` of the demand.
    pub fn daily_factor(&self, p: &HotspotPair, hour: f64) -> f64 {
        let k = self.daily_sharpness;
        let phase = std::f64::consts::TAU * (hour - p.peak_hour) / 24.0;
        let bump = (k * (phase.cos() - 1.0)).exp() / bump_mean(k);
        1.0 - self.daily_amplitude + self.daily_amplitude * bump
    }

    pub fn weekly_factor(&self, p: &HotspotPair, day: f64) -> f64 {
        let phase = std::f64::consts::TAU * (day - p.peak_day) / 7.0;
        1.0 + self.weekly_amplitude * phase.cos()
    }

    pub fn weather_factor(&self, weather: &[f64]) -> f64 {
        let s: f64 = weather
            .iter()
            .zip(&self.weather_walks)
            .zip(&self.weather_coupling)
            .map(|((&v, w), &k)| k * (v - w.center()) / w.half_width())
            .sum();
        s.exp()
    }

    /// Expected trips of `pair` during the hour starting at `t`.
    pub fn rate(&self, pair: &HotspotPair, t: DateTime<Utc>, weather: &[f64]) -> f64 {
        let hour = t.hour() as f64 + 0.5;
        let day = t.weekday().num_days_from_monday() as f64;
        let holiday = if self.is_holiday(t) {
            self.holiday_factor
        } else {
            1.0
        };
        pair.base_rate
            * self.daily_factor(pair, hour)
            * self.weekly_factor(pair, day)
            * self.weather_factor(weather)
            * holiday
    }
}

/// Hourly weather observations.
#[derive(Debug, Clone, PartialEq)]
pub struct WeatherTable {
    pub start: DateTime<Utc>,
    /// One row per hour, columns in [`WEATHER_CHANNELS`] order.
    pub values: Array2<f64>,
}

impl WeatherTable {
    pub fn timestamp(&self, row: usize) -> DateTime<Utc> {
        self.start + TimeDelta::hours(row as i64)
    }
}

/// Hourly bounded random walks, reflecting at the bounds.
pub fn generate_weather(config: &CityConfig) -> WeatherTable {
    let hours = config.duration_days as usize * 24;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0xea7e);
    let mut values = Array2::zeros((hours, 7));
    let mut state: Vec<f64> = config
        .weather_walks
        .iter()
        .map(|w| rng.random_range(w.low..w.high))
        .collect();
    for h in 0..hours {
        for (c, w) in config.weather_walks.iter().enumerate() {
            values[[h, c]] = state[c];
            let step = Normal::new(0.0, w.step.max(0.0))
                .expect("finite step")
                .sample(&mut rng);
            let mut next = state[c] + step;
            let span = w.high - w.low;
            if w.circular {
                next = w.low + (next - w.low).rem_euclid(span);
            } else {
                // Reflect until inside; steps are small relative to span.
                while next < w.low || next > w.high {
                    if next < w.low {
                        next = 2.0 * w.low - next;
                    }
                    if next > w.high {
                        next = 2.0 * w.high - next;
                    }
                }
            }
            state[c] = next;
        }
    }
    WeatherTable {
        start: config.start,
        values,
    }
}

fn pair_seed(seed: u64, pair: usize) -> u64 {
    seed ^ (pair as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Draws Poisson trip counts per hour and pair, with timestamps jittered
/// uniformly inside the hour and endpoints Gaussian around the hotspots.
/// Trips are returned sorted by timestamp.
pub fn generate_city(config: &CityConfig) -> Result<(Vec<Trip>, WeatherTable)> {
    config.validate()?;
    let weather = generate_weather(config);
    let hours = weather.values.nrows();
    let per_pair: Vec<Vec<Trip>> = config
        .pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(config.seed, i));
            let o_noise = Normal::new(0.0, pair.origin_spread_m).expect("positive spread");
            let d_noise = Normal::new(0.0, pair.dest_spread_m).expect("positive spread");
            let mut trips = Vec::new();
            for h in 0..hours {
                let t = weather.timestamp(h);
                let w = weather.values.row(h);
                let lambda = config.rate(pair, t, w.as_slice().expect("contiguous"));
                let n = if lambda > 0.0 {
                    Poisson::new(lambda).expect("positive rate").sample(&mut rng) as usize
                } else {
                    0
                };
                for _ in 0..n {
                    let ts = t + TimeDelta::seconds(rng.random_range(0..3600));
                    let (olat, olon) =
                        meters_to_degrees(pair.origin, o_noise.sample(&mut rng), o_noise.sample(&mut rng));
                    let (dlat, dlon) =
                        meters_to_degrees(pair.dest, d_noise.sample(&mut rng), d_noise.sample(&mut rng));
                    trips.push(Trip::new(
                        ts,
                        LatLon {
                            lat: (pair.origin.lat + olat).clamp(-90.0, 90.0),
                            lon: (pair.origin.lon + olon).clamp(-180.0, 180.0),
                        },
                        LatLon {
                            lat: (pair.dest.lat + dlat).clamp(-90.0, 90.0),
                            lon: (pair.dest.lon + dlon).clamp(-180.0, 180.0),
                        },
                    ));
                }
            }
            trips
        })
        .collect();
    let mut trips: Vec<Trip> = per_pair.into_iter().flatten().collect();
    trips.sort_by_key(|t| t.timestamp);
    Ok((trips, weather))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_pair(rate: f64) -> CityConfig {
        let mut c = CityConfig::synthetic(1, 5, 100.0, 1);
        c.pairs[0].base_rate = rate;
        c.daily_amplitude = 0.0;
        c.weekly_amplitude = 0.0;
        c.weather_coupling = [0.0; 7];
        c.holidays.clear();
        c
    }

    #[test]
    fn zero_rate_no_trips() {
        let mut c = CityConfig::synthetic(3, 2, 100.0, 0);
        for p in &mut c.pairs {
            p.base_rate = 0.0;
        }
        assert!(generate_city(&c).unwrap().0.is_empty());
    }

    #[test]
    fn constant_rate_poisson_total() {
        // 100 hours at rate 5: mean 500, sd sqrt(500) ~ 22.4.
        let mut c = one_pair(5.0);
        c.duration_days = 5;
        let (trips, _) = generate_city(&c).unwrap();
        let hours_100: usize = trips
            .iter()
            .filter(|t| t.timestamp < c.start + TimeDelta::hours(100))
            .count();
        assert!((hours_100 as f64 - 500.0).abs() <= 4.0 * 500f64.sqrt(), "{hours_100}");
    }

    #[test]
    fn deterministic_per_seed() {
        let c = CityConfig::synthetic(4, 3, 300.0, 9);
        let (a, wa) = generate_city(&c).unwrap();
        let (b, wb) = generate_city(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(wa, wb);
        let mut c2 = c.clone();
        c2.seed = 10;
        assert_ne!(generate_city(&c2).unwrap().0, a);
    }

    #[test]
    fn weather_stays_in_bounds() {
        let c = CityConfig::synthetic(1, 45, 10.0, 2);
        let w = generate_weather(&c);
        for row in w.values.outer_iter() {
            for (v, walk) in row.iter().zip(&c.weather_walks) {
                assert!(*v >= walk.low && *v <= walk.high);
            }
        }
    }

    #[test]
    fn rejects_invalid_config() {
        let mut c = one_pair(1.0);
        c.pairs[0].origin_spread_m = 0.0;
        assert!(generate_city(&c).is_err());
        let mut c = one_pair(-1.0);
        assert!(generate_city(&c).is_err());
        c.pairs[0].base_rate = 1.0;
        c.daily_amplitude = 1.5;
        assert!(generate_city(&c).is_err());
    }
    #[test]
    fn bump_mean_matches_quadrature() {
        assert_eq!(bump_mean(0.0), 1.0);
        for k in [0.5, 3.0, 6.0] {
            let n = 20_000;
            let q: f64 = (0..n)
                .map(|i| (k * ((std::f64::consts::TAU * (i as f64 + 0.5) / n as f64).cos() - 1.0)).exp())
                .sum::<f64>()
                / n as f64;
            assert!((bump_mean(k) - q).abs() < 1e-12, "{k}");
        }
    }

    #[test]
    fn daily_factor_averages_to_one() {
        let c = CityConfig::synthetic(3, 45, 1000.0, 4);
        for p in &c.pairs {
            let n = 24_000;
            let mean: f64 = (0..n).map(|i| c.daily_factor(p, 24.0 * (i as f64 + 0.5) / n as f64)).sum::<f64>() / n as f64;
            assert!((mean - 1.0).abs() < 1e-9, "{mean}");
            assert!((0..24).all(|h| c.daily_factor(p, h as f64) > 0.0));
        }
    }

    #[test]
    fn synthetic_total_is_calibrated() {
        let c = CityConfig::synthetic(5, 45, 20_000.0, 8);
        assert!((c.expected_total() - 20_000.0).abs() < 1e-6);
        let n = generate_city(&c).unwrap().0.len() as f64;
        assert!((n - 20_000.0).abs() < 4.0 * 20_000f64.sqrt(), "{n}");
    }

    #[test]
    fn seasonality_recoverable() {
        let mut c = CityConfig::synthetic(1, 38, 0.0, 5);
        c.pairs[0].base_rate = 20.0;
        c.holidays.clear();
        let (trips, _) = generate_city(&c).unwrap();
        let mut empirical = [0.0; 24];
        for t in &trips {
            empirical[t.timestamp.hour() as usize] += 1.0;
        }
        let configured: Vec<f64> = (0..24).map(|h| c.daily_factor(&c.pairs[0], h as f64 + 0.5)).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (me, mc) = (mean(&empirical), mean(&configured));
        let cov: f64 = empirical.iter().zip(&configured).map(|(a, b)| (a - me) * (b - mc)).sum();
        let ve: f64 = empirical.iter().map(|a| (a - me).powi(2)).sum();
        let vc: f64 = configured.iter().map(|b| (b - mc).powi(2)).sum();
        let r = cov / (ve * vc).sqrt();
        assert!(r > 0.9, "{r}");
    }
}
