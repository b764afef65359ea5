//! Origin-destination travel demand forecasting.
//!
//! Trips are grouped into travel flows by K-means in four-dimensional
//! origin-destination space, the per-window flow counts are compressed with
//! beta-divergence NMF, and a stacked recurrent network with a linear head
//! forecasts the next window's coefficient vector.

pub mod baselines;
pub mod cluster;
pub mod error;
pub mod experiment;
pub mod features;
pub mod geo;
pub mod io;
pub mod kmeans;
pub mod metrics;
pub mod nmf;
pub mod nn;
pub mod pipeline;
pub mod series;
pub mod synth;

pub use error::{Error, Result};
