//! Multi-variable air-pollution forecasting at desk scale.
//!
//! The pipeline aligns weather and air-quality reanalysis fields on a common
//! lat/lon grid and hourly axis, normalizes them, and trains a small vision
//! transformer with separate weather and air-quality output heads. Rare,
//! high-concentration pollutant values are emphasised through a
//! frequency-weighted MAE objective built from Freedman–Diaconis histograms
//! of the training data.

pub mod align;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod grid;
pub mod histo;
pub mod loss;
pub mod model;
pub mod synth;
pub mod time;
pub mod train;
pub mod transform;

pub use error::{Error, Result};
