//! Per-channel normalization.
//!
//! Weather channels are z-scored. Air-quality channels first go through the
//! scaled log transform
//!
//! ```text
//! y = (ln(max(x, 1e-4)) - ln(1e-4)) / ln(1e-4)
//! ```
//!
//! and are then z-scored in log space. Concentrations are expressed in their
//! reporting unit (µg m-3 for mass concentrations) before the log, so the
//! `1e-4` floor sits below the physical range instead of above it.
//! Statistics come from the training split only.

use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::align::catalog::{display_unit, Channel};
use crate::dataset::ChannelStack;
use crate::error::{Error, Result};

/// Floor of the scaled log transform.
pub const LOG_FLOOR: f64 = 1e-4;

fn log_floor() -> f64 {
    LOG_FLOOR.ln()
}

/// Scaled log transform. Values at or below the floor map to 0; larger
/// values map to increasingly negative numbers (the denominator is negative).
pub fn scaled_log(x: f64) -> Result<f64> {
    if x.is_nan() {
        return Err(Error::NonFinite("scaled_log of NaN".into()));
    }
    let l = log_floor();
    Ok((x.max(LOG_FLOOR).ln() - l) / l)
}

/// Inverse of [`scaled_log`] for inputs at or above the floor.
pub fn inverse_scaled_log(y: f64) -> f64 {
    let l = log_floor();
    (l * (y + 1.0)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Zscore,
    LogThenZscore,
    /// Log transform without the z-score step.
    LogOnly,
}

/// How air-quality channels are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AqTransform {
    #[default]
    LogThenZscore,
    LogOnly,
}

impl std::str::FromStr for AqTransform {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log_then_zscore" => Ok(Self::LogThenZscore),
            "log_only" => Ok(Self::LogOnly),
            _ => Err(Error::Usage(format!("unknown aq transform `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub channel: String,
    pub kind: TransformKind,
    pub mean: f64,
    pub std: f64,
    /// Multiplier taking stored values into the unit the log is applied in.
    pub log_unit_scale: f64,
}

impl ChannelStats {
    pub fn apply(&self, x: f64) -> Result<f64> {
        let y = match self.kind {
            TransformKind::Zscore => x,
            TransformKind::LogThenZscore | TransformKind::LogOnly => scaled_log(x * self.log_unit_scale)?,
        };
        Ok((y - self.mean) / self.std)
    }

    pub fn invert(&self, z: f64) -> f64 {
        let y = z * self.std + self.mean;
        match self.kind {
            TransformKind::Zscore => y,
            TransformKind::LogThenZscore | TransformKind::LogOnly => inverse_scaled_log(y) / self.log_unit_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub floor: f64,
    pub channels: Vec<ChannelStats>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let (sum, n) = values.clone().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt(), n)
}

impl NormStats {
    /// Fits statistics on the time indices `train` of `stack`.
    pub fn fit(stack: &ChannelStack, train: &[usize], aq: AqTransform) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptySelection("training split is empty".into()));
        }
        let channels = stack
            .channels
            .iter()
            .enumerate()
            .map(|(c, chan)| fit_channel(stack, train, c, chan, aq))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { floor: LOG_FLOOR, channels })
    }

    pub fn get(&self, channel: &str) -> Option<&ChannelStats> {
        self.channels.iter().find(|c| c.channel == channel)
    }

    fn check_channels(&self, frame: &Array3<f64>) -> Result<()> {
        if frame.dim().0 != self.channels.len() {
            return Err(Error::Shape(format!(
                "frame has {} channels, stats cover {}",
                frame.dim().0,
                self.channels.len()
            )));
        }
        Ok(())
    }

    /// Raw `[C, H, W]` frame to model space.
    pub fn apply(&self, frame: &Array3<f64>) -> Result<Array3<f64>> {
        self.check_channels(frame)?;
        let mut out = frame.clone();
        for (c, stats) in self.channels.iter().enumerate() {
            for v in out.index_axis_mut(ndarray::Axis(0), c).iter_mut() {
                *v = stats.apply(*v)?;
            }
        }
        Ok(out)
    }

    /// Model-space `[C, H, W]` frame back to raw units.
    pub fn invert(&self, frame: &Array3<f64>) -> Result<Array3<f64>> {
        self.check_channels(frame)?;
        let mut out = frame.clone();
        for (c, stats) in self.channels.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), c).mapv_inplace(|z| stats.invert(z));
        }
        Ok(out)
    }

    /// Subset of the statistics, in the given channel order.
    pub fn select(&self, names: &[String]) -> Result<Self> {
        let channels = names
            .iter()
            .map(|n| {
                self.get(n)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("no normalization statistics for `{n}`")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { floor: self.floor, channels })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

fn fit_channel(stack: &ChannelStack, train: &[usize], c: usize, chan: &Channel, aq: AqTransform) -> Result<ChannelStats> {
    let raw = || train.iter().flat_map(move |&t| stack.plane(t, c).iter().map(|&v| v as f64));
    if let Some(bad) = raw().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("channel `{}` contains {bad}", chan.name())));
    }
    let (kind, scale) = if chan.is_air_quality() {
        let kind = match aq {
            AqTransform::LogThenZscore => TransformKind::LogThenZscore,
            AqTransform::LogOnly => TransformKind::LogOnly,
        };
        (kind, display_unit(&chan.units).0)
    } else {
        (TransformKind::Zscore, 1.0)
    };
    let (mean, std) = match kind {
        TransformKind::Zscore => {
            let (m, s, _) = mean_std(raw());
            (m, s)
        }
        TransformKind::LogThenZscore => {
            let logs = raw().map(|v| scaled_log(v * scale).expect("finite"));
            let (m, s, _) = mean_std(logs);
            (m, s)
        }
        TransformKind::LogOnly => {
            let logs = raw().map(|v| scaled_log(v * scale).expect("finite"));
            let (_, s, _) = mean_std(logs);
            if !(s > 0.0) {
                return Err(Error::DegenerateChannel(chan.name()));
            }
            (0.0, 1.0)
        }
    };
    if !(std > 0.0) {
        return Err(Error::DegenerateChannel(chan.name()));
    }
    Ok(ChannelStats { channel: chan.name(), kind, mean, std, log_unit_scale: scale })
}
