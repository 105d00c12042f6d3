//! Freedman–Diaconis histograms of training values and the per-bin
//! frequency weights `(1 - β) / (1 - β^count)` (0 for empty bins).
//!
//! Quantiles use linear interpolation between order statistics, so the
//! interquartile range of `{1, ..., 8}` is 3.5. Bins are built on raw
//! (untransformed) values.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::ChannelStack;
use crate::error::{Error, Result};

/// Frequency-weight strength used when none is configured.
pub const DEFAULT_BETA: f64 = 0.8;

const MAX_BINS: usize = 20_000_000;

/// Quantile `q` of sorted data, linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BinWidth {
    Width(f64),
    /// Interquartile range is zero: use one bin over the whole range.
    SingleBin,
}

fn finite_sorted(values: &[f64]) -> Result<Vec<f64>> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return Err(Error::NonFinite("no finite values to bin".into()));
    }
    v.sort_by(f64::total_cmp);
    Ok(v)
}

fn width_of_sorted(sorted: &[f64]) -> Result<BinWidth> {
    if sorted.len() < 2 {
        return Err(Error::Data(format!("need at least 2 values to bin, got {}", sorted.len())));
    }
    let iqr = quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25);
    if iqr <= 0.0 {
        return Ok(BinWidth::SingleBin);
    }
    Ok(BinWidth::Width(2.0 * iqr * (sorted.len() as f64).powf(-1.0 / 3.0)))
}

/// `2 · IQR · n^(-1/3)` over the finite values.
pub fn fd_bin_width(values: &[f64]) -> Result<BinWidth> {
    width_of_sorted(&finite_sorted(values)?)
}

/// Weight of a bin holding `count` training values.
pub fn bin_weight(count: u64, beta: f64) -> f64 {
    match count {
        0 => 0.0,
        1 => 1.0,
        n => (1.0 - beta) / -((n as f64) * (beta - 1.0).ln_1p()).exp_m1(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub channel: String,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub beta: f64,
    pub weights: Vec<f64>,
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Usage(format!("beta must lie in [0, 1), got {beta}")));
    }
    Ok(())
}

impl FrequencyTable {
    pub fn build(channel: impl Into<String>, values: &[f64], beta: f64) -> Result<Self> {
        check_beta(beta)?;
        let sorted = finite_sorted(values)?;
        let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
        let edges = match width_of_sorted(&sorted)? {
            BinWidth::SingleBin => {
                let eps = f64::EPSILON * max.abs().max(1.0);
                vec![min, max + eps]
            }
            BinWidth::Width(w) => {
                let n_bins = (((max - min) / w).ceil() as usize).max(1);
                if n_bins > MAX_BINS {
                    return Err(Error::Data(format!("{n_bins} bins exceeds the limit of {MAX_BINS}")));
                }
                let mut edges: Vec<f64> = (0..n_bins).map(|k| min + k as f64 * w).collect();
                edges.retain(|&e| e < max);
                edges.push(max);
                edges
            }
        };
        let mut table = Self {
            channel: channel.into(),
            counts: vec![0; edges.len() - 1],
            bin_edges: edges,
            beta,
            weights: Vec::new(),
        };
        for &v in &sorted {
            let b = table.bin_index(v);
            table.counts[b] += 1;
        }
        table.weights = table.counts.iter().map(|&c| bin_weight(c, beta)).collect();
        Ok(table)
    }

    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    /// Bin holding `v`; values outside the edges clamp to the first/last bin.
    pub fn bin_index(&self, v: f64) -> usize {
        let above = self.bin_edges.partition_point(|&e| e <= v);
        above.saturating_sub(1).min(self.n_bins() - 1)
    }

    pub fn weight(&self, v: f64) -> Result<f64> {
        if v.is_nan() {
            return Err(Error::NonFinite(format!("frequency weight of NaN ({})", self.channel)));
        }
        Ok(self.weights[self.bin_index(v)])
    }

    /// Same bins, weights recomputed for another `beta`.
    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        let mut t = self.clone();
        t.beta = beta;
        t.weights = t.counts.iter().map(|&c| bin_weight(c, beta)).collect();
        Ok(t)
    }

    /// `bin_lo,bin_hi,count,count_clipped,weight`; `clip` caps the displayed count.
    pub fn write_csv(&self, out: &mut impl Write, clip: Option<u64>) -> std::io::Result<()> {
        writeln!(out, "bin_lo,bin_hi,count,count_clipped,weight")?;
        for (i, &c) in self.counts.iter().enumerate() {
            let shown = clip.map_or(c, |k| c.min(k));
            writeln!(
                out,
                "{:e},{:e},{c},{shown},{:e}",
                self.bin_edges[i],
                self.bin_edges[i + 1],
                self.weights[i]
            )?;
        }
        Ok(())
    }

    pub fn max_count(&self) -> u64 {
        self.counts.iter().copied().max().unwrap_or(0)
    }
}

/// Free-function form of [`FrequencyTable::build`].
pub fn build_frequency_table(channel: &str, values: &[f64], beta: f64) -> Result<FrequencyTable> {
    FrequencyTable::build(channel, values, beta)
}

pub fn frequency_weight(value: f64, table: &FrequencyTable) -> Result<f64> {
    table.weight(value)
}

/// One table per air-quality channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTables {
    pub tables: Vec<FrequencyTable>,
}

impl FrequencyTables {
    /// Tables for every air-quality channel of `stack`, from all pixel-hours
    /// at the time indices `train`.
    pub fn fit(stack: &ChannelStack, train: &[usize], beta: f64) -> Result<Self> {
        check_beta(beta)?;
        let tables = stack
            .channels
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_air_quality())
            .map(|(c, chan)| {
                let values: Vec<f64> = train
                    .iter()
                    .flat_map(|&t| stack.plane(t, c).iter().map(|&v| v as f64))
                    .collect();
                FrequencyTable::build(chan.name(), &values, beta)
            })
            .collect::<Result<_>>()?;
        Ok(Self { tables })
    }

    pub fn get(&self, channel: &str) -> Option<&FrequencyTable> {
        self.tables.iter().find(|t| t.channel == channel)
    }

    pub fn require(&self, channel: &str) -> Result<&FrequencyTable> {
        self.get(channel).ok_or_else(|| Error::MissingTable(channel.into()))
    }

    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        Ok(Self { tables: self.tables.iter().map(|t| t.with_beta(beta)).collect::<Result<_>>()? })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}
