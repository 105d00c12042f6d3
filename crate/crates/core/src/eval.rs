//! Forecast scoring: persistence, trained models and external products.
//!
//! Scores are per-channel RMSEs in display units, computed per sample and
//! then averaged over samples. Both the latitude-weighted and the plain RMSE
//! are reported, together with the RMSE restricted to the top decile of the
//! target distribution.

use std::io::Write;
use std::path::Path;

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::catalog::display_unit;
use crate::align::samples::YearRange;
use crate::dataset::ChannelStack;
use crate::error::{Error, Result};
use crate::grid::{latitude_weights, BoundingBox};
use crate::histo::quantile_sorted;
use crate::model::Model;
use crate::time::Timestamp;
use crate::train::{format_mean_std, mean_std, train_loop, TrainConfig, TrainData};
use crate::transform::NormStats;

/// Quantile defining "extreme" targets.
pub const EXTREME_QUANTILE: f64 = 0.9;

pub trait Forecaster: Sync {
    fn name(&self) -> String;

    /// Raw-unit forecast of every channel of `stack`, issued at time index
    /// `input` for `lead_time_hours` later.
    fn forecast(&self, stack: &ChannelStack, input: usize, lead_time_hours: u32) -> Result<Array3<f64>>;

    /// Raster shape the forecaster is restricted to, if any.
    fn input_shape(&self) -> Option<(usize, usize)> {
        None
    }
}

/// The future equals the present.
pub fn persistence_forecast(input_state: &Array3<f64>) -> Array3<f64> {
    input_state.clone()
}

pub struct Persistence;

impl Forecaster for Persistence {
    fn name(&self) -> String {
        "persistence".into()
    }

    fn forecast(&self, stack: &ChannelStack, input: usize, _lead: u32) -> Result<Array3<f64>> {
        Ok(persistence_forecast(&stack.frame(input)))
    }
}

/// A trained model with the statistics it was trained with.
pub struct ModelForecaster {
    pub model: Model,
    pub norm: NormStats,
    pub channels: Vec<String>,
}

impl ModelForecaster {
    pub fn new(model: Model, norm: &NormStats, channels: Vec<String>) -> Result<Self> {
        let cfg = model.config();
        if channels.len() != cfg.n_vars() {
            return Err(Error::Shape(format!(
                "{} channel names for a model with {} inputs",
                channels.len(),
                cfg.n_vars()
            )));
        }
        let norm = norm.select(&channels)?;
        Ok(Self { model, norm, channels })
    }
}

impl Forecaster for ModelForecaster {
    fn name(&self) -> String {
        "model".into()
    }

    fn forecast(&self, stack: &ChannelStack, input: usize, lead: u32) -> Result<Array3<f64>> {
        if stack.channel_names() != self.channels {
            return Err(Error::Shape("stack channels differ from the checkpoint channels".into()));
        }
        let x = self.norm.apply(&stack.frame(input))?;
        let f = self.model.predict(&x, lead)?;
        self.norm.invert(&f.stacked())
    }

    fn input_shape(&self) -> Option<(usize, usize)> {
        let c = self.model.config();
        Some((c.height, c.width))
    }
}

/// Precomputed forecasts: the value stored at `t` is the forecast issued at
/// `t` for `t + lead_time_hours`.
pub struct ExternalForecaster {
    pub stack: ChannelStack,
    pub lead_time_hours: u32,
    pub label: String,
}

impl Forecaster for ExternalForecaster {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn forecast(&self, stack: &ChannelStack, input: usize, lead: u32) -> Result<Array3<f64>> {
        if lead != self.lead_time_hours {
            return Err(Error::Usage(format!(
                "external forecast has lead {} h, requested {lead} h",
                self.lead_time_hours
            )));
        }
        if self.stack.grid != stack.grid {
            return Err(Error::Shape("external forecast grid differs from the evaluation grid".into()));
        }
        let t = stack.timestamps[input];
        let k = self
            .stack
            .time_index(t)
            .ok_or_else(|| Error::Data(format!("external forecast has no issue time {}", t.to_iso())))?;
        let own = self.stack.frame(k);
        let (h, w) = stack.grid.shape();
        let mut out = Array3::zeros((stack.n_channels(), h, w));
        for (c, name) in stack.channel_names().iter().enumerate() {
            let src = self
                .stack
                .channel_index(name)
                .ok_or_else(|| Error::Data(format!("external forecast lacks channel `{name}`")))?;
            out.index_axis_mut(ndarray::Axis(0), c).assign(&own.index_axis(ndarray::Axis(0), src));
        }
        Ok(out)
    }
}

/// Prediction minus truth.
pub fn error_map(forecast: &Array3<f64>, truth: &Array3<f64>) -> Result<Array3<f64>> {
    if forecast.dim() != truth.dim() {
        return Err(Error::Shape(format!("forecast {:?} vs truth {:?}", forecast.dim(), truth.dim())));
    }
    Ok(forecast - truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub leads: Vec<u32>,
    pub years: YearRange,
    /// Only inputs at 00 UTC.
    pub midnight_only: bool,
    /// Channels to report; `None` reports all.
    pub channels: Option<Vec<String>>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            leads: vec![6, 12, 24, 48],
            years: YearRange::new(2017, 2018),
            midnight_only: false,
            channels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScore {
    pub channel: String,
    pub units: String,
    pub rmse_lat_weighted: f64,
    pub rmse: f64,
    /// RMSE over pixels whose target is at or above the channel's
    /// top-decile threshold for this lead.
    pub extreme_rmse: f64,
    pub extreme_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadReport {
    pub lead_time_hours: u32,
    pub n_samples: usize,
    pub channels: Vec<ChannelScore>,
}

impl LeadReport {
    pub fn channel(&self, name: &str) -> Option<&ChannelScore> {
        self.channels.iter().find(|c| c.channel == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub forecaster: String,
    pub region: Option<String>,
    pub years: String,
    pub midnight_only: bool,
    pub leads: Vec<LeadReport>,
}

impl EvalReport {
    pub fn lead(&self, hours: u32) -> Option<&LeadReport> {
        self.leads.iter().find(|l| l.lead_time_hours == hours)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("forecaster,region,lead_time_hours,channel,units,n_samples,rmse_lat_weighted,rmse,extreme_rmse\n");
        for l in &self.leads {
            for c in &l.channels {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    self.forecaster,
                    self.region.as_deref().unwrap_or(""),
                    l.lead_time_hours,
                    c.channel,
                    c.units,
                    l.n_samples,
                    c.rmse_lat_weighted,
                    c.rmse,
                    c.extreme_rmse
                ));
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// `(input, target)` index pairs for one lead.
pub fn eval_pairs(stack: &ChannelStack, lead: u32, opts: &EvalOptions) -> Vec<(usize, usize)> {
    stack
        .timestamps
        .iter()
        .enumerate()
        .filter(|(_, t)| opts.years.contains(**t) && (!opts.midnight_only || t.hour_of_day() == 0))
        .filter_map(|(i, t)| {
            let target: Timestamp = t.add_hours(lead as i64);
            if !opts.years.contains(target) {
                return None;
            }
            stack.time_index(target).map(|j| (i, j))
        })
        .collect()
}

struct SampleScore {
    lat_sq: Vec<f64>,
    plain_sq: Vec<f64>,
    extreme_sq: Vec<f64>,
    extreme_n: Vec<usize>,
}

pub fn evaluate(f: &dyn Forecaster, stack: &ChannelStack, opts: &EvalOptions) -> Result<EvalReport> {
    if let Some(shape) = f.input_shape() {
        if shape != stack.grid.shape() {
            return Err(Error::Shape(format!(
                "forecaster expects {shape:?} rasters, region is {:?}",
                stack.grid.shape()
            )));
        }
    }
    let names = stack.channel_names();
    let selected: Vec<usize> = match &opts.channels {
        None => (0..names.len()).collect(),
        Some(want) => want
            .iter()
            .map(|n| stack.channel_index(n).ok_or_else(|| Error::Usage(format!("channel `{n}` not in dataset"))))
            .collect::<Result<_>>()?,
    };
    let lat = latitude_weights(&stack.grid)?;
    let (h, w) = stack.grid.shape();
    let pixels = (h * w) as f64;
    let scales: Vec<f64> = stack.channels.iter().map(|c| display_unit(&c.units).0).collect();

    let mut leads = Vec::with_capacity(opts.leads.len());
    for &lead in &opts.leads {
        let pairs = eval_pairs(stack, lead, opts);
        if pairs.is_empty() {
            return Err(Error::Data(format!(
                "lead {lead} h has no input/target pairs within {} in the dataset",
                opts.years
            )));
        }
        let thresholds: Vec<f64> = selected
            .iter()
            .map(|&c| {
                let mut v: Vec<f64> = pairs
                    .iter()
                    .flat_map(|&(_, j)| stack.plane(j, c).iter().map(|&x| x as f64))
                    .collect();
                v.sort_by(f64::total_cmp);
                quantile_sorted(&v, EXTREME_QUANTILE)
            })
            .collect();
        let per: Vec<Result<SampleScore>> = pairs
            .par_iter()
            .map(|&(i, j)| {
                let pred = f.forecast(stack, i, lead)?;
                if pred.dim() != (names.len(), h, w) {
                    return Err(Error::Shape(format!("forecast shape {:?}", pred.dim())));
                }
                let mut s = SampleScore {
                    lat_sq: vec![0.0; selected.len()],
                    plain_sq: vec![0.0; selected.len()],
                    extreme_sq: vec![0.0; selected.len()],
                    extreme_n: vec![0; selected.len()],
                };
                for (k, &c) in selected.iter().enumerate() {
                    let truth = stack.plane(j, c);
                    for y in 0..h {
                        for x in 0..w {
                            let t = truth[y * w + x] as f64;
                            let e = (pred[[c, y, x]] - t) * scales[c];
                            s.lat_sq[k] += lat[y] * e * e;
                            s.plain_sq[k] += e * e;
                            if t >= thresholds[k] {
                                s.extreme_sq[k] += e * e;
                                s.extreme_n[k] += 1;
                            }
                        }
                    }
                }
                Ok(s)
            })
            .collect();
        let mut lat_acc = vec![0.0; selected.len()];
        let mut plain_acc = vec![0.0; selected.len()];
        let mut ext_sq = vec![0.0; selected.len()];
        let mut ext_n = vec![0usize; selected.len()];
        for s in per {
            let s = s?;
            for k in 0..selected.len() {
                lat_acc[k] += (s.lat_sq[k] / pixels).sqrt();
                plain_acc[k] += (s.plain_sq[k] / pixels).sqrt();
                ext_sq[k] += s.extreme_sq[k];
                ext_n[k] += s.extreme_n[k];
            }
        }
        let n = pairs.len() as f64;
        let channels = selected
            .iter()
            .enumerate()
            .map(|(k, &c)| ChannelScore {
                channel: names[c].clone(),
                units: display_unit(&stack.channels[c].units).1,
                rmse_lat_weighted: lat_acc[k] / n,
                rmse: plain_acc[k] / n,
                extreme_rmse: if ext_n[k] > 0 { (ext_sq[k] / ext_n[k] as f64).sqrt() } else { f64::NAN },
                extreme_threshold: thresholds[k] * scales[c],
            })
            .collect();
        leads.push(LeadReport {
            lead_time_hours: lead,
            n_samples: pairs.len(),
            channels,
        });
    }
    Ok(EvalReport {
        forecaster: f.name(),
        region: None,
        years: opts.years.to_string(),
        midnight_only: opts.midnight_only,
        leads,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub region: String,
    pub report: EvalReport,
}

/// Evaluates `f` on each named crop of `stack`.
pub fn region_sweep(f: &dyn Forecaster, stack: &ChannelStack, regions: &[(&str, BoundingBox)], opts: &EvalOptions) -> Result<Vec<RegionReport>> {
    regions
        .iter()
        .map(|(name, bbox)| {
            let crop = stack.crop(bbox)?;
            let mut report = evaluate(f, &crop, opts)?;
            report.region = Some(name.to_string());
            Ok(RegionReport {
                region: name.to_string(),
                report,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seeds: Vec<u64>,
    pub lead_time_hours: u32,
    pub channels: Vec<String>,
    /// `[seed][channel]` latitude-weighted RMSE.
    pub per_seed: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl SeedReport {
    /// One row per channel: `channel,mean,std,summary` with `summary` like `9.00 (0.11)`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("channel,mean,std,summary\n");
        for (k, c) in self.channels.iter().enumerate() {
            out.push_str(&format!(
                "{c},{},{},{}\n",
                self.mean[k],
                self.std[k],
                format_mean_std(self.mean[k], self.std[k])
            ));
        }
        out
    }
}

/// Trains `n` models with seeds `cfg.seed .. cfg.seed + n` and scores each
/// best checkpoint on `opts` at the first lead in `opts.leads`.
pub fn run_seeds(data: &TrainData, cfg: &TrainConfig, n: usize, opts: &EvalOptions) -> Result<SeedReport> {
    if n == 0 {
        return Err(Error::Usage("need at least one seed".into()));
    }
    let lead = *opts.leads.first().ok_or_else(|| Error::Usage("no evaluation lead".into()))?;
    let one_lead = EvalOptions { leads: vec![lead], ..opts.clone() };
    let mut seeds = Vec::with_capacity(n);
    let mut per_seed = Vec::with_capacity(n);
    let mut channels = Vec::new();
    for k in 0..n as u64 {
        let seed = cfg.seed + k;
        let run = train_loop(data, &TrainConfig { seed, ..cfg.clone() }, None)?;
        let fc = ModelForecaster::new(run.best, &data.norm, data.stack.channel_names())?;
        let report = evaluate(&fc, &data.stack, &one_lead)?;
        let l = &report.leads[0];
        channels = l.channels.iter().map(|c| c.channel.clone()).collect();
        per_seed.push(l.channels.iter().map(|c| c.rmse_lat_weighted).collect::<Vec<_>>());
        seeds.push(seed);
    }
    let (mean, std) = (0..channels.len())
        .map(|k| mean_std(&per_seed.iter().map(|r| r[k]).collect::<Vec<_>>()))
        .unzip();
    Ok(SeedReport {
        seeds,
        lead_time_hours: lead,
        channels,
        per_seed,
        mean,
        std,
    })
}
