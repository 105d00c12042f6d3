//! Training with randomized lead times, AdamW and early stopping.

pub mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::catalog::{Channel, Family};
use crate::align::samples::{split_by_years, Split, SplitConfig, Splits, SampleRef};
use crate::dataset::ChannelStack;
use crate::error::{Error, Result};
use crate::grid::latitude_weights;
use crate::histo::FrequencyTables;
use crate::loss::{fmae_loss, fmae_loss_grad, freq_weights, LossInputs, LossMode, Normalization};
use crate::model::checkpoint::{write_checkpoint, CheckpointHeader};
use crate::model::{Activation, Gradients, Model, ModelConfig};
use crate::time::Timestamp;
use crate::transform::{AqTransform, NormStats};
pub use optim::{optimizer_step, AdamState, AdamWConfig};

/// Architecture settings that do not depend on the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHyper {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub lead_embed_dim: usize,
}

impl Default for ModelHyper {
    fn default() -> Self {
        Self {
            patch_size: 2,
            embed_dim: 32,
            depth: 2,
            num_heads: 4,
            mlp_ratio: 2,
            lead_embed_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lead_time_pool: Vec<u32>,
    pub beta: f64,
    pub seed: u64,
    pub loss: LossMode,
    pub normalization: Normalization,
    pub optimizer: AdamWConfig,
    pub cosine_decay: bool,
    pub val_lead_hours: u32,
    /// Draw validation lead times from the pool instead of the fixed lead.
    pub randomize_val_lead: bool,
    pub aq_transform: AqTransform,
    pub splits: SplitConfig,
    /// Only anchors whose hour count is a multiple of this are used.
    pub anchor_stride_hours: u32,
    pub max_steps_per_epoch: Option<usize>,
    /// Off keeps the history file byte-reproducible (wall_time written as 0).
    pub record_wall_time: bool,
    /// Skips parameter updates; used to exercise early stopping.
    pub freeze: bool,
    pub model: ModelHyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 32,
            max_epochs: 100,
            patience: 5,
            lead_time_pool: vec![6, 12, 24],
            beta: crate::histo::DEFAULT_BETA,
            seed: 42,
            loss: LossMode::Fmae,
            normalization: Normalization::WeightedMean,
            optimizer: AdamWConfig::default(),
            cosine_decay: false,
            val_lead_hours: 24,
            randomize_val_lead: false,
            aq_transform: AqTransform::LogThenZscore,
            splits: SplitConfig::default(),
            anchor_stride_hours: 1,
            max_steps_per_epoch: None,
            record_wall_time: false,
            freeze: false,
            model: ModelHyper::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Usage(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.lead_time_pool.is_empty() || self.lead_time_pool.contains(&0) {
            return bad("lead_time_pool must be non-empty with positive leads");
        }
        if self.patience < 1 {
            return bad("patience must be at least 1");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.anchor_stride_hours == 0 {
            return bad("batch_size, max_epochs and anchor_stride_hours must be positive");
        }
        if self.val_lead_hours == 0 {
            return bad("val_lead_hours must be positive");
        }
        Ok(())
    }

    pub fn model_config(&self, n_weather: usize, n_aq: usize, height: usize, width: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            patch_size: m.patch_size,
            embed_dim: m.embed_dim,
            depth: m.depth,
            num_heads: m.num_heads,
            mlp_ratio: m.mlp_ratio,
            weather_channels: n_weather,
            aq_channels: n_aq,
            height,
            width,
            lead_embed_dim: m.lead_embed_dim,
            seed: self.seed,
            activation: Activation::GeluTanh,
        }
    }
}

/// Uniform draw from the lead-time pool.
pub fn sample_lead_time(pool: &[u32], rng: &mut impl Rng) -> u32 {
    pool[rng.random_range(0..pool.len())]
}

/// Stable reorder putting weather channels before air-quality channels.
pub fn weather_first(channels: &[Channel]) -> Vec<Channel> {
    let mut out: Vec<Channel> = channels.iter().filter(|c| c.family == Family::Weather).cloned().collect();
    out.extend(channels.iter().filter(|c| c.family == Family::AirQuality).cloned());
    out
}

/// One model-space training example.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub input: Array3<f64>,
    pub target_weather: Array3<f64>,
    pub target_aq: Array3<f64>,
    /// Frequency weights of the raw air-quality target.
    pub freq: Array3<f64>,
    pub lead_time_hours: u32,
    pub timestamp: Timestamp,
}

/// A stack with fitted statistics, ready for sampling.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub stack: ChannelStack,
    pub n_weather: usize,
    pub norm: NormStats,
    pub tables: FrequencyTables,
    pub lat_weights: Vec<f64>,
    pub splits: Splits,
    pub split_cfg: SplitConfig,
}

impl TrainData {
    /// Fits normalization and frequency tables on the training years only.
    pub fn fit(stack: ChannelStack, split_cfg: SplitConfig, aq: AqTransform, beta: f64) -> Result<Self> {
        let stack = reorder(stack)?;
        let splits = split_by_years(&stack.timestamps, &split_cfg);
        if splits.train.is_empty() {
            return Err(Error::EmptySelection(format!("no timestamps in training years {}", split_cfg.train)));
        }
        let norm = NormStats::fit(&stack, &splits.train, aq)?;
        let tables = FrequencyTables::fit(&stack, &splits.train, beta)?;
        Self::with_stats(stack, split_cfg, norm, tables)
    }

    pub fn with_stats(stack: ChannelStack, split_cfg: SplitConfig, norm: NormStats, tables: FrequencyTables) -> Result<Self> {
        let stack = reorder(stack)?;
        let names = stack.channel_names();
        let norm = norm.select(&names)?;
        let n_weather = stack.channels.iter().filter(|c| c.family == Family::Weather).count();
        let lat_weights = latitude_weights(&stack.grid)?;
        let splits = split_by_years(&stack.timestamps, &split_cfg);
        Ok(Self {
            stack,
            n_weather,
            norm,
            tables,
            lat_weights,
            splits,
            split_cfg,
        })
    }

    pub fn n_aq(&self) -> usize {
        self.stack.n_channels() - self.n_weather
    }

    pub fn aq_names(&self) -> Vec<String> {
        self.stack.channel_names()[self.n_weather..].to_vec()
    }

    /// Time indices of `split` from which every lead in `leads` reaches a
    /// target inside the same split.
    pub fn anchors(&self, split: Split, leads: &[u32], stride_hours: u32) -> Vec<usize> {
        let years = self.split_cfg.range(split);
        self.splits
            .get(split)
            .iter()
            .copied()
            .filter(|&i| self.stack.timestamps[i].0.rem_euclid(stride_hours as i64) == 0)
            .filter(|&i| {
                leads.iter().all(|&l| {
                    let t = self.stack.timestamps[i].add_hours(l as i64);
                    years.contains(t) && self.stack.time_index(t).is_some()
                })
            })
            .collect()
    }

    pub fn sample_ref(&self, anchor: usize, lead: u32) -> Result<SampleRef> {
        let t = self.stack.timestamps[anchor];
        let target = self
            .stack
            .time_index(t.add_hours(lead as i64))
            .ok_or_else(|| Error::Data(format!("no target for {} + {lead} h", t.to_iso())))?;
        Ok(SampleRef {
            input: anchor,
            target,
            lead_time_hours: lead,
            timestamp: t,
        })
    }

    pub fn prepare(&self, r: &SampleRef, mode: LossMode) -> Result<PreparedSample> {
        let input = self.norm.apply(&self.stack.frame(r.input))?;
        let raw_target = self.stack.frame(r.target);
        let target = self.norm.apply(&raw_target)?;
        let nw = self.n_weather;
        let raw_aq = raw_target.slice(s![nw.., .., ..]).to_owned();
        let freq = match mode {
            LossMode::Fmae => freq_weights(&self.tables, &self.aq_names(), &raw_aq)?,
            LossMode::Mae => Array3::ones(raw_aq.dim()),
        };
        Ok(PreparedSample {
            input,
            target_weather: target.slice(s![..nw, .., ..]).to_owned(),
            target_aq: target.slice(s![nw.., .., ..]).to_owned(),
            freq,
            lead_time_hours: r.lead_time_hours,
            timestamp: r.timestamp,
        })
    }
}

fn reorder(stack: ChannelStack) -> Result<ChannelStack> {
    let ordered = weather_first(&stack.channels);
    if ordered == stack.channels {
        return Ok(stack);
    }
    let idx: Vec<usize> = ordered.iter().map(|c| stack.channels.iter().position(|d| d == c).expect("same set")).collect();
    let n = stack.grid.height() * stack.grid.width();
    let mut data = Vec::with_capacity(stack.data.len());
    for t in 0..stack.timestamps.len() {
        for &c in &idx {
            data.extend_from_slice(stack.plane(t, c));
        }
    }
    debug_assert_eq!(data.len(), stack.timestamps.len() * idx.len() * n);
    ChannelStack::new(stack.grid.clone(), stack.timestamps.clone(), ordered, data)
}

fn inputs<'a>(f: &'a crate::model::Forecast, s: &'a PreparedSample, lat: &'a [f64]) -> LossInputs<'a> {
    LossInputs {
        pred_weather: &f.weather,
        pred_aq: &f.aq,
        target_weather: &s.target_weather,
        target_aq: &s.target_aq,
        lat_weights: lat,
        freq_weights: &s.freq,
    }
}

/// Mean loss over `batch` and its gradient. Samples run in parallel; the
/// reduction is sequential in batch order, so results do not depend on the
/// thread count.
pub fn batch_loss_and_grad(model: &Model, batch: &[PreparedSample], lat: &[f64], norm: Normalization) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::EmptySelection("empty batch".into()));
    }
    let per: Vec<Result<(f64, Gradients)>> = batch
        .par_iter()
        .map(|s| {
            let (f, tape) = model.forward_tape(&s.input, s.lead_time_hours)?;
            let (b, g) = fmae_loss_grad(&inputs(&f, s, lat), norm)?;
            if !b.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss for sample {} lead {} h",
                    s.timestamp.to_iso(),
                    s.lead_time_hours
                )));
            }
            Ok((b.total, model.backward_tape(&tape, &g.weather, &g.aq)?))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = Gradients::zeros_like(&model.params);
    for r in per {
        let (l, g) = r?;
        total += l;
        grads.add_assign(&g);
    }
    let scale = 1.0 / batch.len() as f64;
    grads.scale(scale);
    Ok((total * scale, grads))
}

/// Mean loss without gradients.
pub fn mean_loss(model: &Model, samples: &[PreparedSample], lat: &[f64], norm: Normalization) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySelection("no samples to score".into()));
    }
    let per: Vec<Result<f64>> = samples
        .par_iter()
        .map(|s| {
            let f = model.predict(&s.input, s.lead_time_hours)?;
            Ok(fmae_loss(&inputs(&f, s, lat), norm)?.total)
        })
        .collect();
    let mut total = 0.0;
    for r in per {
        total += r?;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_time: f64,
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_loss,lr,wall_time\n");
    for r in history {
        out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.lr, r.wall_time));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Where and how the best checkpoint is written.
#[derive(Debug, Clone)]
pub struct CheckpointSink {
    pub path: PathBuf,
    /// Everything except config, epoch and loss, which the loop fills in.
    pub header: CheckpointHeader,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub best: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub steps: usize,
}

fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    if cfg.cosine_decay && total > 0 {
        0.5 * cfg.learning_rate * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
    } else {
        cfg.learning_rate
    }
}

pub fn train_loop(data: &TrainData, cfg: &TrainConfig, sink: Option<&CheckpointSink>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (h, w) = data.stack.grid.shape();
    let model_cfg = cfg.model_config(data.n_weather, data.n_aq(), h, w);
    let mut model = Model::new(model_cfg.clone())?;
    let mut state = AdamState::new(&model.params);

    let train_anchors = data.anchors(Split::Train, &cfg.lead_time_pool, cfg.anchor_stride_hours);
    if train_anchors.is_empty() {
        return Err(Error::EmptySelection("no training samples for the lead-time pool".into()));
    }
    let val_leads = if cfg.randomize_val_lead { cfg.lead_time_pool.clone() } else { vec![cfg.val_lead_hours] };
    let val_anchors = data.anchors(Split::Val, &val_leads, cfg.anchor_stride_hours);
    if val_anchors.is_empty() {
        return Err(Error::EmptySelection("no validation samples".into()));
    }

    let steps_per_epoch = {
        let n = train_anchors.len().div_ceil(cfg.batch_size);
        cfg.max_steps_per_epoch.map_or(n, |m| n.min(m))
    };
    let total_steps = steps_per_epoch * cfg.max_epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let clock = Instant::now();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut since_best = 0;
    let mut step = 0;

    for epoch in 1..=cfg.max_epochs {
        let mut order = train_anchors.clone();
        order.shuffle(&mut rng);
        let leads: Vec<u32> = order.iter().map(|_| sample_lead_time(&cfg.lead_time_pool, &mut rng)).collect();
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut lr = lr_at(cfg, step, total_steps);
        for (b, (chunk, lchunk)) in order.chunks(cfg.batch_size).zip(leads.chunks(cfg.batch_size)).enumerate() {
            if b >= steps_per_epoch {
                break;
            }
            let batch = chunk
                .par_iter()
                .zip(lchunk)
                .map(|(&a, &l)| data.prepare(&data.sample_ref(a, l)?, cfg.loss))
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = batch_loss_and_grad(&model, &batch, &data.lat_weights, cfg.normalization).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch} step {}: {m}", step + 1)),
                other => other,
            })?;
            lr = lr_at(cfg, step, total_steps);
            if !cfg.freeze {
                optimizer_step(&mut model.params, &grads, &mut state, &cfg.optimizer, lr)
                    .map_err(|e| Error::NonFinite(format!("epoch {epoch} step {}: {e}", step + 1)))?;
            }
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
            step += 1;
        }
        let train_loss = loss_sum / seen as f64;

        let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9));
        let val = val_anchors
            .iter()
            .map(|&a| {
                let l = if cfg.randomize_val_lead { sample_lead_time(&cfg.lead_time_pool, &mut val_rng) } else { cfg.val_lead_hours };
                data.sample_ref(a, l)
            })
            .collect::<Result<Vec<_>>>()?;
        let val_samples = val.par_iter().map(|r| data.prepare(r, cfg.loss)).collect::<Result<Vec<_>>>()?;
        let val_loss = mean_loss(&model, &val_samples, &data.lat_weights, cfg.normalization)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            wall_time: if cfg.record_wall_time { clock.elapsed().as_secs_f64() } else { 0.0 },
        });

        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, model.clone()));
            since_best = 0;
            if let Some(sink) = sink {
                let mut header = sink.header.clone();
                header.config = model_cfg.clone();
                header.seed = cfg.seed;
                header.epoch = epoch;
                header.val_loss = Some(val_loss);
                header.channels = data.stack.channel_names();
                write_checkpoint(&sink.path, &header, &model.params)?;
            }
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (best_val_loss, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        history,
        best_epoch,
        best_val_loss,
        steps: step,
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `9.00 (0.11)`.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.2} ({std:.2})")
}
