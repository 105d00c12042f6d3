//! Deterministic synthetic weather and air-quality data.
//!
//! Weather variables are sums of travelling low-wavenumber sinusoids with
//! diurnal and seasonal cycles, sampled hourly. Air-quality variables are
//! log-concentration fields advected semi-Lagrangian by the emitted 10 m wind,
//! relaxed toward a background with fixed hotspot sources, perturbed by
//! episodic bursts, and written 3-hourly. Particulate fields end up lognormal
//! and strongly right-skewed.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::catalog::{Family, VariableCatalog, VariableSpec};
use crate::align::samples::YearRange;
use crate::dataset::{Dataset, VariableData};
use crate::error::{Error, Result};
use crate::grid::LatLonGrid;
use crate::time::Timestamp;

const EARTH_RADIUS_M: f64 = 6.371e6;
pub const WEATHER_CADENCE_HOURS: u32 = 1;
pub const AQ_CADENCE_HOURS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub years: YearRange,
    /// Days generated per year, starting on 1 January.
    pub days_per_year: u32,
    pub resolution_deg: f64,
    /// Short names to emit; `None` emits the whole catalog.
    pub variables: Option<Vec<String>>,
    /// Hotspot density, one per this many grid cells.
    pub cells_per_hotspot: usize,
    /// Multiplier on the advecting wind speed.
    pub wind_scale: f64,
    /// Relaxation time toward the background, hours.
    pub relaxation_hours: f64,
    /// Probability per hotspot and hour of starting a burst.
    pub burst_probability: f64,
    /// Hours simulated before the first emitted timestamp of each year.
    pub spinup_hours: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            years: YearRange::new(2016, 2017),
            days_per_year: 14,
            resolution_deg: 5.625,
            variables: None,
            cells_per_hotspot: 32,
            wind_scale: 1.0,
            relaxation_hours: 48.0,
            burst_probability: 0.01,
            spinup_hours: 72,
        }
    }
}

/// SplitMix64 finalizer used to derive independent substreams.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn substream(seed: u64, tag: u64, index: i64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed ^ mix(tag)) ^ index as u64))
}

fn tag(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Travelling-wave field with values in [-1, 1].
#[derive(Debug, Clone)]
struct Waves {
    terms: Vec<(f64, f64, f64, f64, f64)>, // amplitude, k_lon, k_lat, omega (rad/h), phase
}

impl Waves {
    fn new(rng: &mut impl Rng, n: usize) -> Self {
        let mut terms: Vec<_> = (0..n)
            .map(|_| {
                let k = rng.random_range(1..=3) as f64;
                let l = rng.random_range(1..=3) as f64;
                let period = rng.random_range(48.0..240.0);
                (rng.random_range(0.3..1.0), k, l, 2.0 * PI / period, rng.random_range(0.0..2.0 * PI))
            })
            .collect();
        let total: f64 = terms.iter().map(|t| t.0).sum();
        for t in &mut terms {
            t.0 /= total;
        }
        Self { terms }
    }

    fn eval(&self, lat: f64, lon: f64, hour: f64) -> f64 {
        self.terms
            .iter()
            .map(|&(a, k, l, w, p)| a * (k * lon + l * lat - w * hour + p).sin())
            .sum()
    }
}

/// Pressure height in metres for the isothermal-ish approximation.
fn height_m(level: u32) -> f64 {
    7000.0 * (1000.0 / level as f64).ln()
}

struct WeatherModel {
    waves: Waves,
    short: String,
    level: Option<u32>,
}

impl WeatherModel {
    fn value(&self, lat_deg: f64, lon_deg: f64, t: Timestamp) -> f64 {
        let (lat, lon) = (lat_deg.to_radians(), lon_deg.to_radians());
        let hour = t.0 as f64;
        let s = self.waves.eval(lat, lon, hour);
        let local = (t.hour_of_day() as f64 + lon_deg / 15.0).rem_euclid(24.0);
        let diurnal = (2.0 * PI * (local - 15.0) / 24.0).cos() * lat.cos();
        let season = (2.0 * PI * (t.ordinal0() as f64 - 196.0) / 365.0).cos() * lat.sin();
        let surface = self.level.map_or(1.0, |l| (l as f64 / 1000.0).powi(3));
        match (self.short.as_str(), self.level) {
            ("z", Some(l)) => 9.80665 * height_m(l) * (1.0 + 0.02 * s) - 300.0 * lat.sin().powi(2),
            ("t", Some(l)) => {
                let base = (288.0 - 6.5 * height_m(l) / 1000.0).max(215.0) - 20.0 * lat.sin().powi(2);
                base + 6.0 * s + 3.0 * surface * diurnal + 8.0 * season
            }
            ("q", Some(l)) => 0.012 * (l as f64 / 1000.0).powi(3) * lat.cos() * (1.0 + 0.5 * s).max(0.05),
            ("r", _) => (60.0 + 30.0 * s - 10.0 * surface * diurnal).clamp(0.0, 100.0),
            ("u", Some(l)) => 5.0 + 20.0 * (1.0 - l as f64 / 1000.0) * lat.cos() + 12.0 * s,
            ("v", _) => 10.0 * s,
            ("t2m", None) => 288.0 - 25.0 * lat.sin().powi(2) + 8.0 * s + 5.0 * diurnal + 10.0 * season,
            ("u10", None) => 3.0 + 7.0 * s,
            ("v10", None) => 5.0 * s,
            _ => 10.0 * s,
        }
    }
}

/// Parameters of one advected log-concentration tracer.
struct Tracer {
    /// Background log-concentration per cell.
    background: Vec<f64>,
    hotspots: Vec<usize>,
    burst_rate: f64,
    burst_hours: u32,
    noise: f64,
}

fn base_value(short: &str) -> f64 {
    match short {
        "pm2p5" => 1.2e-8,
        "co" => 1.2e-7,
        "go3" => 5.0e-8,
        "no" => 2.0e-10,
        "no2" => 5.0e-9,
        "so2" => 2.0e-9,
        _ => 1.0e-8,
    }
}

fn tracer_for(product: &str) -> &'static str {
    match product {
        "pm1" | "pm10" | "pm2p5" => "pm2p5",
        "tcco" | "co" => "co",
        "tc_no" | "no" => "no",
        "tcno2" | "no2" => "no2",
        "gtco3" | "go3" => "go3",
        "so2" => "so2",
        _ => "pm2p5",
    }
}

pub struct Generator {
    cfg: SynthConfig,
    grid: LatLonGrid,
    catalog: VariableCatalog,
}

impl Generator {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        if cfg.days_per_year == 0 || cfg.days_per_year > 365 {
            return Err(Error::Usage("days_per_year must be in 1..=365".into()));
        }
        let grid = LatLonGrid::global(cfg.resolution_deg)?;
        let catalog = VariableCatalog::builtin();
        if let Some(vars) = &cfg.variables {
            for v in vars {
                if catalog.get(v).is_none() {
                    return Err(Error::Usage(format!("unknown variable `{v}`")));
                }
            }
        }
        Ok(Self { cfg, grid, catalog })
    }

    pub fn grid(&self) -> &LatLonGrid {
        &self.grid
    }

    fn selected(&self) -> Vec<VariableSpec> {
        self.catalog
            .variables
            .iter()
            .filter(|s| self.cfg.variables.as_ref().is_none_or(|v| v.iter().any(|n| n == &s.short_name)))
            .cloned()
            .collect()
    }

    fn weather_model(&self, short: &str, level: Option<u32>) -> WeatherModel {
        let key = format!("{short}/{}", level.unwrap_or(0));
        let mut rng = substream(self.cfg.seed, tag("weather"), tag(&key) as i64);
        WeatherModel {
            waves: Waves::new(&mut rng, 4),
            short: short.to_string(),
            level,
        }
    }

    fn frame(&self, m: &WeatherModel, t: Timestamp) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.grid.height() * self.grid.width());
        for &lat in self.grid.lats() {
            for &lon in self.grid.lons() {
                out.push(m.value(lat, lon, t) as f32);
            }
        }
        out
    }

    fn year_axis(&self, year: i32, cadence: u32) -> Result<Vec<Timestamp>> {
        let start = Timestamp::from_ymdh(year, 1, 1, 0)?;
        let hours = self.cfg.days_per_year as i64 * 24;
        Ok((0..hours).step_by(cadence as usize).map(|h| start.add_hours(h)).collect())
    }

    fn weather_variable(&self, spec: &VariableSpec) -> Result<VariableData> {
        let levels = spec.levels.expand();
        let models: Vec<WeatherModel> = levels.iter().map(|&l| self.weather_model(&spec.short_name, l)).collect();
        let mut timestamps = Vec::new();
        for y in self.cfg.years.first..=self.cfg.years.last {
            timestamps.extend(self.year_axis(y, WEATHER_CADENCE_HOURS)?);
        }
        let frames: Vec<Vec<f32>> = timestamps
            .par_iter()
            .map(|&t| models.iter().flat_map(|m| self.frame(m, t)).collect())
            .collect();
        Ok(VariableData {
            spec: spec.clone(),
            cadence_hours: WEATHER_CADENCE_HOURS,
            timestamps,
            data: frames.concat(),
        })
    }

    fn tracer(&self, name: &str) -> Tracer {
        let mut rng = substream(self.cfg.seed, tag("tracer"), tag(name) as i64);
        let (h, w) = self.grid.shape();
        let n_hot = ((h * w) / self.cfg.cells_per_hotspot.max(1)).max(1);
        let lats = self.grid.lats();
        let candidates: Vec<usize> = (0..h * w).filter(|&k| lats[k / w].abs() <= 60.0).collect();
        let pool = if candidates.is_empty() { (0..h * w).collect() } else { candidates };
        let hotspots: Vec<usize> = (0..n_hot).map(|_| pool[rng.random_range(0..pool.len())]).collect();
        let amps: Vec<f64> = hotspots.iter().map(|_| rng.random_range(1.0..2.5)).collect();
        let radius = rng.random_range(0.8..1.5);
        let base = base_value(name).ln();
        let mut background = vec![base; h * w];
        for (k, bg) in background.iter_mut().enumerate() {
            let (i, j) = ((k / w) as f64, (k % w) as f64);
            for (&hs, &a) in hotspots.iter().zip(&amps) {
                let (hi, hj) = ((hs / w) as f64, (hs % w) as f64);
                let dj = (j - hj).abs().min(w as f64 - (j - hj).abs());
                let d2 = (i - hi).powi(2) + dj * dj;
                *bg += a * (-d2 / (2.0 * radius * radius)).exp();
            }
            // Weak large-scale gradient so cells away from hotspots still vary.
            *bg += 0.3 * (lats[k / w].to_radians() * 2.0).cos();
        }
        Tracer {
            background,
            hotspots,
            burst_rate: rng.random_range(0.1..0.2),
            burst_hours: 12,
            noise: 0.03,
        }
    }

    /// Advects one tracer across one year segment; returns log fields at the
    /// 3-hourly output times, using `u10`/`v10` rounded to `f32`.
    fn run_tracer(&self, name: &str, tracer: &Tracer, year: i32, uv: &dyn Fn(Timestamp) -> (Vec<f32>, Vec<f32>)) -> Result<Vec<Vec<f64>>> {
        let (h, w) = self.grid.shape();
        let res = self.grid.resolution_deg();
        let lats = self.grid.lats().to_vec();
        let out_axis = self.year_axis(year, AQ_CADENCE_HOURS)?;
        let start = out_axis[0].add_hours(-(self.cfg.spinup_hours as i64));
        let end = *out_axis.last().expect("non-empty year");
        let mut field = tracer.background.clone();
        let mut bursts = vec![0u32; tracer.hotspots.len()];
        let mut outputs = Vec::with_capacity(out_axis.len());
        let mut next_out = 0;
        let mut t = start;
        let dt = 1.0;
        let relax = dt / self.cfg.relaxation_hours;
        loop {
            if next_out < out_axis.len() && t == out_axis[next_out] {
                outputs.push(field.clone());
                next_out += 1;
            }
            if t >= end {
                break;
            }
            let (u, v) = uv(t);
            let mut next = vec![0.0; h * w];
            for i in 0..h {
                let coslat = lats[i].to_radians().cos().max(0.05);
                for j in 0..w {
                    let k = i * w + j;
                    let us = u[k] as f64 * self.cfg.wind_scale;
                    let vs = v[k] as f64 * self.cfg.wind_scale;
                    let di = (vs * dt * 3600.0 / EARTH_RADIUS_M).to_degrees() / res;
                    let dj = (us * dt * 3600.0 / (EARTH_RADIUS_M * coslat)).to_degrees() / res;
                    let src = sample_bilinear(&field, h, w, i as f64 - di, j as f64 - dj);
                    next[k] = src + relax * (tracer.background[k] - src);
                }
            }
            let mut rng = substream(self.cfg.seed, tag(name), t.0);
            for (b, &hs) in bursts.iter_mut().zip(&tracer.hotspots) {
                if *b == 0 && rng.random::<f64>() < self.cfg.burst_probability {
                    *b = tracer.burst_hours;
                }
                if *b > 0 {
                    next[hs] += tracer.burst_rate * dt;
                    *b -= 1;
                }
            }
            for x in next.iter_mut() {
                *x += tracer.noise * (rng.random::<f64>() * 2.0 - 1.0);
            }
            field = next;
            t = t.add_hours(1);
        }
        Ok(outputs)
    }

    /// Builds the full dataset in memory.
    pub fn generate(&self) -> Result<Dataset> {
        let specs = self.selected();
        if specs.is_empty() {
            return Err(Error::EmptySelection("no variables selected".into()));
        }
        let mut variables = Vec::with_capacity(specs.len());
        for spec in specs.iter().filter(|s| s.family == Family::Weather) {
            variables.push(self.weather_variable(spec)?);
        }

        let aq: Vec<&VariableSpec> = specs.iter().filter(|s| s.family == Family::AirQuality).collect();
        if !aq.is_empty() {
            let mut tracer_names: Vec<&str> = aq.iter().map(|s| tracer_for(&s.short_name)).collect();
            tracer_names.sort_unstable();
            tracer_names.dedup();
            let u_model = self.weather_model("u10", None);
            let v_model = self.weather_model("v10", None);
            let uv = |t: Timestamp| (self.frame(&u_model, t), self.frame(&v_model, t));
            let mut axis = Vec::new();
            for y in self.cfg.years.first..=self.cfg.years.last {
                axis.extend(self.year_axis(y, AQ_CADENCE_HOURS)?);
            }
            let fields: Vec<(&str, Vec<Vec<f64>>)> = tracer_names
                .par_iter()
                .map(|&name| {
                    let tracer = self.tracer(name);
                    let mut all = Vec::new();
                    for y in self.cfg.years.first..=self.cfg.years.last {
                        all.extend(self.run_tracer(name, &tracer, y, &uv)?);
                    }
                    Ok((name, all))
                })
                .collect::<Result<_>>()?;
            for spec in aq {
                let tracer = tracer_for(&spec.short_name);
                let logs = &fields.iter().find(|(n, _)| *n == tracer).expect("tracer generated").1;
                variables.push(self.aq_variable(spec, logs, &axis));
            }
        }
        let ds = Dataset {
            grid: self.grid.clone(),
            variables,
            forecast: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn aq_variable(&self, spec: &VariableSpec, logs: &[Vec<f64>], axis: &[Timestamp]) -> VariableData {
        let levels = spec.levels.expand();
        let modulation = self.weather_model(&format!("mod_{}", spec.short_name), None);
        let mut data = Vec::with_capacity(axis.len() * levels.len() * self.grid.height() * self.grid.width());
        for (log, &t) in logs.iter().zip(axis) {
            for &level in &levels {
                let mut k = 0;
                for &lat in self.grid.lats() {
                    for &lon in self.grid.lons() {
                        let m = modulation.waves.eval(lat.to_radians(), lon.to_radians(), t.0 as f64);
                        let l = log[k];
                        let value = match (spec.short_name.as_str(), level) {
                            ("pm2p5", _) => l.exp(),
                            ("pm10", _) => (l + 0.45 + 0.1 * m).exp(),
                            ("pm1", _) => (l - 0.5 + 0.05 * m).exp(),
                            (_, Some(p)) => {
                                let a = (p as f64 / 1000.0).powi(2);
                                let base = base_value(tracer_for(&spec.short_name)).ln();
                                (a * l + (1.0 - a) * (base - 0.5) + 0.1 * m).exp()
                            }
                            // Column totals: surface concentration times a scale height.
                            ("tcco", None) => l.exp() * 1.0e4,
                            ("tc_no", None) => l.exp() * 5.0e2,
                            ("tcno2", None) => l.exp() * 2.0e3,
                            ("gtco3", None) => l.exp() * 1.2e5,
                            _ => l.exp(),
                        };
                        data.push(value.clamp(0.0, 1.0) as f32);
                        k += 1;
                    }
                }
            }
        }
        VariableData {
            spec: spec.clone(),
            cadence_hours: AQ_CADENCE_HOURS,
            timestamps: axis.to_vec(),
            data,
        }
    }
}

/// Bilinear sample at fractional (row, col); columns wrap, rows clamp.
fn sample_bilinear(f: &[f64], h: usize, w: usize, i: f64, j: f64) -> f64 {
    let i = i.clamp(0.0, (h - 1) as f64);
    let i0 = (i.floor() as usize).min(h.saturating_sub(2));
    let fi = if h > 1 { i - i0 as f64 } else { 0.0 };
    let i1 = (i0 + 1).min(h - 1);
    let j = j.rem_euclid(w as f64);
    let j0 = (j.floor() as usize) % w;
    let fj = j - j.floor();
    let j1 = (j0 + 1) % w;
    let a = f[i0 * w + j0] * (1.0 - fj) + f[i0 * w + j1] * fj;
    let b = f[i1 * w + j0] * (1.0 - fj) + f[i1 * w + j1] * fj;
    a * (1.0 - fi) + b * fi
}

pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    Generator::new(cfg.clone())?.generate()
}

/// Sample skewness (biased moment estimator).
pub fn skewness(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}
