//! Temporal interpolation, level selection and the regrid+interpolate pass
//! that brings raw inputs onto one hourly grid.

use rayon::prelude::*;

use crate::align::catalog::{Levels, VariableCatalog};
use crate::dataset::{Dataset, VariableData};
use crate::error::{Error, Result};
use crate::grid::{regrid, LatLonGrid, RegridMethod, VariableField};
use crate::time::Timestamp;

/// Cadence of the air-quality inputs before alignment.
pub const SOURCE_CADENCE_HOURS: i64 = 3;

/// `a + (b - a) * frac`, clamped to the bracket of `a` and `b`.
fn lerp(a: f64, b: f64, frac: f64) -> f64 {
    let v = a + (b - a) * frac;
    v.clamp(a.min(b), a.max(b))
}

fn check_cadence(times: &[Timestamp], cadence: i64) -> Result<()> {
    if times.len() < 2 {
        return Err(Error::Cadence(format!("need at least 2 timestamps, got {}", times.len())));
    }
    for w in times.windows(2) {
        let gap = w[1].hours_since(w[0]);
        if gap != cadence {
            return Err(Error::Cadence(format!(
                "gap of {gap} h between {} and {} (expected {cadence} h)",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

/// Linear per-cell interpolation of a 3-hourly series onto every hour between
/// its first and last timestamp. Original frames are returned unchanged.
pub fn interpolate_hourly(series: &[VariableField]) -> Result<Vec<VariableField>> {
    let times: Vec<Timestamp> = series.iter().map(|f| f.timestamp).collect();
    check_cadence(&times, SOURCE_CADENCE_HOURS)?;
    let shape = series[0].data.dim();
    if series.iter().any(|f| f.data.dim() != shape || f.grid != series[0].grid) {
        return Err(Error::Shape("series frames differ in grid".into()));
    }
    let mut out = Vec::with_capacity((series.len() - 1) * 3 + 1);
    for pair in series.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        out.push(a.clone());
        for k in 1..SOURCE_CADENCE_HOURS {
            let frac = k as f64 / SOURCE_CADENCE_HOURS as f64;
            let mut f = a.clone();
            f.timestamp = a.timestamp.add_hours(k);
            ndarray::Zip::from(&mut f.data)
                .and(&a.data)
                .and(&b.data)
                .for_each(|o, &x, &y| *o = lerp(x, y, frac));
            out.push(f);
        }
    }
    out.push(series[series.len() - 1].clone());
    Ok(out)
}

/// Splits a time axis into maximal runs with a constant `cadence`.
fn contiguous_runs(times: &[Timestamp], cadence: i64) -> Vec<std::ops::Range<usize>> {
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=times.len() {
        if i == times.len() || times[i].hours_since(times[i - 1]) != cadence {
            runs.push(start..i);
            start = i;
        }
    }
    runs
}

/// Hourly version of a variable on its own grid. Gaps in the source axis
/// split it into runs that are interpolated independently; single-frame runs
/// are kept as they are.
pub fn interpolate_variable_hourly(var: &VariableData, grid: &LatLonGrid) -> Result<VariableData> {
    if var.cadence_hours == 1 {
        return Ok(var.clone());
    }
    if var.cadence_hours as i64 != SOURCE_CADENCE_HOURS {
        return Err(Error::Cadence(format!(
            "`{}` has a {} h cadence; only {SOURCE_CADENCE_HOURS} h inputs are interpolated",
            var.spec.short_name, var.cadence_hours
        )));
    }
    let per_t = var.n_levels() * grid.height() * grid.width();
    let mut timestamps = Vec::new();
    let mut data = Vec::new();
    for run in contiguous_runs(&var.timestamps, SOURCE_CADENCE_HOURS) {
        for t in run.clone() {
            timestamps.push(var.timestamps[t]);
            data.extend_from_slice(&var.data[t * per_t..(t + 1) * per_t]);
            if t + 1 == run.end {
                break;
            }
            let a = &var.data[t * per_t..(t + 1) * per_t];
            let b = &var.data[(t + 1) * per_t..(t + 2) * per_t];
            for k in 1..SOURCE_CADENCE_HOURS {
                let frac = k as f64 / SOURCE_CADENCE_HOURS as f64;
                timestamps.push(var.timestamps[t].add_hours(k));
                data.extend(a.iter().zip(b).map(|(&x, &y)| lerp(x as f64, y as f64, frac) as f32));
            }
        }
    }
    Ok(VariableData { spec: var.spec.clone(), cadence_hours: 1, timestamps, data })
}

/// Restricts a multi-level variable to `levels`, keeping stored order.
pub fn select_levels(var: &VariableData, grid: &LatLonGrid, levels: &[u32]) -> Result<VariableData> {
    let available = match &var.spec.levels {
        Levels::Pressure(l) => l.clone(),
        Levels::Single => {
            return Err(Error::Usage(format!("`{}` is a single-level variable", var.spec.short_name)))
        }
    };
    for &l in levels {
        if !available.contains(&l) {
            return Err(Error::MissingLevel { variable: var.spec.short_name.clone(), level: l });
        }
    }
    let keep: Vec<usize> = available
        .iter()
        .enumerate()
        .filter(|(_, l)| levels.contains(l))
        .map(|(i, _)| i)
        .collect();
    let n = grid.height() * grid.width();
    let mut data = Vec::with_capacity(var.timestamps.len() * keep.len() * n);
    for t in 0..var.timestamps.len() {
        for &l in &keep {
            data.extend_from_slice(var.frame(grid, t, l));
        }
    }
    let mut spec = var.spec.clone();
    spec.levels = Levels::Pressure(keep.iter().map(|&i| available[i]).collect());
    Ok(VariableData { spec, cadence_hours: var.cadence_hours, timestamps: var.timestamps.clone(), data })
}

/// Regrids every frame of a variable onto `dst`.
pub fn regrid_variable(var: &VariableData, src: &LatLonGrid, dst: &LatLonGrid, method: RegridMethod) -> Result<VariableData> {
    if src == dst {
        return Ok(var.clone());
    }
    let levels = var.spec.levels.expand();
    let n_src = src.height() * src.width();
    let frames: Vec<Vec<f32>> = (0..var.timestamps.len() * levels.len())
        .into_par_iter()
        .map(|k| {
            let (t, l) = (k / levels.len(), k % levels.len());
            let raw = &var.data[k * n_src..(k + 1) * n_src];
            let data = ndarray::Array2::from_shape_fn(src.shape(), |(i, j)| raw[i * src.width() + j] as f64);
            let field = VariableField::new(
                var.spec.short_name.clone(),
                levels[l],
                var.spec.units.clone(),
                var.timestamps[t],
                src.clone(),
                data,
            )?;
            let out = regrid(&field, dst, method)?;
            Ok(out.data.iter().map(|&v| v as f32).collect())
        })
        .collect::<Result<_>>()?;
    Ok(VariableData {
        spec: var.spec.clone(),
        cadence_hours: var.cadence_hours,
        timestamps: var.timestamps.clone(),
        data: frames.concat(),
    })
}

/// Which of the two alignment steps runs first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlignOrder {
    #[default]
    RegridThenInterpolate,
    InterpolateThenRegrid,
}

#[derive(Debug, Clone)]
pub struct AlignOptions {
    pub resolution_deg: f64,
    pub method: RegridMethod,
    pub hourly: bool,
    pub order: AlignOrder,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self { resolution_deg: 5.625, method: RegridMethod::Conservative, hourly: true, order: AlignOrder::default() }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AlignReport {
    /// Variables present in the dataset but missing from the catalog.
    pub unknown_variables: Vec<String>,
    /// Catalog variables absent from the dataset.
    pub missing_variables: Vec<String>,
    /// Variables whose stored units differ from the catalog.
    pub unit_mismatches: Vec<String>,
}

/// Regrid onto a global grid at `resolution_deg` and (optionally) bring every
/// variable to an hourly cadence, checking names and units against `catalog`.
pub fn align_dataset(ds: &Dataset, catalog: &VariableCatalog, opts: &AlignOptions) -> Result<(Dataset, AlignReport)> {
    let dst = LatLonGrid::global(opts.resolution_deg)?;
    let mut report = AlignReport::default();
    for v in &ds.variables {
        match catalog.get(&v.spec.short_name) {
            None => report.unknown_variables.push(v.spec.short_name.clone()),
            Some(spec) if spec.units != v.spec.units => report.unit_mismatches.push(v.spec.short_name.clone()),
            Some(_) => {}
        }
    }
    for spec in &catalog.variables {
        if ds.variable(&spec.short_name).is_none() {
            report.missing_variables.push(spec.short_name.clone());
        }
    }
    let mut variables = Vec::with_capacity(ds.variables.len());
    for v in &ds.variables {
        let aligned = match (opts.order, opts.hourly) {
            (_, false) => regrid_variable(v, &ds.grid, &dst, opts.method)?,
            (AlignOrder::RegridThenInterpolate, true) => {
                interpolate_variable_hourly(&regrid_variable(v, &ds.grid, &dst, opts.method)?, &dst)?
            }
            (AlignOrder::InterpolateThenRegrid, true) => {
                regrid_variable(&interpolate_variable_hourly(v, &ds.grid)?, &ds.grid, &dst, opts.method)?
            }
        };
        variables.push(aligned);
    }
    Ok((Dataset { grid: dst, variables, forecast: ds.forecast }, report))
}
