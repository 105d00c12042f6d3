//! In-memory datasets and the canonical on-disk layout.
//!
//! A dataset directory holds one `meta.json` sidecar plus one subdirectory per
//! variable. Each variable directory contains per-year files of little-endian
//! `f32` values in `[time, level, lat, lon]` order:
//!
//! ```text
//! data/
//!   meta.json
//!   pm2p5/2017.bin
//!   t/2017.bin
//! ```
//!
//! Timestamps are stored once per distinct time axis in the sidecar as UTC
//! ISO-8601 strings; every variable names the axis it uses.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::align::catalog::{Channel, Levels, VariableSpec};
use crate::error::{Error, Result};
use crate::grid::{BoundingBox, LatLonGrid};
use crate::time::Timestamp;

pub const FORMAT_NAME: &str = "pmcast-dataset";
pub const FORMAT_VERSION: u32 = 1;

/// One variable: all of its levels over one time axis.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableData {
    /// `levels` reflects the levels actually stored.
    pub spec: VariableSpec,
    pub cadence_hours: u32,
    pub timestamps: Vec<Timestamp>,
    /// `[time, level, lat, lon]`
    pub data: Vec<f32>,
}

impl VariableData {
    pub fn n_levels(&self) -> usize {
        self.spec.levels.len()
    }

    fn frame_len(&self, grid: &LatLonGrid) -> usize {
        grid.height() * grid.width()
    }

    /// Raster at time index `t`, level index `l`.
    pub fn frame<'a>(&'a self, grid: &LatLonGrid, t: usize, l: usize) -> &'a [f32] {
        let n = self.frame_len(grid);
        let start = (t * self.n_levels() + l) * n;
        &self.data[start..start + n]
    }

    pub fn level_index(&self, level: Option<u32>) -> Option<usize> {
        match (&self.spec.levels, level) {
            (Levels::Single, None) => Some(0),
            (Levels::Pressure(ls), Some(l)) => ls.iter().position(|&x| x == l),
            _ => None,
        }
    }
}

/// Optional sidecar block marking a dataset as a forecast product: values
/// stored at timestamp `t` are the forecast issued at `t` for `t + lead`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForecastInfo {
    pub lead_time_hours: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grid: LatLonGrid,
    pub variables: Vec<VariableData>,
    pub forecast: Option<ForecastInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format: String,
    version: u32,
    grid: LatLonGrid,
    time_axes: BTreeMap<String, Vec<Timestamp>>,
    variables: Vec<VariableMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    forecast: Option<ForecastInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct VariableMeta {
    #[serde(flatten)]
    spec: VariableSpec,
    cadence_hours: u32,
    time_axis: String,
    files: Vec<FileMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FileMeta {
    year: i32,
    path: String,
    count: usize,
}

impl Dataset {
    pub fn variable(&self, short_name: &str) -> Option<&VariableData> {
        self.variables.iter().find(|v| v.spec.short_name == short_name)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.grid.height() * self.grid.width();
        for v in &self.variables {
            let expect = v.timestamps.len() * v.n_levels() * n;
            if v.data.len() != expect {
                return Err(Error::Shape(format!(
                    "`{}` holds {} values, expected {expect}",
                    v.spec.short_name,
                    v.data.len()
                )));
            }
            if v.timestamps.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Data(format!("`{}` timestamps not increasing", v.spec.short_name)));
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let frame = self.grid.height() * self.grid.width();
        let mut axes: BTreeMap<String, Vec<Timestamp>> = BTreeMap::new();
        let mut metas = Vec::new();
        for v in &self.variables {
            let axis_name = match axes.iter().find(|(_, ts)| **ts == v.timestamps) {
                Some((name, _)) => name.clone(),
                None => {
                    let name = format!("axis{}", axes.len());
                    axes.insert(name.clone(), v.timestamps.clone());
                    name
                }
            };
            let var_dir = dir.join(&v.spec.short_name);
            fs::create_dir_all(&var_dir).map_err(|e| Error::io(&var_dir, e))?;
            let per_t = v.n_levels() * frame;
            let mut files = Vec::new();
            let mut start = 0;
            while start < v.timestamps.len() {
                let year = v.timestamps[start].year();
                let end = start + v.timestamps[start..].iter().take_while(|t| t.year() == year).count();
                let rel = format!("{}/{year}.bin", v.spec.short_name);
                write_f32(&dir.join(&rel), &v.data[start * per_t..end * per_t])?;
                files.push(FileMeta { year, path: rel, count: end - start });
                start = end;
            }
            metas.push(VariableMeta {
                spec: v.spec.clone(),
                cadence_hours: v.cadence_hours,
                time_axis: axis_name,
                files,
            });
        }
        let meta = Meta {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            grid: self.grid.clone(),
            time_axes: axes,
            variables: metas,
            forecast: self.forecast,
        };
        let path = dir.join("meta.json");
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Reads the sidecar and, optionally, only the named variables.
    pub fn read(dir: &Path, only: Option<&[&str]>) -> Result<Self> {
        let path = dir.join("meta.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if meta.format != FORMAT_NAME || meta.version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported format {} v{}",
                path.display(),
                meta.format,
                meta.version
            )));
        }
        let grid = LatLonGrid::new(
            meta.grid.lats().to_vec(),
            meta.grid.lons().to_vec(),
            meta.grid.resolution_deg(),
        )?;
        let frame = grid.height() * grid.width();
        let mut variables = Vec::new();
        for vm in meta.variables {
            if let Some(names) = only {
                if !names.contains(&vm.spec.short_name.as_str()) {
                    continue;
                }
            }
            let timestamps = meta
                .time_axes
                .get(&vm.time_axis)
                .ok_or_else(|| Error::Data(format!("unknown time axis `{}`", vm.time_axis)))?
                .clone();
            let per_t = vm.spec.levels.len() * frame;
            let mut data = Vec::with_capacity(timestamps.len() * per_t);
            for f in &vm.files {
                let chunk = read_f32(&dir.join(&f.path))?;
                if chunk.len() != f.count * per_t {
                    return Err(Error::Data(format!(
                        "{}: {} values, expected {}",
                        f.path,
                        chunk.len(),
                        f.count * per_t
                    )));
                }
                data.extend_from_slice(&chunk);
            }
            variables.push(VariableData {
                spec: vm.spec,
                cadence_hours: vm.cadence_hours,
                timestamps,
                data,
            });
        }
        if let Some(names) = only {
            for n in names {
                if !variables.iter().any(|v| v.spec.short_name == *n) {
                    return Err(Error::Data(format!("{}: no variable `{n}`", dir.display())));
                }
            }
        }
        let ds = Dataset { grid, variables, forecast: meta.forecast };
        ds.validate()?;
        Ok(ds)
    }
}

pub fn write_f32(path: &Path, values: &[f32]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for v in values {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Data(format!("{}: length not a multiple of 4", path.display())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Channels on a shared hourly axis, `[time, channel, lat, lon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStack {
    pub grid: LatLonGrid,
    pub timestamps: Vec<Timestamp>,
    pub channels: Vec<Channel>,
    pub data: Vec<f32>,
    index: HashMap<Timestamp, usize>,
}

impl ChannelStack {
    pub fn new(grid: LatLonGrid, timestamps: Vec<Timestamp>, channels: Vec<Channel>, data: Vec<f32>) -> Result<Self> {
        let expect = timestamps.len() * channels.len() * grid.height() * grid.width();
        if data.len() != expect {
            return Err(Error::Shape(format!("stack holds {} values, expected {expect}", data.len())));
        }
        if timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Data("stack timestamps not increasing".into()));
        }
        let index = timestamps.iter().enumerate().map(|(i, t)| (*t, i)).collect();
        Ok(Self { grid, timestamps, channels, data, index })
    }

    /// Gathers `channels` from `ds` on the timestamps every selected variable shares.
    pub fn from_dataset(ds: &Dataset, channels: &[Channel]) -> Result<Self> {
        let mut sources = Vec::with_capacity(channels.len());
        for c in channels {
            let v = ds
                .variable(&c.variable)
                .ok_or_else(|| Error::Data(format!("dataset lacks variable `{}`", c.variable)))?;
            let l = v.level_index(c.level).ok_or_else(|| Error::MissingLevel {
                variable: c.variable.clone(),
                level: c.level.unwrap_or(0),
            })?;
            sources.push((v, l));
        }
        let mut common: Vec<Timestamp> = match sources.first() {
            Some((v, _)) => v.timestamps.clone(),
            None => return Err(Error::EmptySelection("no channels requested".into())),
        };
        for (v, _) in &sources[1..] {
            let set: std::collections::HashSet<_> = v.timestamps.iter().collect();
            common.retain(|t| set.contains(t));
        }
        let lookups: Vec<HashMap<Timestamp, usize>> = sources
            .iter()
            .map(|(v, _)| v.timestamps.iter().enumerate().map(|(i, t)| (*t, i)).collect())
            .collect();
        let n = ds.grid.height() * ds.grid.width();
        let mut data = Vec::with_capacity(common.len() * channels.len() * n);
        for t in &common {
            for ((v, l), lookup) in sources.iter().zip(&lookups) {
                data.extend_from_slice(v.frame(&ds.grid, lookup[t], *l));
            }
        }
        Self::new(ds.grid.clone(), common, channels.to_vec(), data)
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    fn frame_len(&self) -> usize {
        self.grid.height() * self.grid.width()
    }

    pub fn time_index(&self, t: Timestamp) -> Option<usize> {
        self.index.get(&t).copied()
    }

    /// All channels at time index `t` as `[C, H, W]`.
    pub fn frame(&self, t: usize) -> Array3<f64> {
        let (h, w) = self.grid.shape();
        let c = self.n_channels();
        let start = t * c * h * w;
        Array3::from_shape_fn((c, h, w), |(k, i, j)| self.data[start + (k * h + i) * w + j] as f64)
    }

    /// One channel plane at time index `t`.
    pub fn plane(&self, t: usize, channel: usize) -> &[f32] {
        let n = self.frame_len();
        let start = (t * self.n_channels() + channel) * n;
        &self.data[start..start + n]
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.name() == name)
    }

    pub fn channel_names(&self) -> Vec<String> {
        self.channels.iter().map(Channel::name).collect()
    }

    pub fn crop(&self, bbox: &BoundingBox) -> Result<Self> {
        let idx = self.grid.crop_indices(bbox)?;
        let (h, w) = self.grid.shape();
        let mut data = Vec::with_capacity(self.timestamps.len() * self.n_channels() * idx.rows.len() * idx.cols.len());
        for plane in self.data.chunks_exact(h * w) {
            for &i in &idx.rows {
                for &j in &idx.cols {
                    data.push(plane[i * w + j]);
                }
            }
        }
        Self::new(idx.grid, self.timestamps.clone(), self.channels.clone(), data)
    }

    /// Keeps only the listed time indices.
    pub fn select_times(&self, indices: &[usize]) -> Result<Self> {
        let per_t = self.n_channels() * self.frame_len();
        let mut data = Vec::with_capacity(indices.len() * per_t);
        for &t in indices {
            data.extend_from_slice(&self.data[t * per_t..(t + 1) * per_t]);
        }
        let ts = indices.iter().map(|&t| self.timestamps[t]).collect();
        Self::new(self.grid.clone(), ts, self.channels.clone(), data)
    }
}

/// Writes a set of named rasters (one timestamp) in the dataset layout.
pub fn write_rasters(
    dir: &Path,
    grid: &LatLonGrid,
    timestamp: Timestamp,
    rasters: &[(VariableSpec, Array2<f64>)],
) -> Result<()> {
    let variables = rasters
        .iter()
        .map(|(spec, data)| {
            if data.dim() != grid.shape() {
                return Err(Error::Shape(format!("raster {:?} vs grid {:?}", data.dim(), grid.shape())));
            }
            Ok(VariableData {
                spec: spec.clone(),
                cadence_hours: 1,
                timestamps: vec![timestamp],
                data: data.iter().map(|&v| v as f32).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset { grid: grid.clone(), variables, forecast: None }.write(dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::catalog::VariableCatalog;

    fn tiny() -> Dataset {
        let grid = LatLonGrid::global(45.0).unwrap();
        let cat = VariableCatalog::builtin();
        let t0 = Timestamp::from_ymdh(2016, 12, 31, 22).unwrap();
        let ts: Vec<Timestamp> = (0..4).map(|k| t0.add_hours(k)).collect();
        let n = grid.height() * grid.width();
        let mk = |name: &str, levels: usize| {
            let mut spec = cat.get(name).unwrap().clone();
            if levels == 2 {
                spec.levels = Levels::Pressure(vec![500, 925]);
            }
            VariableData {
                spec,
                cadence_hours: 1,
                timestamps: ts.clone(),
                data: (0..ts.len() * levels * n).map(|i| i as f32 * 0.5).collect(),
            }
        };
        Dataset { grid, variables: vec![mk("pm2p5", 1), mk("t", 2)], forecast: None }
    }

    #[test]
    fn write_read_round_trip_splits_years() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        ds.write(dir.path()).unwrap();
        assert!(dir.path().join("pm2p5/2016.bin").exists());
        assert!(dir.path().join("pm2p5/2017.bin").exists());
        let back = Dataset::read(dir.path(), None).unwrap();
        assert_eq!(back, ds);
        let only = Dataset::read(dir.path(), Some(&["t"])).unwrap();
        assert_eq!(only.variables.len(), 1);
        assert!(Dataset::read(dir.path(), Some(&["zz"])).is_err());
    }

    #[test]
    fn binary_files_are_little_endian_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_f32(&p, &[1.0, -2.5]).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes, [0, 0, 0x80, 0x3f, 0, 0, 0x20, 0xc0]);
    }

    #[test]
    fn stack_gathers_levels_and_crops() {
        let ds = tiny();
        let cat = VariableCatalog::builtin();
        let chans = vec![cat.channel("pm2p5").unwrap(), cat.channel("t_925").unwrap()];
        let stack = ChannelStack::from_dataset(&ds, &chans).unwrap();
        assert_eq!(stack.timestamps.len(), 4);
        let n = 32;
        // t_925 is level index 1 of the `t` variable at time 2.
        assert_eq!(stack.plane(2, 1), ds.variables[1].frame(&ds.grid, 2, 1));
        assert_eq!(stack.plane(2, 1)[0], ((2 * 2 + 1) * n) as f32 * 0.5);
        let box_ = BoundingBox::new(-50.0, 50.0, 0.0, 100.0).unwrap();
        let c = stack.crop(&box_).unwrap();
        assert_eq!(c.grid.shape(), (2, 3));
        assert!(ChannelStack::from_dataset(&ds, &[cat.channel("t_50").unwrap()]).is_err());
    }
}
