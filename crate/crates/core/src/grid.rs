//! Latitude/longitude rasters: descriptors, latitude weighting, regridding
//! and regional cropping.
//!
//! Grids store cell-center coordinates. Latitudes are strictly monotone
//! (either direction) and never touch the poles; longitudes live in
//! `[0, 360)` and advance by exactly one resolution step per column, wrapping
//! through 0° where a regional grid straddles the prime meridian.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::Timestamp;

const SPACING_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatLonGrid {
    lats: Vec<f64>,
    lons: Vec<f64>,
    resolution_deg: f64,
}

impl LatLonGrid {
    pub fn new(lats: Vec<f64>, lons: Vec<f64>, resolution_deg: f64) -> Result<Self> {
        if !(resolution_deg > 0.0) || !resolution_deg.is_finite() {
            return Err(Error::InvalidGrid(format!("resolution {resolution_deg} must be positive")));
        }
        if lats.is_empty() || lons.is_empty() {
            return Err(Error::InvalidGrid("grid needs at least one row and one column".into()));
        }
        if lats.iter().any(|l| !l.is_finite() || l.abs() > 90.0) {
            return Err(Error::InvalidGrid("latitudes must lie in [-90, 90]".into()));
        }
        if lats.len() > 1 {
            let dir = (lats[1] - lats[0]).signum();
            for pair in lats.windows(2) {
                let step = pair[1] - pair[0];
                if step.signum() != dir || (step.abs() - resolution_deg).abs() > SPACING_TOL {
                    return Err(Error::InvalidGrid(format!(
                        "latitude spacing {step} differs from resolution {resolution_deg}"
                    )));
                }
            }
        }
        if lats.len() as f64 * resolution_deg > 180.0 + resolution_deg + SPACING_TOL {
            return Err(Error::InvalidGrid("more rows than fit between the poles".into()));
        }
        if lons.iter().any(|l| !l.is_finite() || *l < 0.0 || *l >= 360.0) {
            return Err(Error::InvalidGrid("longitudes must lie in [0, 360)".into()));
        }
        for pair in lons.windows(2) {
            let step = (pair[1] - pair[0]).rem_euclid(360.0);
            if (step - resolution_deg).abs() > SPACING_TOL {
                return Err(Error::InvalidGrid(format!(
                    "longitude spacing {step} differs from resolution {resolution_deg}"
                )));
            }
        }
        if lons.len() as f64 * resolution_deg > 360.0 + SPACING_TOL {
            return Err(Error::InvalidGrid("more columns than fit around the globe".into()));
        }
        Ok(Self { lats, lons, resolution_deg })
    }

    /// Pole-free global grid: rows south to north, columns from 0° eastward.
    pub fn global(resolution_deg: f64) -> Result<Self> {
        let h = (180.0 / resolution_deg).round() as usize;
        let w = (360.0 / resolution_deg).round() as usize;
        if ((h as f64) * resolution_deg - 180.0).abs() > SPACING_TOL
            || ((w as f64) * resolution_deg - 360.0).abs() > SPACING_TOL
        {
            return Err(Error::InvalidGrid(format!(
                "resolution {resolution_deg} does not tile the globe"
            )));
        }
        let lats = (0..h).map(|i| -90.0 + resolution_deg * (i as f64 + 0.5)).collect();
        let lons = (0..w).map(|j| resolution_deg * j as f64).collect();
        Self::new(lats, lons, resolution_deg)
    }

    pub fn lats(&self) -> &[f64] {
        &self.lats
    }

    pub fn lons(&self) -> &[f64] {
        &self.lons
    }

    pub fn resolution_deg(&self) -> f64 {
        self.resolution_deg
    }

    pub fn height(&self) -> usize {
        self.lats.len()
    }

    pub fn width(&self) -> usize {
        self.lons.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn is_global(&self) -> bool {
        (self.height() as f64 * self.resolution_deg - 180.0).abs() <= SPACING_TOL
            && (self.width() as f64 * self.resolution_deg - 360.0).abs() <= SPACING_TOL
    }

    /// Latitude band `[south, north]` of row `i`, clipped to the poles.
    fn lat_band(&self, i: usize) -> (f64, f64) {
        let half = self.resolution_deg / 2.0;
        let c = self.lats[i];
        ((c - half).max(-90.0), (c + half).min(90.0))
    }

    /// Relative cell area of each row: `sin(north) - sin(south)`.
    pub fn row_areas(&self) -> Vec<f64> {
        (0..self.height())
            .map(|i| {
                let (s, n) = self.lat_band(i);
                n.to_radians().sin() - s.to_radians().sin()
            })
            .collect()
    }

    /// Row and column indices of the cells whose centers fall inside `bbox`.
    pub fn crop_indices(&self, bbox: &BoundingBox) -> Result<CropIndex> {
        let rows: Vec<usize> = (0..self.height())
            .filter(|&i| {
                let lat = self.lats[i];
                lat >= bbox.lat_min - SPACING_TOL && lat <= bbox.lat_max + SPACING_TOL
            })
            .collect();
        if rows.is_empty() {
            return Err(Error::EmptySelection(format!("no rows inside {bbox:?}")));
        }
        let selected: Vec<bool> = self.lons.iter().map(|&lon| bbox.contains_lon(lon)).collect();
        let cols = contiguous_run(&selected, self.is_global())
            .ok_or_else(|| Error::EmptySelection(format!("columns inside {bbox:?} are not contiguous")))?;
        if cols.is_empty() {
            return Err(Error::EmptySelection(format!("no columns inside {bbox:?}")));
        }
        let lats = rows.iter().map(|&i| self.lats[i]).collect();
        let lons = cols.iter().map(|&j| self.lons[j]).collect();
        let grid = LatLonGrid::new(lats, lons, self.resolution_deg)?;
        Ok(CropIndex { rows, cols, grid })
    }
}

/// Indices of the selected entries as one contiguous run, cyclic when `wrap`.
fn contiguous_run(selected: &[bool], wrap: bool) -> Option<Vec<usize>> {
    let n = selected.len();
    let count = selected.iter().filter(|&&s| s).count();
    if count == 0 {
        return Some(Vec::new());
    }
    if count == n {
        return Some((0..n).collect());
    }
    let start = if wrap {
        (0..n).find(|&j| selected[j] && !selected[(j + n - 1) % n])?
    } else {
        (0..n).find(|&j| selected[j])?
    };
    let run: Vec<usize> = (0..count).map(|k| (start + k) % n).collect();
    if !wrap && start + count > n {
        return None;
    }
    run.iter().all(|&j| selected[j]).then_some(run)
}

/// Rows/columns picked out of a parent grid, plus the cropped descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct CropIndex {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub grid: LatLonGrid,
}

impl CropIndex {
    pub fn apply(&self, data: &Array2<f64>) -> Array2<f64> {
        Array2::from_shape_fn((self.rows.len(), self.cols.len()), |(i, j)| {
            data[[self.rows[i], self.cols[j]]]
        })
    }
}

/// Geographic box in degrees. `lon_min > lon_max` means the box wraps
/// across the prime meridian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BoundingBox {
    /// Longitudes in `[-180, 0)` are shifted into `[180, 360)`.
    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Result<Self> {
        if !(lat_min < lat_max) {
            return Err(Error::Usage(format!("bbox lat_min {lat_min} must be below lat_max {lat_max}")));
        }
        let norm = |lon: f64| if lon < 0.0 { lon + 360.0 } else { lon };
        let (lon_min, lon_max) = (norm(lon_min), norm(lon_max));
        if !(0.0..=360.0).contains(&lon_min) || !(0.0..=360.0).contains(&lon_max) {
            return Err(Error::Usage("bbox longitudes must lie in [-180, 360]".into()));
        }
        Ok(Self { lat_min, lat_max, lon_min, lon_max })
    }

    pub fn globe() -> Self {
        Self { lat_min: -90.0, lat_max: 90.0, lon_min: 0.0, lon_max: 360.0 }
    }

    /// Middle East and North Africa: an 8 x 14 block on the 5.625° grid
    /// (centers 8.44°N–47.81°N, 331.875°E–45°E).
    pub fn mena() -> Self {
        Self { lat_min: 5.0, lat_max: 48.0, lon_min: 330.0, lon_max: 48.0 }
    }

    /// 8 x 14 block over East Asia (centers 25.31°N–64.69°N, 101.25°E–174.375°E).
    pub fn east_asia() -> Self {
        Self { lat_min: 20.0, lat_max: 65.0, lon_min: 100.0, lon_max: 175.0 }
    }

    /// 8 x 14 block over North America (centers 25.31°N–64.69°N, 230.625°E–303.75°E).
    pub fn north_america() -> Self {
        Self { lat_min: 20.0, lat_max: 65.0, lon_min: 230.0, lon_max: 305.0 }
    }

    pub const PRESETS: [&'static str; 4] = ["mena", "east-asia", "north-america", "globe"];

    /// A preset name or `lat_min,lat_max,lon_min,lon_max`.
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "mena" => Ok(Self::mena()),
            "east-asia" | "eastasia" => Ok(Self::east_asia()),
            "north-america" | "northamerica" => Ok(Self::north_america()),
            "globe" | "global" => Ok(Self::globe()),
            other => {
                let parts: Vec<f64> = other
                    .split(',')
                    .map(|p| p.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Usage(format!("unknown region `{s}`; presets: {}", Self::PRESETS.join(", "))))?;
                match parts.as_slice() {
                    [a, b, c, d] => Self::new(*a, *b, *c, *d),
                    _ => Err(Error::Usage(format!("bbox `{s}` needs 4 comma-separated numbers"))),
                }
            }
        }
    }

    fn contains_lon(&self, lon: f64) -> bool {
        if self.lon_min <= self.lon_max {
            lon >= self.lon_min - SPACING_TOL && lon <= self.lon_max + SPACING_TOL
        } else {
            lon >= self.lon_min - SPACING_TOL || lon <= self.lon_max + SPACING_TOL
        }
    }
}

/// One physical variable on a grid at one time and level.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableField {
    pub name: String,
    pub level_hpa: Option<u32>,
    pub units: String,
    pub timestamp: Timestamp,
    pub grid: LatLonGrid,
    /// `[lat, lon]`
    pub data: Array2<f64>,
}

impl VariableField {
    pub fn new(
        name: impl Into<String>,
        level_hpa: Option<u32>,
        units: impl Into<String>,
        timestamp: Timestamp,
        grid: LatLonGrid,
        data: Array2<f64>,
    ) -> Result<Self> {
        if data.dim() != grid.shape() {
            return Err(Error::Shape(format!(
                "field data {:?} does not match grid {:?}",
                data.dim(),
                grid.shape()
            )));
        }
        Ok(Self { name: name.into(), level_hpa, units: units.into(), timestamp, grid, data })
    }

    fn with_data(&self, grid: LatLonGrid, data: Array2<f64>) -> Self {
        Self {
            name: self.name.clone(),
            level_hpa: self.level_hpa,
            units: self.units.clone(),
            timestamp: self.timestamp,
            grid,
            data,
        }
    }
}

/// `cos(lat_i) / mean_j cos(lat_j)` for every row.
pub fn latitude_weights(grid: &LatLonGrid) -> Result<Vec<f64>> {
    if let Some(&pole) = grid.lats().iter().find(|l| l.abs() >= 90.0) {
        return Err(Error::PoleLatitude(pole));
    }
    let cosines: Vec<f64> = grid.lats().iter().map(|l| l.to_radians().cos()).collect();
    let mean = cosines.iter().sum::<f64>() / cosines.len() as f64;
    Ok(cosines.iter().map(|c| c / mean).collect())
}

/// Interpolation used when resampling between resolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegridMethod {
    #[default]
    Conservative,
    Bilinear,
}

impl std::str::FromStr for RegridMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conservative" => Ok(Self::Conservative),
            "bilinear" => Ok(Self::Bilinear),
            _ => Err(Error::Usage(format!("unknown regrid method `{s}`"))),
        }
    }
}

pub fn regrid(field: &VariableField, dst: &LatLonGrid, method: RegridMethod) -> Result<VariableField> {
    match method {
        RegridMethod::Conservative => regrid_conservative(field, dst),
        RegridMethod::Bilinear => regrid_bilinear(field, dst),
    }
}

fn require_global(src: &LatLonGrid, dst: &LatLonGrid) -> Result<()> {
    if !src.is_global() {
        return Err(Error::UnsupportedGrid("source grid is not global".into()));
    }
    if !dst.is_global() {
        return Err(Error::UnsupportedGrid("destination grid is not global".into()));
    }
    Ok(())
}

/// Overlap of latitude bands as `sin(top) - sin(bottom)`, shape `[dst_rows, src_rows]`.
fn lat_overlaps(src: &LatLonGrid, dst: &LatLonGrid) -> Vec<Vec<(usize, f64)>> {
    (0..dst.height())
        .map(|d| {
            let (ds, dn) = dst.lat_band(d);
            (0..src.height())
                .filter_map(|s| {
                    let (ss, sn) = src.lat_band(s);
                    let lo = ds.max(ss);
                    let hi = dn.min(sn);
                    (hi > lo).then(|| (s, hi.to_radians().sin() - lo.to_radians().sin()))
                })
                .collect()
        })
        .collect()
}

/// Longitude overlap in degrees, accounting for wraparound.
fn lon_overlaps(src: &LatLonGrid, dst: &LatLonGrid) -> Vec<Vec<(usize, f64)>> {
    let sh = src.resolution_deg / 2.0;
    let dh = dst.resolution_deg / 2.0;
    (0..dst.width())
        .map(|d| {
            let (a, b) = (dst.lons[d] - dh, dst.lons[d] + dh);
            (0..src.width())
                .filter_map(|s| {
                    let overlap: f64 = [-360.0, 0.0, 360.0]
                        .iter()
                        .map(|shift| {
                            let c = src.lons[s] - sh + shift;
                            let e = src.lons[s] + sh + shift;
                            (b.min(e) - a.max(c)).max(0.0)
                        })
                        .sum();
                    (overlap > 0.0).then_some((s, overlap))
                })
                .collect()
        })
        .collect()
}

/// Weighted mean taken about the first value, so constant inputs come back
/// bit-exact.
fn shifted_mean(items: impl Iterator<Item = (f64, f64)> + Clone) -> f64 {
    let Some((_, x0)) = items.clone().next() else { return f64::NAN };
    let (mut num, mut den) = (0.0, 0.0);
    for (w, x) in items {
        num += w * (x - x0);
        den += w;
    }
    x0 + num / den
}

/// First-order conservative (area-weighted) regridding between global grids.
pub fn regrid_conservative(field: &VariableField, dst: &LatLonGrid) -> Result<VariableField> {
    let src = &field.grid;
    require_global(src, dst)?;
    if src == dst {
        return Ok(field.clone());
    }
    let lat_w = lat_overlaps(src, dst);
    let lon_w = lon_overlaps(src, dst);
    // Longitude pass first: [src_rows, dst_cols].
    let mut partial = Array2::<f64>::zeros((src.height(), dst.width()));
    for i in 0..src.height() {
        for (dj, cols) in lon_w.iter().enumerate() {
            partial[[i, dj]] = shifted_mean(cols.iter().map(|&(sj, w)| (w, field.data[[i, sj]])));
        }
    }
    let mut out = Array2::<f64>::zeros(dst.shape());
    for (di, rows) in lat_w.iter().enumerate() {
        for dj in 0..dst.width() {
            out[[di, dj]] = shifted_mean(rows.iter().map(|&(si, w)| (w, partial[[si, dj]])));
        }
    }
    Ok(field.with_data(dst.clone(), out))
}

/// Fractional row position of `lat` in `grid`, clamped to the outer centers.
fn row_position(grid: &LatLonGrid, lat: f64) -> (usize, usize, f64) {
    let h = grid.height();
    if h == 1 {
        return (0, 0, 0.0);
    }
    let step = grid.lats[1] - grid.lats[0];
    let r = ((lat - grid.lats[0]) / step).clamp(0.0, (h - 1) as f64);
    let i0 = (r.floor() as usize).min(h - 2);
    (i0, i0 + 1, r - i0 as f64)
}

/// Fractional column position of `lon` in a global grid, with wraparound.
fn col_position(grid: &LatLonGrid, lon: f64) -> (usize, usize, f64) {
    let w = grid.width();
    let c = ((lon - grid.lons[0]) / grid.resolution_deg).rem_euclid(w as f64);
    let j0 = (c.floor() as usize).min(w - 1);
    (j0, (j0 + 1) % w, c - j0 as f64)
}

/// Bilinear interpolation in (lat, lon) with longitudinal wraparound.
pub fn regrid_bilinear(field: &VariableField, dst: &LatLonGrid) -> Result<VariableField> {
    let src = &field.grid;
    require_global(src, dst)?;
    if src == dst {
        return Ok(field.clone());
    }
    let f = &field.data;
    let out = Array2::from_shape_fn(dst.shape(), |(i, j)| {
        let (i0, i1, ti) = row_position(src, dst.lats[i]);
        let (j0, j1, tj) = col_position(src, dst.lons[j]);
        let lower = (1.0 - tj) * f[[i0, j0]] + tj * f[[i0, j1]];
        let upper = (1.0 - tj) * f[[i1, j0]] + tj * f[[i1, j1]];
        (1.0 - ti) * lower + ti * upper
    });
    Ok(field.with_data(dst.clone(), out))
}

/// Contiguous sub-raster whose cell centers fall inside `bbox`.
pub fn crop_region(field: &VariableField, bbox: &BoundingBox) -> Result<VariableField> {
    let idx = field.grid.crop_indices(bbox)?;
    let data = idx.apply(&field.data);
    Ok(field.with_data(idx.grid, data))
}

/// Area-weighted global mean, used to check conservation.
pub fn area_weighted_mean(grid: &LatLonGrid, data: &Array2<f64>) -> f64 {
    let areas = grid.row_areas();
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, a) in areas.iter().enumerate() {
        for j in 0..grid.width() {
            num += a * data[[i, j]];
            den += a;
        }
    }
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t0() -> Timestamp {
        Timestamp(0)
    }

    fn field(grid: &LatLonGrid, f: impl Fn(f64, f64) -> f64) -> VariableField {
        let data = Array2::from_shape_fn(grid.shape(), |(i, j)| f(grid.lats()[i], grid.lons()[j]));
        VariableField::new("x", None, "1", t0(), grid.clone(), data).unwrap()
    }

    #[test]
    fn global_5625_is_32_by_64() {
        let g = LatLonGrid::global(5.625).unwrap();
        assert_eq!(g.shape(), (32, 64));
        assert!(g.is_global());
        assert!((g.lats()[0] + 87.1875).abs() < 1e-12);
    }

    #[test]
    fn rejects_irregular_spacing() {
        assert!(LatLonGrid::new(vec![0.0, 1.0, 3.0], vec![0.0], 1.0).is_err());
        assert!(LatLonGrid::new(vec![0.0], vec![0.0, 2.0], 1.0).is_err());
        assert!(LatLonGrid::new(vec![0.0], vec![359.0, 0.0, 1.0], 1.0).is_ok());
    }

    #[test]
    fn symmetric_two_row_weights_are_one() {
        let g = LatLonGrid::new(vec![45.0, -45.0], vec![0.0], 90.0).unwrap();
        let w = latitude_weights(&g).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-15 && (w[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn three_row_weights() {
        let g = LatLonGrid::new(vec![-60.0, 0.0, 60.0], vec![0.0], 60.0).unwrap();
        let w = latitude_weights(&g).unwrap();
        // cos = {0.5, 1, 0.5}, mean 2/3
        let expected = [0.5 / (2.0 / 3.0), 1.0 / (2.0 / 3.0), 0.5 / (2.0 / 3.0)];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!((w[1] - 1.5).abs() < 1e-12 && (w[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn pole_rows_are_rejected() {
        let g = LatLonGrid::new(vec![90.0, 80.0], vec![0.0], 10.0).unwrap();
        assert!(matches!(latitude_weights(&g), Err(Error::PoleLatitude(_))));
    }

    #[test]
    fn weights_reverse_with_rows() {
        let g = LatLonGrid::global(5.625).unwrap();
        let mut rev = g.lats().to_vec();
        rev.reverse();
        let gr = LatLonGrid::new(rev, g.lons().to_vec(), 5.625).unwrap();
        let a = latitude_weights(&g).unwrap();
        let mut b = latitude_weights(&gr).unwrap();
        b.reverse();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn conservative_constant_and_identity() {
        let fine = LatLonGrid::global(0.75).unwrap();
        let coarse = LatLonGrid::global(5.625).unwrap();
        let c = field(&fine, |_, _| 3.25);
        let out = regrid_conservative(&c, &coarse).unwrap();
        assert!(out.data.iter().all(|&v| (v - 3.25).abs() < 1e-13));
        let g = field(&coarse, |lat, lon| lat.sin() + lon.cos());
        let same = regrid_conservative(&g, &coarse).unwrap();
        assert_eq!(same.data, g.data);
    }

    #[test]
    fn conservative_rejects_regional_grids() {
        let g = LatLonGrid::global(5.625).unwrap();
        let f = field(&g, |_, _| 1.0);
        let regional = crop_region(&f, &BoundingBox::mena()).unwrap();
        assert!(matches!(
            regrid_conservative(&regional, &g),
            Err(Error::UnsupportedGrid(_))
        ));
        assert!(matches!(regrid_bilinear(&f, &regional.grid), Err(Error::UnsupportedGrid(_))));
    }

    #[test]
    fn conservative_preserves_mean_between_non_nested_grids() {
        // 2.5° and 5.625° cell edges do not align.
        let src = LatLonGrid::global(2.5).unwrap();
        let dst = LatLonGrid::global(5.625).unwrap();
        let f = field(&src, |lat, lon| (3.0 * lat.to_radians()).sin() * lon.to_radians().cos() + 2.0);
        let out = regrid_conservative(&f, &dst).unwrap();
        let before = area_weighted_mean(&src, &f.data);
        let after = area_weighted_mean(&dst, &out.data);
        assert!((before - after).abs() < 1e-12, "{before} vs {after}");
    }

    #[test]
    fn bilinear_reproduces_affine_fields_away_from_seam() {
        let src = LatLonGrid::global(2.5).unwrap();
        let dst = LatLonGrid::global(5.625).unwrap();
        let f = field(&src, |lat, lon| 0.3 * lat - 0.02 * lon + 1.0);
        let out = regrid_bilinear(&f, &dst).unwrap();
        let max_src_lat = src.lats().iter().cloned().fold(f64::MIN, f64::max);
        let max_src_lon = *src.lons().last().unwrap();
        for (i, &lat) in dst.lats().iter().enumerate() {
            if lat.abs() > max_src_lat {
                continue;
            }
            for (j, &lon) in dst.lons().iter().enumerate() {
                if lon > max_src_lon {
                    continue;
                }
                let expect = 0.3 * lat - 0.02 * lon + 1.0;
                assert!((out.data[[i, j]] - expect).abs() < 1e-11, "({lat},{lon})");
            }
        }
    }

    #[test]
    fn bilinear_constant_field() {
        let src = LatLonGrid::global(5.625).unwrap();
        let dst = LatLonGrid::global(2.5).unwrap();
        let out = regrid_bilinear(&field(&src, |_, _| -7.5), &dst).unwrap();
        assert!(out.data.iter().all(|&v| (v + 7.5).abs() < 1e-13));
    }

    #[test]
    fn mena_crop_is_8_by_14() {
        let g = LatLonGrid::global(5.625).unwrap();
        let f = field(&g, |lat, lon| lat * 1000.0 + lon);
        let c = crop_region(&f, &BoundingBox::mena()).unwrap();
        assert_eq!(c.data.dim(), (8, 14));
        assert_eq!(c.grid.lons()[0], 331.875);
        assert_eq!(c.grid.lons()[13], 45.0);
        assert!((c.grid.lats()[0] - 8.4375).abs() < 1e-12);
        assert_eq!(c.data[[0, 5]], 8.4375 * 1000.0);
    }

    #[test]
    fn presets_share_the_regional_shape() {
        let g = LatLonGrid::global(5.625).unwrap();
        for bbox in [BoundingBox::east_asia(), BoundingBox::north_america()] {
            let idx = g.crop_indices(&bbox).unwrap();
            // Count of centers inside the box, by direct enumeration.
            let rows = g.lats().iter().filter(|&&l| l >= bbox.lat_min && l <= bbox.lat_max).count();
            let cols = g.lons().iter().filter(|&&l| l >= bbox.lon_min && l <= bbox.lon_max).count();
            assert_eq!((idx.rows.len(), idx.cols.len()), (rows, cols));
            assert_eq!((rows, cols), (8, 14));
        }
    }

    #[test]
    fn globe_crop_is_identity_and_empty_crop_errors() {
        let g = LatLonGrid::global(5.625).unwrap();
        let f = field(&g, |lat, lon| lat + lon);
        assert_eq!(crop_region(&f, &BoundingBox::globe()).unwrap(), f);
        let empty = BoundingBox::new(1.0, 2.0, 10.0, 11.0).unwrap();
        assert!(matches!(crop_region(&f, &empty), Err(Error::EmptySelection(_))));
    }

    #[test]
    fn nested_crops_compose() {
        let g = LatLonGrid::global(5.625).unwrap();
        let f = field(&g, |lat, lon| lat * 7.0 - lon);
        let outer = crop_region(&f, &BoundingBox::mena()).unwrap();
        let inner_box = BoundingBox::new(10.0, 30.0, 350.0, 20.0).unwrap();
        let twice = crop_region(&outer, &inner_box).unwrap();
        let once = crop_region(&f, &inner_box).unwrap();
        assert_eq!(twice, once);
    }

    #[test]
    fn bbox_parsing() {
        assert_eq!(BoundingBox::parse("MENA").unwrap(), BoundingBox::mena());
        let b = BoundingBox::parse("10,20,-30,15").unwrap();
        assert_eq!(b.lon_min, 330.0);
        assert!(BoundingBox::parse("atlantis").is_err());
        assert!(BoundingBox::new(5.0, 5.0, 0.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn latitude_weights_average_to_one(rows in 1usize..40, offset in 0usize..8) {
            let res = 180.0 / (rows + offset) as f64;
            let lats: Vec<f64> = (0..rows).map(|i| -90.0 + res * (i as f64 + 0.5)).collect();
            let g = LatLonGrid::new(lats, vec![0.0], res).unwrap();
            let w = latitude_weights(&g).unwrap();
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            prop_assert!((mean - 1.0).abs() < 1e-12);
        }

        #[test]
        fn conservative_regrid_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, k in 1u32..5) {
            let src = LatLonGrid::global(2.8125).unwrap();
            let dst = LatLonGrid::global(5.625).unwrap();
            let f = field(&src, |lat, lon| (k as f64 * lat.to_radians()).cos() + lon / 360.0);
            let g = field(&src, |lat, lon| lat.to_radians().sin() * (lon.to_radians() * k as f64).sin());
            let mut combo = f.clone();
            combo.data = &f.data * a + &g.data * b;
            let lhs = regrid_conservative(&combo, &dst).unwrap().data;
            let rf = regrid_conservative(&f, &dst).unwrap().data;
            let rg = regrid_conservative(&g, &dst).unwrap().data;
            let rhs = &rf * a + &rg * b;
            let scale = lhs.iter().chain(rhs.iter()).fold(1.0f64, |m, v| m.max(v.abs()));
            for (x, y) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() <= 1e-12 * scale);
            }
        }
    }
}
