//! Latitude-weighted MAE / RMSE and the combined objective
//!
//! ```text
//! L = W_lat · MAE(weather) + W_freq · W_lat · MAE(air quality)
//! ```
//!
//! The weather term is the latitude-weighted mean absolute error averaged
//! over weather channels. For every air-quality channel the chemical term is
//! `Σ W_freq W_lat |e| / Σ W_freq W_lat` (0 when the weights sum to 0),
//! averaged over channels; [`Normalization::PlainMean`] divides by the pixel
//! count instead. Frequency weights are looked up from raw target values and
//! never depend on predictions.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::histo::FrequencyTables;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Frequency-weighted MAE on air-quality channels.
    #[default]
    Fmae,
    /// Latitude-weighted MAE everywhere.
    Mae,
}

impl std::str::FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fmae" => Ok(Self::Fmae),
            "mae" => Ok(Self::Mae),
            _ => Err(Error::Usage(format!("unknown loss mode `{s}` (fmae|mae)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide weighted absolute errors by the sum of weights.
    #[default]
    WeightedMean,
    /// Divide by the number of pixels.
    PlainMean,
}

impl std::str::FromStr for Normalization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted_mean" => Ok(Self::WeightedMean),
            "plain_mean" => Ok(Self::PlainMean),
            _ => Err(Error::Usage(format!("unknown loss normalization `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub weather_term: f64,
    pub chemical_term: f64,
    pub weather_channels: Vec<f64>,
    pub chemical_channels: Vec<f64>,
}

fn check_same(a: &Array3<f64>, b: &Array3<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn check_lat(a: &Array3<f64>, lat_w: &[f64]) -> Result<()> {
    if a.dim().1 != lat_w.len() {
        return Err(Error::Shape(format!("{} latitude weights for {} rows", lat_w.len(), a.dim().1)));
    }
    Ok(())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean over channels, rows and columns of `W_lat[i] · |pred - target|`.
pub fn lat_weighted_mae(pred: &Array3<f64>, target: &Array3<f64>, lat_w: &[f64]) -> Result<f64> {
    check_same(pred, target, "lat_weighted_mae")?;
    check_lat(pred, lat_w)?;
    let n = pred.len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = ndarray::Zip::indexed(pred)
        .and(target)
        .fold(0.0, |acc, (_, i, _), p, t| acc + lat_w[i] * (p - t).abs());
    Ok(sum / n as f64)
}

/// Per channel `sqrt(mean over pixels of W_lat · (pred - target)^2)`.
pub fn lat_weighted_rmse(pred: &Array3<f64>, target: &Array3<f64>, lat_w: &[f64]) -> Result<Vec<f64>> {
    check_same(pred, target, "lat_weighted_rmse")?;
    check_lat(pred, lat_w)?;
    let (c, h, w) = pred.dim();
    Ok((0..c)
        .map(|k| {
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..w {
                    let e = pred[[k, i, j]] - target[[k, i, j]];
                    acc += lat_w[i] * e * e;
                }
            }
            (acc / (h * w) as f64).sqrt()
        })
        .collect())
}

/// Unweighted per-channel RMSE.
pub fn rmse(pred: &Array3<f64>, target: &Array3<f64>) -> Result<Vec<f64>> {
    let ones = vec![1.0; pred.dim().1];
    lat_weighted_rmse(pred, target, &ones)
}

/// Per-pixel frequency weights of raw air-quality targets.
pub fn freq_weights(tables: &FrequencyTables, channels: &[String], raw_target: &Array3<f64>) -> Result<Array3<f64>> {
    if channels.len() != raw_target.dim().0 {
        return Err(Error::Shape(format!(
            "{} channel names for {} target channels",
            channels.len(),
            raw_target.dim().0
        )));
    }
    let mut out = Array3::zeros(raw_target.dim());
    for (c, name) in channels.iter().enumerate() {
        let table = tables.require(name)?;
        for (o, &v) in out.index_axis_mut(ndarray::Axis(0), c).iter_mut().zip(raw_target.index_axis(ndarray::Axis(0), c)) {
            *o = table.weight(v)?;
        }
    }
    Ok(out)
}

/// Predictions and targets in model space, split by family.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub pred_weather: &'a Array3<f64>,
    pub pred_aq: &'a Array3<f64>,
    pub target_weather: &'a Array3<f64>,
    pub target_aq: &'a Array3<f64>,
    pub lat_weights: &'a [f64],
    /// Per-pixel frequency weights, same shape as `target_aq`.
    pub freq_weights: &'a Array3<f64>,
}

#[derive(Debug, Clone)]
pub struct LossGradients {
    pub weather: Array3<f64>,
    pub aq: Array3<f64>,
}

fn compute(inp: &LossInputs<'_>, norm: Normalization, want_grad: bool) -> Result<(LossBreakdown, Option<LossGradients>)> {
    check_same(inp.pred_weather, inp.target_weather, "weather")?;
    check_same(inp.pred_aq, inp.target_aq, "air quality")?;
    check_same(inp.pred_aq, inp.freq_weights, "frequency weights")?;
    let lat = inp.lat_weights;
    let (cw, hw, ww) = inp.pred_weather.dim();
    let (ca, ha, wa) = inp.pred_aq.dim();
    if cw > 0 {
        check_lat(inp.pred_weather, lat)?;
    }
    if ca > 0 {
        check_lat(inp.pred_aq, lat)?;
    }
    let mut grad_w = want_grad.then(|| Array3::zeros(inp.pred_weather.dim()));
    let mut grad_a = want_grad.then(|| Array3::zeros(inp.pred_aq.dim()));

    let pixels_w = (hw * ww) as f64;
    let mut weather_channels = Vec::with_capacity(cw);
    for c in 0..cw {
        let mut acc = 0.0;
        for i in 0..hw {
            for j in 0..ww {
                let e = inp.pred_weather[[c, i, j]] - inp.target_weather[[c, i, j]];
                acc += lat[i] * e.abs();
                if let Some(g) = grad_w.as_mut() {
                    g[[c, i, j]] = lat[i] * sign(e) / (pixels_w * cw as f64);
                }
            }
        }
        weather_channels.push(acc / pixels_w);
    }

    let pixels_a = (ha * wa) as f64;
    let mut chemical_channels = Vec::with_capacity(ca);
    for c in 0..ca {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..ha {
            for j in 0..wa {
                let w = inp.freq_weights[[c, i, j]] * lat[i];
                num += w * (inp.pred_aq[[c, i, j]] - inp.target_aq[[c, i, j]]).abs();
                den += w;
            }
        }
        let divisor = match norm {
            Normalization::WeightedMean => den,
            Normalization::PlainMean => pixels_a,
        };
        let term = if divisor > 0.0 { num / divisor } else { 0.0 };
        chemical_channels.push(term);
        if let (Some(g), true) = (grad_a.as_mut(), divisor > 0.0) {
            for i in 0..ha {
                for j in 0..wa {
                    let w = inp.freq_weights[[c, i, j]] * lat[i];
                    let e = inp.pred_aq[[c, i, j]] - inp.target_aq[[c, i, j]];
                    g[[c, i, j]] = w * sign(e) / (divisor * ca as f64);
                }
            }
        }
    }

    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let weather_term = mean(&weather_channels);
    let chemical_term = mean(&chemical_channels);
    let breakdown = LossBreakdown {
        total: weather_term + chemical_term,
        weather_term,
        chemical_term,
        weather_channels,
        chemical_channels,
    };
    let grads = match (grad_w, grad_a) {
        (Some(weather), Some(aq)) => Some(LossGradients { weather, aq }),
        _ => None,
    };
    Ok((breakdown, grads))
}

pub fn fmae_loss(inp: &LossInputs<'_>, norm: Normalization) -> Result<LossBreakdown> {
    Ok(compute(inp, norm, false)?.0)
}

/// Loss plus its (sub)gradient with respect to both prediction tensors.
pub fn fmae_loss_grad(inp: &LossInputs<'_>, norm: Normalization) -> Result<(LossBreakdown, LossGradients)> {
    let (b, g) = compute(inp, norm, true)?;
    Ok((b, g.expect("gradient requested")))
}

/// Convenience form: frequency weights looked up from `raw_target_aq`.
#[allow(clippy::too_many_arguments)]
pub fn fmae_loss_with_tables(
    pred_weather: &Array3<f64>,
    pred_aq: &Array3<f64>,
    target_weather: &Array3<f64>,
    target_aq: &Array3<f64>,
    raw_target_aq: &Array3<f64>,
    aq_channels: &[String],
    lat_weights: &[f64],
    tables: &FrequencyTables,
    norm: Normalization,
) -> Result<LossBreakdown> {
    let fw = freq_weights(tables, aq_channels, raw_target_aq)?;
    fmae_loss(
        &LossInputs {
            pred_weather,
            pred_aq,
            target_weather,
            target_aq,
            lat_weights,
            freq_weights: &fw,
        },
        norm,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::histo::FrequencyTable;
    use rand::{Rng, SeedableRng};

    fn rand3(rng: &mut impl Rng, shape: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_fn(shape, |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn mae_reference_points() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let a = rand3(&mut rng, (2, 3, 4));
        let lat = vec![1.0; 3];
        assert_eq!(lat_weighted_mae(&a, &a, &lat).unwrap(), 0.0);
        let b = a.mapv(|v| v + 0.75);
        assert!((lat_weighted_mae(&a, &b, &lat).unwrap() - 0.75).abs() < 1e-15);
        assert!(lat_weighted_mae(&a, &b, &[1.0; 2]).is_err());
        let c = rand3(&mut rng, (2, 3, 5));
        assert!(matches!(lat_weighted_mae(&a, &c, &lat), Err(Error::Shape(_))));
    }

    #[test]
    fn rmse_reference_points() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let a = rand3(&mut rng, (3, 2, 2));
        let lat = vec![1.0, 1.0];
        assert!(lat_weighted_rmse(&a, &a, &lat).unwrap().iter().all(|&v| v == 0.0));
        let b = a.mapv(|v| v - 1.5);
        for v in lat_weighted_rmse(&a, &b, &lat).unwrap() {
            assert!((v - 1.5).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_weight_channel_contributes_nothing() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let p = rand3(&mut rng, (1, 2, 2));
        let t = rand3(&mut rng, (1, 2, 2));
        let empty = Array3::zeros((0, 2, 2));
        let fw = Array3::zeros((1, 2, 2));
        let inp = LossInputs {
            pred_weather: &empty,
            pred_aq: &p,
            target_weather: &empty,
            target_aq: &t,
            lat_weights: &[1.0, 1.0],
            freq_weights: &fw,
        };
        let (b, g) = fmae_loss_grad(&inp, Normalization::WeightedMean).unwrap();
        assert_eq!(b.chemical_term, 0.0);
        assert_eq!(b.total, 0.0);
        assert!(g.aq.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_table_is_reported() {
        let tables = FrequencyTables {
            tables: vec![FrequencyTable::build("pm2p5", &[1.0, 2.0, 3.0, 4.0], 0.8).unwrap()],
        };
        let raw = Array3::from_elem((2, 1, 1), 2.0);
        let err = freq_weights(&tables, &["pm2p5".into(), "pm10".into()], &raw).unwrap_err();
        assert!(matches!(err, Error::MissingTable(ref c) if c == "pm10"));
    }

    #[test]
    fn breakdown_sums_and_zero_error_subgradient() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let pw = rand3(&mut rng, (2, 3, 3));
        let pa = rand3(&mut rng, (2, 3, 3));
        let fw = Array3::from_shape_fn((2, 3, 3), |_| rng.random_range(0.0..2.0));
        let lat = [0.8, 1.1, 1.1];
        let inp = LossInputs {
            pred_weather: &pw,
            pred_aq: &pa,
            target_weather: &pw,
            target_aq: &pa.mapv(|v| v + 0.1),
            lat_weights: &lat,
            freq_weights: &fw,
        };
        let (b, g) = fmae_loss_grad(&inp, Normalization::WeightedMean).unwrap();
        assert!((b.total - b.weather_term - b.chemical_term).abs() < 1e-12);
        assert_eq!(b.weather_term, 0.0);
        assert!(g.weather.iter().all(|&v| v == 0.0));
        assert!(b.chemical_term > 0.0);
    }
}
