//! Cross-module invariants as property tests.

use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pmcast::align::catalog::VariableCatalog;
use pmcast::align::samples::YearRange;
use pmcast::align::{build_samples, interpolate_hourly};
use pmcast::dataset::ChannelStack;
use pmcast::eval::{error_map, evaluate, EvalOptions, Persistence};
use pmcast::grid::{crop_region, latitude_weights, BoundingBox, LatLonGrid, VariableField};
use pmcast::histo::{FrequencyTable, FrequencyTables};
use pmcast::loss::{fmae_loss, fmae_loss_grad, freq_weights, LossInputs, Normalization};
use pmcast::model::checkpoint::{from_bytes, to_bytes, CheckpointHeader};
use pmcast::model::{patchify, unpatchify, Activation, Model, ModelConfig};
use pmcast::time::Timestamp;
use pmcast::transform::{AqTransform, NormStats};

fn rand3(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_fn(shape, |_| rng.random_range(-2.0..2.0))
}

fn t0() -> Timestamp {
    Timestamp::from_ymdh(2017, 1, 1, 0).unwrap()
}

struct LossCase {
    pw: Array3<f64>,
    tw: Array3<f64>,
    pa: Array3<f64>,
    ta: Array3<f64>,
    raw: Array3<f64>,
    names: Vec<String>,
    tables: FrequencyTables,
    lat: Vec<f64>,
}

fn loss_case(seed: u64, ca: usize) -> LossCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (4, 6);
    let ta = rand3(&mut rng, (ca, h, w));
    let raw = ta.mapv(|x| 1e-8 * (2.0 * x).exp());
    let names: Vec<String> = (0..ca).map(|k| format!("c{k}")).collect();
    let tables = FrequencyTables {
        tables: names
            .iter()
            .enumerate()
            .map(|(k, n)| {
                let v: Vec<f64> = raw.index_axis(ndarray::Axis(0), k).iter().map(|x| x * (1.0 + k as f64)).collect();
                FrequencyTable::build(n.clone(), &v, 0.8).unwrap()
            })
            .collect(),
    };
    LossCase {
        pw: rand3(&mut rng, (2, h, w)),
        tw: rand3(&mut rng, (2, h, w)),
        pa: rand3(&mut rng, (ca, h, w)),
        ta,
        raw,
        names,
        tables,
        lat: (0..h).map(|i| 0.6 + 0.25 * i as f64).collect(),
    }
}

fn total(c: &LossCase, pa: &Array3<f64>, ta: &Array3<f64>, fw: &Array3<f64>) -> f64 {
    let inp = LossInputs {
        pred_weather: &c.pw,
        pred_aq: pa,
        target_weather: &c.tw,
        target_aq: ta,
        lat_weights: &c.lat,
        freq_weights: fw,
    };
    fmae_loss(&inp, Normalization::WeightedMean).unwrap().total
}

fn permute(a: &Array3<f64>, order: &[usize]) -> Array3<f64> {
    let mut out = a.clone();
    for (k, &src) in order.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), k).assign(&a.index_axis(ndarray::Axis(0), src));
    }
    out
}

fn ramp_stack(grid: LatLonGrid, names: &[&str], hours: i64, mut f: impl FnMut(i64, usize, usize) -> f32) -> ChannelStack {
    let cat = VariableCatalog::builtin();
    let chans: Vec<_> = names.iter().map(|n| cat.channel(n).unwrap()).collect();
    let px = grid.height() * grid.width();
    let mut data = Vec::new();
    for t in 0..hours {
        for c in 0..chans.len() {
            for p in 0..px {
                data.push(f(t, c, p));
            }
        }
    }
    let ts = (0..hours).map(|k| t0().add_hours(k)).collect();
    ChannelStack::new(grid, ts, chans, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn latitude_weights_follow_row_reversal(rows in 2usize..30, res_k in 1u32..4) {
        let res = 120.0 / (rows as f64 * res_k as f64);
        let lats: Vec<f64> = (0..rows).map(|i| -60.0 + res * (i as f64 + 0.5)).collect();
        let mut rev = lats.clone();
        rev.reverse();
        let a = latitude_weights(&LatLonGrid::new(lats, vec![0.0, res], res).unwrap()).unwrap();
        let b = latitude_weights(&LatLonGrid::new(rev, vec![0.0, res], res).unwrap()).unwrap();
        for i in 0..rows {
            prop_assert!((a[i] - b[rows - 1 - i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn nested_crops_equal_inner_crop(la in -60.0f64..0.0, dla in 30.0f64..60.0, lo in 0.0f64..300.0, dlo in 40.0f64..60.0, shrink in 3.0f64..10.0) {
        let g = LatLonGrid::global(5.625).unwrap();
        let data = Array2::from_shape_fn(g.shape(), |(i, j)| (i * 100 + j) as f64);
        let f = VariableField::new("t2m", None, "K", t0(), g, data).unwrap();
        let outer = BoundingBox::new(la, la + dla, lo, lo + dlo).unwrap();
        let inner = BoundingBox::new(la + shrink, la + dla - shrink, lo + shrink, lo + dlo - shrink).unwrap();
        let twice = crop_region(&crop_region(&f, &outer).unwrap(), &inner).unwrap();
        let once = crop_region(&f, &inner).unwrap();
        prop_assert_eq!(twice.data, once.data);
        prop_assert_eq!(twice.grid, once.grid);
    }

    #[test]
    fn hourly_interpolation_keeps_originals(seed in 0u64..1000, n in 2usize..8) {
        let g = LatLonGrid::global(45.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let series: Vec<VariableField> = (0..n)
            .map(|k| {
                let d = Array2::from_shape_fn(g.shape(), |_| rng.random_range(-1e3..1e3));
                VariableField::new("co", None, "kg kg**-1", t0().add_hours(3 * k as i64), g.clone(), d).unwrap()
            })
            .collect();
        let out = interpolate_hourly(&series).unwrap();
        for (k, f) in series.iter().enumerate() {
            prop_assert_eq!(&out[3 * k], f);
        }
    }

    #[test]
    fn sample_assembly_is_reproducible(stride in 1usize..6, lead in 1u32..30) {
        let s = ramp_stack(LatLonGrid::global(45.0).unwrap(), &["t2m"], 60, |t, _, p| (t * 3 + p as i64) as f32);
        let anchors: Vec<usize> = (0..60).step_by(stride).collect();
        let a = build_samples(&s, &anchors, &[lead, 6], YearRange::new(2017, 2017));
        let b = build_samples(&s, &anchors, &[6, lead], YearRange::new(2017, 2017));
        prop_assert_eq!(&a, &b);
        prop_assert!(a.samples.iter().all(|r| r.target == r.input + r.lead_time_hours as usize));
    }

    #[test]
    fn aq_transform_round_trip(seed in 0u64..1000) {
        // Raw concentrations whose display value (ug m-3) is at least 1e-4.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = ramp_stack(LatLonGrid::global(45.0).unwrap(), &["pm2p5", "t2m"], 6, |_, c, _| {
            if c == 0 { 10f32.powf(rng.random_range(-13.0..-6.0)) } else { rng.random_range(250.0..300.0) }
        });
        for aq in [AqTransform::LogThenZscore, AqTransform::LogOnly] {
            let norm = NormStats::fit(&s, &[0, 1, 2, 3], aq).unwrap();
            for t in 0..6 {
                let x = s.frame(t);
                let back = norm.invert(&norm.apply(&x).unwrap()).unwrap();
                for (a, b) in x.iter().zip(back.iter()) {
                    prop_assert!((a - b).abs() <= 1e-10 * a.abs(), "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn loss_invariant_to_channel_order(seed in 0u64..1000, rot in 0usize..3) {
        let c = loss_case(seed, 3);
        let fw = freq_weights(&c.tables, &c.names, &c.raw).unwrap();
        let base = total(&c, &c.pa, &c.ta, &fw);
        let order: Vec<usize> = (0..3).map(|k| (k + rot) % 3).collect();
        let names: Vec<String> = order.iter().map(|&k| c.names[k].clone()).collect();
        let fwp = freq_weights(&c.tables, &names, &permute(&c.raw, &order)).unwrap();
        let moved = total(&c, &permute(&c.pa, &order), &permute(&c.ta, &order), &fwp);
        prop_assert!((base - moved).abs() <= 1e-12 * base.abs());
    }

    #[test]
    fn chemical_weights_ignore_predictions(seed in 0u64..1000) {
        let c = loss_case(seed, 2);
        let fw = freq_weights(&c.tables, &c.names, &c.raw).unwrap();
        let other = c.pa.mapv(|x| 3.0 * x + 0.5);
        let grads = |pa: &Array3<f64>| {
            let inp = LossInputs {
                pred_weather: &c.pw,
                pred_aq: pa,
                target_weather: &c.tw,
                target_aq: &c.ta,
                lat_weights: &c.lat,
                freq_weights: &fw,
            };
            fmae_loss_grad(&inp, Normalization::WeightedMean).unwrap().1.aq
        };
        let (g1, g2) = (grads(&c.pa), grads(&other));
        for ((a, b), ((p, q), t)) in g1.iter().zip(g2.iter()).zip(c.pa.iter().zip(other.iter()).zip(c.ta.iter())) {
            if p != t && q != t {
                prop_assert!((a.abs() - b.abs()).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn error_map_is_linear(seed in 0u64..1000, a in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, g, t) = (rand3(&mut rng, (2, 3, 4)), rand3(&mut rng, (2, 3, 4)), rand3(&mut rng, (2, 3, 4)));
        let lhs = error_map(&(&f * a + &g), &t).unwrap();
        let rhs = error_map(&f, &t).unwrap() * a + error_map(&g, &t).unwrap() + &t * a;
        for (x, y) in lhs.iter().zip(rhs.iter()) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn single_latitude_rmse_is_unweighted(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = LatLonGrid::new(vec![37.5], (0..8).map(|k| 5.0 * k as f64).collect(), 5.0).unwrap();
        let s = ramp_stack(grid, &["t2m", "pm10"], 30, |_, _, _| rng.random_range(0.0..5.0));
        let r = evaluate(&Persistence, &s, &EvalOptions { leads: vec![6, 12], years: YearRange::new(2017, 2017), ..EvalOptions::default() }).unwrap();
        for l in &r.leads {
            for c in &l.channels {
                prop_assert!((c.rmse - c.rmse_lat_weighted).abs() <= 1e-12 * c.rmse.max(1e-300));
            }
        }
    }

    #[test]
    fn patch_round_trip(c in 1usize..4, hp in 1usize..4, wp in 1usize..5, p in 1usize..4, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array3::from_shape_fn((c, hp * p, wp * p), |_| rng.random_range(-1.0..1.0));
        let back = unpatchify(&patchify(&x, p).unwrap(), c, hp * p, wp * p, p).unwrap();
        prop_assert_eq!(back, x);
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let cfg = ModelConfig {
        patch_size: 2,
        embed_dim: 8,
        depth: 2,
        num_heads: 2,
        mlp_ratio: 2,
        weather_channels: 2,
        aq_channels: 1,
        height: 4,
        width: 6,
        lead_embed_dim: 4,
        seed: 9,
        activation: Activation::GeluTanh,
    };
    let mut model = Model::new(cfg.clone()).unwrap();
    pmcast::model::checkpoint::round_to_f32(&mut model.params);
    let header = CheckpointHeader::new(cfg, vec!["u10".into(), "v10".into(), "pm2p5".into()]);
    let (h2, back) = from_bytes(&to_bytes(&header, &model.params).unwrap()).unwrap();
    assert_eq!(h2.config, header.config);
    let x = rand3(&mut ChaCha8Rng::seed_from_u64(1), (3, 4, 6));
    assert_eq!(model.predict(&x, 24).unwrap(), back.predict(&x, 24).unwrap());
}
