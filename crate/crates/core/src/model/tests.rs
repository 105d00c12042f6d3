use super::*;
use crate::histo::FrequencyTable;
use crate::histo::FrequencyTables;
use crate::loss::{fmae_loss, fmae_loss_grad, freq_weights, LossInputs, Normalization};
use rand::{Rng, SeedableRng};

fn tiny() -> ModelConfig {
    ModelConfig {
        patch_size: 2,
        embed_dim: 8,
        depth: 1,
        num_heads: 2,
        mlp_ratio: 2,
        weather_channels: 1,
        aq_channels: 2,
        height: 4,
        width: 4,
        lead_embed_dim: 4,
        seed: 7,
        activation: Activation::GeluTanh,
    }
}

fn rand3(rng: &mut impl Rng, shape: (usize, usize, usize), scale: f64) -> Array3<f64> {
    Array3::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0) * scale)
}

/// Larger-than-init weights so every path carries signal.
fn perturbed(cfg: ModelConfig, seed: u64) -> Model {
    let mut m = Model::new(cfg).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for p in &mut m.params.params {
        for v in &mut p.value {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    m
}

struct Problem {
    input: Array3<f64>,
    tw: Array3<f64>,
    ta: Array3<f64>,
    fw: Array3<f64>,
    lat: Vec<f64>,
}

fn problem(cfg: &ModelConfig) -> Problem {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let (h, w) = (cfg.height, cfg.width);
    let input = rand3(&mut rng, (cfg.n_vars(), h, w), 1.5);
    let tw = rand3(&mut rng, (cfg.weather_channels, h, w), 2.0);
    let ta = rand3(&mut rng, (cfg.aq_channels, h, w), 2.0);
    let raw = ta.mapv(|x| x.exp());
    let names: Vec<String> = (0..cfg.aq_channels).map(|i| format!("a{i}")).collect();
    let tables = FrequencyTables {
        tables: names
            .iter()
            .map(|n| {
                let vals: Vec<f64> = raw.iter().copied().chain((0..40).map(|k| 0.2 + k as f64 * 0.01)).collect();
                FrequencyTable::build(n.clone(), &vals, 0.8).unwrap()
            })
            .collect(),
    };
    let fw = freq_weights(&tables, &names, &raw).unwrap();
    let lat: Vec<f64> = (0..h).map(|i| 0.7 + 0.2 * i as f64).collect();
    Problem { input, tw, ta, fw, lat }
}

fn loss_of(m: &Model, pr: &Problem, lead: u32) -> f64 {
    let f = m.predict(&pr.input, lead).unwrap();
    fmae_loss(
        &LossInputs {
            pred_weather: &f.weather,
            pred_aq: &f.aq,
            target_weather: &pr.tw,
            target_aq: &pr.ta,
            lat_weights: &pr.lat,
            freq_weights: &pr.fw,
        },
        Normalization::WeightedMean,
    )
    .unwrap()
    .total
}

fn analytic(m: &Model, pr: &Problem, lead: u32) -> Gradients {
    let (f, tape) = m.forward_tape(&pr.input, lead).unwrap();
    let (_, g) = fmae_loss_grad(
        &LossInputs {
            pred_weather: &f.weather,
            pred_aq: &f.aq,
            target_weather: &pr.tw,
            target_aq: &pr.ta,
            lat_weights: &pr.lat,
            freq_weights: &pr.fw,
        },
        Normalization::WeightedMean,
    )
    .unwrap();
    m.backward_tape(&tape, &g.weather, &g.aq).unwrap()
}

/// Relative error with an absolute floor for gradients near zero.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

#[test]
fn gradients_match_central_differences() {
    let cfg = tiny();
    let model = perturbed(cfg.clone(), 3);
    let pr = problem(&cfg);
    let g = analytic(&model, &pr, 12);
    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    for (pi, p) in model.params.params.iter().enumerate() {
        for k in 0..p.len() {
            let mut mp = model.clone();
            mp.params.params[pi].value[k] += h;
            let mut mm = model.clone();
            mm.params.params[pi].value[k] -= h;
            let fd = (loss_of(&mp, &pr, 12) - loss_of(&mm, &pr, 12)) / (2.0 * h);
            let e = rel_err(g.0[pi][k], fd);
            if e > worst.0 {
                worst = (e, format!("{}[{k}] analytic {} fd {fd}", p.name, g.0[pi][k]));
            }
        }
    }
    assert!(worst.0 <= 1e-4, "worst relative error {:.3e} at {}", worst.0, worst.1);
}

#[test]
fn loss_scaling_scales_gradients() {
    let cfg = tiny();
    let model = perturbed(cfg.clone(), 4);
    let pr = problem(&cfg);
    let (f, tape) = model.forward_tape(&pr.input, 6).unwrap();
    let gw = f.weather.mapv(|x| x.sin());
    let ga = f.aq.mapv(|x| x.cos());
    let g1 = model.backward_tape(&tape, &gw, &ga).unwrap();
    let g3 = model.backward_tape(&tape, &(gw.clone() * 3.0), &(ga.clone() * 3.0)).unwrap();
    for (a, b) in g1.flat().iter().zip(g3.flat()) {
        assert!((3.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

#[test]
fn backward_without_forward_fails() {
    let mut tm = TrainableModel::new(Model::new(tiny()).unwrap());
    let z = Array3::zeros((1, 4, 4));
    let za = Array3::zeros((2, 4, 4));
    assert!(matches!(tm.backward(&z, &za), Err(Error::NoForwardCache)));
    tm.forward(&Array3::zeros((3, 4, 4)), 6).unwrap();
    tm.backward(&z, &za).unwrap();
    assert!(matches!(tm.backward(&z, &za), Err(Error::NoForwardCache)));
}

#[test]
fn forward_is_deterministic_and_pure() {
    let cfg = tiny();
    let pr = problem(&cfg);
    let before = pr.input.clone();
    let a = Model::new(cfg.clone()).unwrap().predict(&pr.input, 24).unwrap();
    let b = Model::new(cfg).unwrap().predict(&pr.input, 24).unwrap();
    assert_eq!(a, b);
    assert_eq!(pr.input, before);
}

#[test]
fn token_counts() {
    let mut cfg = ModelConfig::desk(1, 2, 8, 14);
    assert_eq!(cfg.n_tokens(), 28);
    cfg.height = 32;
    cfg.width = 64;
    assert_eq!(cfg.n_tokens(), 512);
    let m = Model::new(tiny()).unwrap();
    let t = m.tokenize_variables(&Array3::zeros((3, 4, 4))).unwrap();
    assert_eq!(t.dim(), (3, 4, 8));
    assert!(t.iter().all(|&x| x == 0.0));
}

#[test]
fn indivisible_raster_is_rejected() {
    let mut cfg = tiny();
    cfg.width = 5;
    assert!(matches!(Model::new(cfg), Err(Error::Shape(_))));
    let mut cfg = tiny();
    cfg.embed_dim = 9;
    assert!(Model::new(cfg).is_err());
}

#[test]
fn single_variable_aggregation_is_value_projection() {
    let mut cfg = tiny();
    cfg.weather_channels = 0;
    cfg.aq_channels = 1;
    let m = perturbed(cfg.clone(), 5);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let tokens = rand3(&mut rng, (1, 4, 8), 1.0);
    let (out, att) = m.aggregate_variables(&tokens).unwrap();
    assert!(att.iter().all(|&a| a == 1.0));
    let wv = &m.params.get("var_agg.wv").unwrap().value;
    let bv = &m.params.get("var_agg.bv").unwrap().value;
    for n in 0..4 {
        for o in 0..8 {
            let want: f64 = bv[o] + (0..8).map(|i| wv[o * 8 + i] * tokens[[0, n, i]]).sum::<f64>();
            assert!((out[[n, o]] - want).abs() < 1e-14);
        }
    }
}

#[test]
fn aggregation_weights_sum_to_one() {
    let m = perturbed(tiny(), 6);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let tokens = rand3(&mut rng, (3, 4, 8), 2.0);
    let (out, att) = m.aggregate_variables(&tokens).unwrap();
    assert_eq!(out.dim(), (4, 8));
    for n in 0..4 {
        for h in 0..2 {
            let s: f64 = (0..3).map(|v| att[[n, h, v]]).sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }
    assert!(m.aggregate_variables(&Array3::zeros((0, 4, 8))).is_err());
}

#[test]
fn aggregation_is_permutation_invariant() {
    let cfg = tiny();
    let m = perturbed(cfg.clone(), 8);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let input = rand3(&mut rng, (3, 4, 4), 1.0);
    let perm = [2usize, 0, 1];
    let permuted_input = Array3::from_shape_fn((3, 4, 4), |(v, i, j)| input[[perm[v], i, j]]);
    let mut mp = m.clone();
    for name in ["token_embed.weight", "token_embed.bias"] {
        let orig = m.params.get(name).unwrap().value.clone();
        let per = orig.len() / 3;
        let dst = &mut mp.params.get_mut(name).unwrap().value;
        for v in 0..3 {
            dst[v * per..(v + 1) * per].copy_from_slice(&orig[perm[v] * per..(perm[v] + 1) * per]);
        }
    }
    let (a, _) = m.aggregate_variables(&m.tokenize_variables(&input).unwrap()).unwrap();
    let (b, _) = mp.aggregate_variables(&mp.tokenize_variables(&permuted_input).unwrap()).unwrap();
    for (x, y) in a.iter().zip(b.iter()) {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn lead_time_changes_encoding() {
    let m = Model::new(tiny()).unwrap();
    let seq = Array2::from_shape_fn((4, 8), |(i, j)| (i as f64 - j as f64) * 0.1);
    let a = m.encode(&seq, 6).unwrap();
    let b = m.encode(&seq, 24).unwrap();
    assert_eq!(a.dim(), (4, 8));
    assert_ne!(a, b);
    assert!(m.encode(&seq, 0).is_err());
}

#[test]
fn depth_zero_is_embeddings_only() {
    let mut cfg = tiny();
    cfg.depth = 0;
    let m = perturbed(cfg, 9);
    let seq = Array2::from_shape_fn((4, 8), |(i, j)| (i * 8 + j) as f64 * 0.01);
    let enc = m.encode(&seq, 12).unwrap();
    let (_, _, _, le) = m.lead_embedding(12);
    let pos = &m.params.get("pos_embed").unwrap().value;
    for n in 0..4 {
        for d in 0..8 {
            assert_eq!(enc[[n, d]], seq[[n, d]] + pos[n * 8 + d] + le[d]);
        }
    }
}

#[test]
fn zero_heads_give_bias_rasters() {
    let mut m = Model::new(tiny()).unwrap();
    for name in ["head_weather.weight", "head_aq.weight"] {
        m.params.get_mut(name).unwrap().value.iter_mut().for_each(|v| *v = 0.0);
    }
    m.params.get_mut("head_weather.bias").unwrap().value.iter_mut().for_each(|v| *v = 1.5);
    m.params.get_mut("head_aq.bias").unwrap().value.iter_mut().for_each(|v| *v = -0.5);
    let f = m.decode_dual(&Array2::zeros((4, 8)), 6).unwrap();
    assert_eq!(f.weather.dim(), (1, 4, 4));
    assert_eq!(f.aq.dim(), (2, 4, 4));
    assert!(f.weather.iter().all(|&x| x == 1.5));
    assert!(f.aq.iter().all(|&x| x == -0.5));
}

#[test]
fn unpatch_inverts_patch() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let x = rand3(&mut rng, (3, 8, 14), 5.0);
    let p = patchify(&x, 2).unwrap();
    assert_eq!(unpatchify(&p, 3, 8, 14, 2).unwrap(), x);
    assert!(patchify(&x, 4).is_err());
}

#[test]
fn parameter_count_closed_form() {
    for (vw, va, depth, d, heads, p, h, w, l, r) in [
        (1, 2, 1, 8, 2, 2, 4, 4, 4, 2),
        (9, 3, 2, 32, 4, 2, 8, 14, 16, 2),
        (0, 3, 0, 16, 4, 1, 3, 5, 8, 4),
    ] {
        let cfg = ModelConfig {
            patch_size: p,
            embed_dim: d,
            depth,
            num_heads: heads,
            mlp_ratio: r,
            weather_channels: vw,
            aq_channels: va,
            height: h,
            width: w,
            lead_embed_dim: l,
            seed: 0,
            activation: Activation::GeluTanh,
        };
        let v = vw + va;
        let n = (h / p) * (w / p);
        let m = r * d;
        let block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (m * d + m) + (d * m + d);
        let want = v * d * p * p + v * d
            + d
            + 2 * (d * d + d)
            + n * d
            + 2 * l
            + d * l
            + d
            + depth * block
            + (p * p * v) * d
            + p * p * v;
        assert_eq!(cfg.num_params(), want);
        assert_eq!(Model::new(cfg).unwrap().params.num_scalars(), want);
    }
}
