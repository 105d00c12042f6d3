//! Vision-transformer forecaster with a hand-written backward pass.
//!
//! Pipeline per sample: per-variable patch embedding, cross-attention over
//! variables at each patch position, positional and lead-time embeddings,
//! pre-norm encoder blocks, then two linear heads (weather, air quality)
//! that are un-patched back to rasters.
//!
//! All arithmetic is `f64` and single-threaded per sample, so a forward pass
//! is bitwise reproducible.

pub mod checkpoint;
pub mod layers;
pub mod params;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use layers::{AttentionCache, AttentionGrads, LayerNormCache};
pub use params::{Gradients, Init, Param, ParamStore};

pub const INIT_STD: f64 = 0.02;
/// Lead time is fed to the embedding MLP in days.
pub const LEAD_SCALE_HOURS: f64 = 24.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    GeluTanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    /// MLP hidden width = `mlp_ratio * embed_dim`.
    pub mlp_ratio: usize,
    pub weather_channels: usize,
    pub aq_channels: usize,
    pub height: usize,
    pub width: usize,
    pub lead_embed_dim: usize,
    pub seed: u64,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelConfig {
    /// Desk-scale defaults for an `height x width` raster.
    pub fn desk(weather_channels: usize, aq_channels: usize, height: usize, width: usize) -> Self {
        Self {
            patch_size: 2,
            embed_dim: 32,
            depth: 2,
            num_heads: 4,
            mlp_ratio: 2,
            weather_channels,
            aq_channels,
            height,
            width,
            lead_embed_dim: 16,
            seed: 42,
            activation: Activation::GeluTanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Usage(m));
        if self.patch_size == 0 || self.embed_dim == 0 || self.num_heads == 0 || self.lead_embed_dim == 0 {
            return bad("patch_size, embed_dim, num_heads and lead_embed_dim must be positive".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        if self.height == 0 || self.width == 0 {
            return bad("input raster is empty".into());
        }
        if self.height % self.patch_size != 0 || self.width % self.patch_size != 0 {
            return Err(Error::Shape(format!(
                "{}x{} raster is not divisible by patch size {}",
                self.height, self.width, self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.n_vars() == 0 {
            return Err(Error::EmptySelection("model has no input variables".into()));
        }
        Ok(())
    }

    pub fn n_vars(&self) -> usize {
        self.weather_channels + self.aq_channels
    }

    pub fn n_tokens(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    pub fn patch_area(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }

    /// Parameter tensors in creation order: name, shape, init, decay.
    fn tensor_specs(&self) -> Vec<(String, Vec<usize>, Init, bool)> {
        let (v, d, p2, n, l, m) = (
            self.n_vars(),
            self.embed_dim,
            self.patch_area(),
            self.n_tokens(),
            self.lead_embed_dim,
            self.mlp_hidden(),
        );
        let w = Init::TruncNormal(INIT_STD);
        let mut s: Vec<(String, Vec<usize>, Init, bool)> = vec![
            ("token_embed.weight".into(), vec![v, d, p2], w, true),
            ("token_embed.bias".into(), vec![v, d], Init::Zeros, false),
            ("var_agg.query".into(), vec![d], w, false),
            ("var_agg.wk".into(), vec![d, d], w, true),
            ("var_agg.bk".into(), vec![d], Init::Zeros, false),
            ("var_agg.wv".into(), vec![d, d], w, true),
            ("var_agg.bv".into(), vec![d], Init::Zeros, false),
            ("pos_embed".into(), vec![n, d], w, false),
            ("lead_embed.w1".into(), vec![l, 1], w, true),
            ("lead_embed.b1".into(), vec![l], Init::Zeros, false),
            ("lead_embed.w2".into(), vec![d, l], w, true),
            ("lead_embed.b2".into(), vec![d], Init::Zeros, false),
        ];
        for b in 0..self.depth {
            let p = |x: &str| format!("blocks.{b}.{x}");
            s.extend([
                (p("ln1.gamma"), vec![d], Init::Ones, false),
                (p("ln1.beta"), vec![d], Init::Zeros, false),
                (p("attn.wqkv"), vec![3 * d, d], w, true),
                (p("attn.bqkv"), vec![3 * d], Init::Zeros, false),
                (p("attn.wo"), vec![d, d], w, true),
                (p("attn.bo"), vec![d], Init::Zeros, false),
                (p("ln2.gamma"), vec![d], Init::Ones, false),
                (p("ln2.beta"), vec![d], Init::Zeros, false),
                (p("mlp.w1"), vec![m, d], w, true),
                (p("mlp.b1"), vec![m], Init::Zeros, false),
                (p("mlp.w2"), vec![d, m], w, true),
                (p("mlp.b2"), vec![d], Init::Zeros, false),
            ]);
        }
        s.extend([
            ("head_weather.weight".into(), vec![p2 * self.weather_channels, d], w, true),
            ("head_weather.bias".into(), vec![p2 * self.weather_channels], Init::Zeros, false),
            ("head_aq.weight".into(), vec![p2 * self.aq_channels, d], w, true),
            ("head_aq.bias".into(), vec![p2 * self.aq_channels], Init::Zeros, false),
        ]);
        s
    }

    pub fn num_params(&self) -> usize {
        self.tensor_specs().iter().map(|(_, s, _, _)| s.iter().product::<usize>()).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    ln1_g: usize,
    ln1_b: usize,
    wqkv: usize,
    bqkv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    mlp_w1: usize,
    mlp_b1: usize,
    mlp_w2: usize,
    mlp_b2: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    tok_w: usize,
    tok_b: usize,
    agg_q: usize,
    agg_wk: usize,
    agg_bk: usize,
    agg_wv: usize,
    agg_bv: usize,
    pos: usize,
    lead_w1: usize,
    lead_b1: usize,
    lead_w2: usize,
    lead_b2: usize,
    blocks: Vec<BlockIds>,
    head_w_w: usize,
    head_w_b: usize,
    head_a_w: usize,
    head_a_b: usize,
}

impl Layout {
    fn resolve(cfg: &ModelConfig, store: &ParamStore) -> Result<Self> {
        for (name, shape, _, _) in cfg.tensor_specs() {
            match store.get(&name) {
                Some(p) if p.shape == shape && p.value.len() == shape.iter().product::<usize>() => {}
                Some(p) => {
                    return Err(Error::Shape(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        p.shape
                    )))
                }
                None => return Err(Error::Data(format!("missing parameter `{name}`"))),
            }
        }
        let id = |n: &str| store.index(n).expect("checked above");
        Ok(Self {
            tok_w: id("token_embed.weight"),
            tok_b: id("token_embed.bias"),
            agg_q: id("var_agg.query"),
            agg_wk: id("var_agg.wk"),
            agg_bk: id("var_agg.bk"),
            agg_wv: id("var_agg.wv"),
            agg_bv: id("var_agg.bv"),
            pos: id("pos_embed"),
            lead_w1: id("lead_embed.w1"),
            lead_b1: id("lead_embed.b1"),
            lead_w2: id("lead_embed.w2"),
            lead_b2: id("lead_embed.b2"),
            blocks: (0..cfg.depth)
                .map(|b| {
                    let p = |x: &str| id(&format!("blocks.{b}.{x}"));
                    BlockIds {
                        ln1_g: p("ln1.gamma"),
                        ln1_b: p("ln1.beta"),
                        wqkv: p("attn.wqkv"),
                        bqkv: p("attn.bqkv"),
                        wo: p("attn.wo"),
                        bo: p("attn.bo"),
                        ln2_g: p("ln2.gamma"),
                        ln2_b: p("ln2.beta"),
                        mlp_w1: p("mlp.w1"),
                        mlp_b1: p("mlp.b1"),
                        mlp_w2: p("mlp.w2"),
                        mlp_b2: p("mlp.b2"),
                    }
                })
                .collect(),
            head_w_w: id("head_weather.weight"),
            head_w_b: id("head_weather.bias"),
            head_a_w: id("head_aq.weight"),
            head_a_b: id("head_aq.bias"),
        })
    }
}

/// Model output in normalized space.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    /// `[V_w, H, W]`
    pub weather: Array3<f64>,
    /// `[V_a, H, W]`
    pub aq: Array3<f64>,
    pub lead_time_hours: u32,
}

impl Forecast {
    pub fn is_finite(&self) -> bool {
        self.weather.iter().chain(self.aq.iter()).all(|x| x.is_finite())
    }

    /// Weather channels followed by air-quality channels.
    pub fn stacked(&self) -> Array3<f64> {
        ndarray::concatenate(ndarray::Axis(0), &[self.weather.view(), self.aq.view()]).expect("same raster shape")
    }
}

struct BlockTape {
    ln1_out: Vec<f64>,
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2_out: Vec<f64>,
    ln2: LayerNormCache,
    m1: Vec<f64>,
    g: Vec<f64>,
}

/// Activations saved by one forward pass.
pub struct Tape {
    /// `[N, V * p^2]`
    patches: Vec<f64>,
    /// rows `v * N + n`, width D
    tokens: Vec<f64>,
    keys: Vec<f64>,
    values: Vec<f64>,
    /// `[N, heads, V]`
    agg_att: Vec<f64>,
    lead_s: f64,
    lead_pre: Vec<f64>,
    lead_h: Vec<f64>,
    blocks: Vec<BlockTape>,
    encoded: Vec<f64>,
    lead_time_hours: u32,
}

/// Rearranges `[C, H, W]` into `[N, C * p^2]` with element index
/// `c * p^2 + py * p + px` inside each token.
pub fn patchify(x: &Array3<f64>, p: usize) -> Result<Vec<f64>> {
    let (c, h, w) = x.dim();
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!("{h}x{w} raster is not divisible by patch size {p}")));
    }
    let (gh, gw, p2) = (h / p, w / p, p * p);
    let mut out = vec![0.0; gh * gw * c * p2];
    for gy in 0..gh {
        for gx in 0..gw {
            let n = gy * gw + gx;
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        out[n * c * p2 + ch * p2 + py * p + px] = x[[ch, gy * p + py, gx * p + px]];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &[f64], c: usize, h: usize, w: usize, p: usize) -> Result<Array3<f64>> {
    if p == 0 || h % p != 0 || w % p != 0 || tokens.len() != c * h * w {
        return Err(Error::Shape(format!(
            "cannot un-patch {} values into [{c}, {h}, {w}] with patch {p}",
            tokens.len()
        )));
    }
    let (gw, p2) = (w / p, p * p);
    Ok(Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        let n = (y / p) * gw + x / p;
        tokens[n * c * p2 + ch * p2 + (y % p) * p + x % p]
    }))
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

/// Stateful wrapper keeping the tape of the last forward pass.
pub struct TrainableModel {
    pub model: Model,
    tape: Option<Tape>,
}

impl Model {
    /// Fresh model initialized deterministically from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::default();
        for (name, shape, init, decay) in config.tensor_specs() {
            params.push(&name, &shape, init, decay, &mut rng);
        }
        let layout = Layout::resolve(&config, &params)?;
        Ok(Self { config, params, layout })
    }

    /// Wraps existing parameters; names and shapes must match `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = Layout::resolve(&config, &params)?;
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn p(&self, id: usize) -> &[f64] {
        &self.params.params[id].value
    }

    fn check_input(&self, input: &Array3<f64>) -> Result<()> {
        let c = &self.config;
        let want = (c.n_vars(), c.height, c.width);
        if input.dim() != want {
            return Err(Error::Shape(format!("model input {:?}, expected {want:?}", input.dim())));
        }
        if input.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("model input".into()))
        }
    }

    fn tokenize(&self, patches: &[f64]) -> Vec<f64> {
        let c = &self.config;
        let (v, n, d, p2) = (c.n_vars(), c.n_tokens(), c.embed_dim, c.patch_area());
        let (w, b) = (self.p(self.layout.tok_w), self.p(self.layout.tok_b));
        let mut tokens = vec![0.0; v * n * d];
        for vi in 0..v {
            for ni in 0..n {
                let patch = &patches[ni * v * p2 + vi * p2..ni * v * p2 + (vi + 1) * p2];
                let row = &mut tokens[(vi * n + ni) * d..(vi * n + ni + 1) * d];
                for (di, r) in row.iter_mut().enumerate() {
                    let wr = &w[(vi * d + di) * p2..(vi * d + di + 1) * p2];
                    *r = b[vi * d + di] + wr.iter().zip(patch).map(|(a, x)| a * x).sum::<f64>();
                }
            }
        }
        tokens
    }

    /// Returns (sequence `[N, D]`, keys, values, attention `[N, heads, V]`).
    fn aggregate(&self, tokens: &[f64], v: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let c = &self.config;
        let (n, d, heads) = (c.n_tokens(), c.embed_dim, c.num_heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let l = &self.layout;
        let keys = layers::linear(tokens, self.p(l.agg_wk), self.p(l.agg_bk), v * n, d, d);
        let values = layers::linear(tokens, self.p(l.agg_wv), self.p(l.agg_bv), v * n, d, d);
        let q = self.p(l.agg_q);
        let mut att = vec![0.0; n * heads * v];
        let mut out = vec![0.0; n * d];
        for ni in 0..n {
            for h in 0..heads {
                let a = &mut att[(ni * heads + h) * v..(ni * heads + h + 1) * v];
                for (vi, s) in a.iter_mut().enumerate() {
                    let k = &keys[(vi * n + ni) * d + h * dh..(vi * n + ni) * d + (h + 1) * dh];
                    *s = q[h * dh..(h + 1) * dh].iter().zip(k).map(|(x, y)| x * y).sum::<f64>() * scale;
                }
                layers::softmax(a);
                for vi in 0..v {
                    let val = &values[(vi * n + ni) * d + h * dh..(vi * n + ni) * d + (h + 1) * dh];
                    for k in 0..dh {
                        out[ni * d + h * dh + k] += a[vi] * val[k];
                    }
                }
            }
        }
        (out, keys, values, att)
    }

    fn lead_embedding(&self, lead_time_hours: u32) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
        let (l, d) = (self.config.lead_embed_dim, self.config.embed_dim);
        let s = lead_time_hours as f64 / LEAD_SCALE_HOURS;
        let (w1, b1) = (self.p(self.layout.lead_w1), self.p(self.layout.lead_b1));
        let pre: Vec<f64> = (0..l).map(|i| w1[i] * s + b1[i]).collect();
        let h: Vec<f64> = pre.iter().map(|&x| layers::gelu(x)).collect();
        let e = layers::linear(&h, self.p(self.layout.lead_w2), self.p(self.layout.lead_b2), 1, l, d);
        (s, pre, h, e)
    }

    fn run_encoder(&self, seq: &[f64], lead_time_hours: u32) -> Result<(Vec<f64>, f64, Vec<f64>, Vec<f64>, Vec<BlockTape>)> {
        if lead_time_hours == 0 {
            return Err(Error::Usage("lead time must be positive".into()));
        }
        let c = &self.config;
        let (n, d, heads, m) = (c.n_tokens(), c.embed_dim, c.num_heads, c.mlp_hidden());
        let (s, pre, hl, le) = self.lead_embedding(lead_time_hours);
        let pos = self.p(self.layout.pos);
        let mut x: Vec<f64> = (0..n * d).map(|i| seq[i] + pos[i] + le[i % d]).collect();
        check_finite(&x, "encoder input embedding")?;
        let mut tapes = Vec::with_capacity(c.depth);
        for (bi, ids) in self.layout.blocks.iter().enumerate() {
            let (ln1_out, ln1) = layers::layer_norm(&x, self.p(ids.ln1_g), self.p(ids.ln1_b), n, d);
            let (a, attn) = layers::self_attention(
                &ln1_out,
                self.p(ids.wqkv),
                self.p(ids.bqkv),
                self.p(ids.wo),
                self.p(ids.bo),
                n,
                d,
                heads,
            );
            let h: Vec<f64> = x.iter().zip(&a).map(|(u, v)| u + v).collect();
            let (ln2_out, ln2) = layers::layer_norm(&h, self.p(ids.ln2_g), self.p(ids.ln2_b), n, d);
            let m1 = layers::linear(&ln2_out, self.p(ids.mlp_w1), self.p(ids.mlp_b1), n, d, m);
            let g: Vec<f64> = m1.iter().map(|&v| layers::gelu(v)).collect();
            let m2 = layers::linear(&g, self.p(ids.mlp_w2), self.p(ids.mlp_b2), n, m, d);
            let out: Vec<f64> = h.iter().zip(&m2).map(|(u, v)| u + v).collect();
            check_finite(&out, &format!("encoder block {bi}"))?;
            tapes.push(BlockTape { ln1_out, ln1, attn, ln2_out, ln2, m1, g });
            x = out;
        }
        Ok((x, s, pre, hl, tapes))
    }

    fn decode(&self, encoded: &[f64], lead_time_hours: u32) -> Result<Forecast> {
        let c = &self.config;
        let (n, d, p2) = (c.n_tokens(), c.embed_dim, c.patch_area());
        let l = &self.layout;
        let yw = layers::linear(encoded, self.p(l.head_w_w), self.p(l.head_w_b), n, d, p2 * c.weather_channels);
        let ya = layers::linear(encoded, self.p(l.head_a_w), self.p(l.head_a_b), n, d, p2 * c.aq_channels);
        Ok(Forecast {
            weather: unpatchify(&yw, c.weather_channels, c.height, c.width, c.patch_size)?,
            aq: unpatchify(&ya, c.aq_channels, c.height, c.width, c.patch_size)?,
            lead_time_hours,
        })
    }

    /// Per-variable patch embedding: `[V, H, W]` to `[V, N, D]`.
    pub fn tokenize_variables(&self, input: &Array3<f64>) -> Result<Array3<f64>> {
        self.check_input(input)?;
        let c = &self.config;
        let patches = patchify(input, c.patch_size)?;
        let tokens = self.tokenize(&patches);
        Ok(Array3::from_shape_vec((c.n_vars(), c.n_tokens(), c.embed_dim), tokens).expect("sized above"))
    }

    /// Cross-attention of a learned query over the variable tokens at each
    /// position. Returns the `[N, D]` sequence and the `[N, heads, V]`
    /// attention weights.
    pub fn aggregate_variables(&self, tokens: &Array3<f64>) -> Result<(Array2<f64>, Array3<f64>)> {
        let c = &self.config;
        let (v, n, d) = tokens.dim();
        if v == 0 {
            return Err(Error::EmptySelection("no variable tokens to aggregate".into()));
        }
        if n != c.n_tokens() || d != c.embed_dim {
            return Err(Error::Shape(format!("tokens [{v}, {n}, {d}] do not match config")));
        }
        let flat: Vec<f64> = tokens.iter().copied().collect();
        check_finite(&flat, "variable tokens")?;
        let (out, _, _, att) = self.aggregate(&flat, v);
        Ok((
            Array2::from_shape_vec((n, d), out).expect("sized"),
            Array3::from_shape_vec((n, c.num_heads, v), att).expect("sized"),
        ))
    }

    /// Embeddings plus encoder blocks.
    pub fn encode(&self, sequence: &Array2<f64>, lead_time_hours: u32) -> Result<Array2<f64>> {
        let c = &self.config;
        if sequence.dim() != (c.n_tokens(), c.embed_dim) {
            return Err(Error::Shape(format!("sequence {:?} does not match config", sequence.dim())));
        }
        let flat: Vec<f64> = sequence.iter().copied().collect();
        let (x, ..) = self.run_encoder(&flat, lead_time_hours)?;
        Ok(Array2::from_shape_vec((c.n_tokens(), c.embed_dim), x).expect("sized"))
    }

    pub fn decode_dual(&self, encoded: &Array2<f64>, lead_time_hours: u32) -> Result<Forecast> {
        let c = &self.config;
        if encoded.dim() != (c.n_tokens(), c.embed_dim) {
            return Err(Error::Shape(format!("encoded {:?} does not match config", encoded.dim())));
        }
        let flat: Vec<f64> = encoded.iter().copied().collect();
        check_finite(&flat, "encoded sequence")?;
        self.decode(&flat, lead_time_hours)
    }

    /// Forward pass returning the tape needed by [`Model::backward_tape`].
    pub fn forward_tape(&self, input: &Array3<f64>, lead_time_hours: u32) -> Result<(Forecast, Tape)> {
        self.check_input(input)?;
        let c = &self.config;
        let patches = patchify(input, c.patch_size)?;
        let tokens = self.tokenize(&patches);
        let (seq, keys, values, agg_att) = self.aggregate(&tokens, c.n_vars());
        let (encoded, lead_s, lead_pre, lead_h, blocks) = self.run_encoder(&seq, lead_time_hours)?;
        let forecast = self.decode(&encoded, lead_time_hours)?;
        if !forecast.is_finite() {
            return Err(Error::NonFinite("decoder output".into()));
        }
        let tape = Tape {
            patches,
            tokens,
            keys,
            values,
            agg_att,
            lead_s,
            lead_pre,
            lead_h,
            blocks,
            encoded,
            lead_time_hours,
        };
        Ok((forecast, tape))
    }

    /// Inference; reentrant.
    pub fn predict(&self, input: &Array3<f64>, lead_time_hours: u32) -> Result<Forecast> {
        Ok(self.forward_tape(input, lead_time_hours)?.0)
    }

    /// Exact gradients of a scalar loss given its gradient with respect to
    /// both output rasters.
    pub fn backward_tape(&self, tape: &Tape, grad_weather: &Array3<f64>, grad_aq: &Array3<f64>) -> Result<Gradients> {
        let c = &self.config;
        let (v, n, d, p2, heads, m) = (
            c.n_vars(),
            c.n_tokens(),
            c.embed_dim,
            c.patch_area(),
            c.num_heads,
            c.mlp_hidden(),
        );
        let l = &self.layout;
        if grad_weather.dim() != (c.weather_channels, c.height, c.width) || grad_aq.dim() != (c.aq_channels, c.height, c.width) {
            return Err(Error::Shape("loss gradient does not match forecast shape".into()));
        }
        let mut g = Gradients::zeros_like(&self.params);
        let mut take = |id: usize| std::mem::take(&mut g.0[id]);

        // Heads.
        let dyw = patchify(grad_weather, c.patch_size)?;
        let dya = patchify(grad_aq, c.patch_size)?;
        let (mut hww, mut hwb, mut haw, mut hab) = (take(l.head_w_w), take(l.head_w_b), take(l.head_a_w), take(l.head_a_b));
        let mut dx = layers::linear_backward(&dyw, &tape.encoded, self.p(l.head_w_w), &mut hww, &mut hwb, n, d, p2 * c.weather_channels, true)
            .expect("dx requested");
        let dx_a = layers::linear_backward(&dya, &tape.encoded, self.p(l.head_a_w), &mut haw, &mut hab, n, d, p2 * c.aq_channels, true)
            .expect("dx requested");
        for (a, b) in dx.iter_mut().zip(&dx_a) {
            *a += b;
        }
        let mut restore = vec![(l.head_w_w, hww), (l.head_w_b, hwb), (l.head_a_w, haw), (l.head_a_b, hab)];

        // Encoder blocks, last to first. `dx` is the gradient of the block output.
        for (ids, bt) in l.blocks.iter().zip(&tape.blocks).rev() {
            let mut gw2 = take(ids.mlp_w2);
            let mut gb2 = take(ids.mlp_b2);
            let dg = layers::linear_backward(&dx, &bt.g, self.p(ids.mlp_w2), &mut gw2, &mut gb2, n, m, d, true).expect("dx");
            let dm1: Vec<f64> = dg.iter().zip(&bt.m1).map(|(a, &z)| a * layers::gelu_grad(z)).collect();
            let mut gw1 = take(ids.mlp_w1);
            let mut gb1 = take(ids.mlp_b1);
            let dln2 = layers::linear_backward(&dm1, &bt.ln2_out, self.p(ids.mlp_w1), &mut gw1, &mut gb1, n, d, m, true).expect("dx");
            let mut gg2 = take(ids.ln2_g);
            let mut gbe2 = take(ids.ln2_b);
            let dh_ln = layers::layer_norm_backward(&dln2, &bt.ln2, self.p(ids.ln2_g), &mut gg2, &mut gbe2, n, d);
            let dh: Vec<f64> = dx.iter().zip(&dh_ln).map(|(a, b)| a + b).collect();
            let (mut gq, mut gbq, mut go, mut gbo) = (take(ids.wqkv), take(ids.bqkv), take(ids.wo), take(ids.bo));
            let dln1 = layers::self_attention_backward(
                &dh,
                &bt.ln1_out,
                &bt.attn,
                self.p(ids.wqkv),
                self.p(ids.wo),
                AttentionGrads {
                    w_qkv: &mut gq,
                    b_qkv: &mut gbq,
                    w_out: &mut go,
                    b_out: &mut gbo,
                },
                n,
                d,
                heads,
            );
            let mut gg1 = take(ids.ln1_g);
            let mut gbe1 = take(ids.ln1_b);
            let dx_ln = layers::layer_norm_backward(&dln1, &bt.ln1, self.p(ids.ln1_g), &mut gg1, &mut gbe1, n, d);
            dx = dh.iter().zip(&dx_ln).map(|(a, b)| a + b).collect();
            restore.extend([
                (ids.mlp_w2, gw2),
                (ids.mlp_b2, gb2),
                (ids.mlp_w1, gw1),
                (ids.mlp_b1, gb1),
                (ids.ln2_g, gg2),
                (ids.ln2_b, gbe2),
                (ids.wqkv, gq),
                (ids.bqkv, gbq),
                (ids.wo, go),
                (ids.bo, gbo),
                (ids.ln1_g, gg1),
                (ids.ln1_b, gbe1),
            ]);
        }

        // Embeddings: dx now is the gradient of agg + pos + lead.
        let gpos = dx.clone();
        let mut dle = vec![0.0; d];
        for row in dx.chunks(d) {
            for (a, b) in dle.iter_mut().zip(row) {
                *a += b;
            }
        }
        let lw = c.lead_embed_dim;
        let mut glw2 = take(l.lead_w2);
        let mut glb2 = take(l.lead_b2);
        let dh = layers::linear_backward(&dle, &tape.lead_h, self.p(l.lead_w2), &mut glw2, &mut glb2, 1, lw, d, true).expect("dx");
        let mut glw1 = take(l.lead_w1);
        let mut glb1 = take(l.lead_b1);
        for i in 0..lw {
            let dp = dh[i] * layers::gelu_grad(tape.lead_pre[i]);
            glw1[i] += dp * tape.lead_s;
            glb1[i] += dp;
        }
        restore.extend([(l.pos, gpos), (l.lead_w2, glw2), (l.lead_b2, glb2), (l.lead_w1, glw1), (l.lead_b1, glb1)]);

        // Variable aggregation.
        let dh_ = d / heads;
        let scale = 1.0 / (dh_ as f64).sqrt();
        let q = self.p(l.agg_q);
        let mut gq = take(l.agg_q);
        let mut dkeys = vec![0.0; v * n * d];
        let mut dvals = vec![0.0; v * n * d];
        for ni in 0..n {
            for h in 0..heads {
                let a = &tape.agg_att[(ni * heads + h) * v..(ni * heads + h + 1) * v];
                let dout = &dx[ni * d + h * dh_..ni * d + (h + 1) * dh_];
                let mut da = vec![0.0; v];
                for vi in 0..v {
                    let off = (vi * n + ni) * d + h * dh_;
                    let mut s = 0.0;
                    for k in 0..dh_ {
                        s += dout[k] * tape.values[off + k];
                        dvals[off + k] += a[vi] * dout[k];
                    }
                    da[vi] = s;
                }
                let ds = layers::softmax_backward(a, &da);
                for vi in 0..v {
                    let off = (vi * n + ni) * d + h * dh_;
                    let gs = ds[vi] * scale;
                    for k in 0..dh_ {
                        gq[h * dh_ + k] += gs * tape.keys[off + k];
                        dkeys[off + k] += gs * q[h * dh_ + k];
                    }
                }
            }
        }
        let (mut gwk, mut gbk, mut gwv, mut gbv) = (take(l.agg_wk), take(l.agg_bk), take(l.agg_wv), take(l.agg_bv));
        let mut dtok = layers::linear_backward(&dkeys, &tape.tokens, self.p(l.agg_wk), &mut gwk, &mut gbk, v * n, d, d, true).expect("dx");
        let dtok_v = layers::linear_backward(&dvals, &tape.tokens, self.p(l.agg_wv), &mut gwv, &mut gbv, v * n, d, d, true).expect("dx");
        for (a, b) in dtok.iter_mut().zip(&dtok_v) {
            *a += b;
        }
        restore.extend([(l.agg_q, gq), (l.agg_wk, gwk), (l.agg_bk, gbk), (l.agg_wv, gwv), (l.agg_bv, gbv)]);

        // Token embedding.
        let mut gtw = take(l.tok_w);
        let mut gtb = take(l.tok_b);
        for vi in 0..v {
            for ni in 0..n {
                let patch = &tape.patches[ni * v * p2 + vi * p2..ni * v * p2 + (vi + 1) * p2];
                let drow = &dtok[(vi * n + ni) * d..(vi * n + ni + 1) * d];
                for (di, &gd) in drow.iter().enumerate() {
                    gtb[vi * d + di] += gd;
                    let gw = &mut gtw[(vi * d + di) * p2..(vi * d + di + 1) * p2];
                    for (a, x) in gw.iter_mut().zip(patch) {
                        *a += gd * x;
                    }
                }
            }
        }
        restore.extend([(l.tok_w, gtw), (l.tok_b, gtb)]);

        for (id, buf) in restore {
            g.0[id] = buf;
        }
        Ok(g)
    }
}

impl Tape {
    pub fn lead_time_hours(&self) -> u32 {
        self.lead_time_hours
    }
}

impl TrainableModel {
    pub fn new(model: Model) -> Self {
        Self { model, tape: None }
    }

    /// Forward pass that keeps the tape for the next [`TrainableModel::backward`].
    pub fn forward(&mut self, input: &Array3<f64>, lead_time_hours: u32) -> Result<Forecast> {
        let (f, tape) = self.model.forward_tape(input, lead_time_hours)?;
        self.tape = Some(tape);
        Ok(f)
    }

    /// Accumulates parameter gradients for the last forward pass and
    /// consumes its tape.
    pub fn backward(&mut self, grad_weather: &Array3<f64>, grad_aq: &Array3<f64>) -> Result<()> {
        let tape = self.tape.take().ok_or(Error::NoForwardCache)?;
        let g = self.model.backward_tape(&tape, grad_weather, grad_aq)?;
        self.model.params.accumulate(&g)
    }
}

#[cfg(test)]
mod tests;
