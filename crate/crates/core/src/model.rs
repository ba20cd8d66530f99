//! Probe models: a frozen toy ViT backbone, a frozen upsampler, a trainable
//! click encoder and a trainable segmentation head.
//!
//! Images of any size are padded by edge replication to a multiple of the
//! patch size and the logits are cropped back, so callers always see
//! `[1, H, W]` for an `H x W` input.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clicks::{encode_clicks, ClickState, DiskMapConfig};
use crate::data::{read_tensor_file, write_tensor_file, TensorMap};
use crate::tensor::{Float, Graph, Param, ResamplePlan, Tensor, Var};
use crate::upsample::{pca_visualize, FeatureMap, FeatureSource, JbuConfig, UpsamplePlan, UpsamplerKind};
use crate::{Error, Result};

/// Name of the checkpoint entry holding the JSON model configuration.
pub const CONFIG_ENTRY: &str = "__config__";

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];
const LN_EPS: f64 = 1e-6;

macro_rules! string_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $name),+ })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " {:?}; expected one of: {}"),
                        s,
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    /// Click features join the backbone tokens right after patch embedding.
    Early,
    /// Click features are resized to the upsampled grid and added after the upsampler.
    Late,
    /// Click features pass through the image upsampler before the addition.
    SeparateUpsample,
}
string_enum!(InjectionMode { Early => "early", Late => "late", SeparateUpsample => "separate_upsample" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// One 1x1 convolution.
    Linear,
    /// Three 1x1 convolutions.
    SimpleConv,
    /// 3x3, 3x3, 1x1.
    Conv,
    /// Upsampler-based feature pyramid with a multiscale fusion head.
    Multiscale,
}
string_enum!(HeadKind { Linear => "linear", SimpleConv => "simple_conv", Conv => "conv", Multiscale => "multiscale" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClickEncoderKind {
    /// A single zero-initialized patchifying convolution.
    PatchEmbed,
    /// A small ViT with a zero-initialized output projection.
    SimpleVit,
}
string_enum!(ClickEncoderKind { PatchEmbed => "patch_embed", SimpleVit => "simple_vit" });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiniVitConfig {
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for MiniVitConfig {
    fn default() -> Self {
        MiniVitConfig { patch: 14, dim: 96, depth: 4, heads: 3, mlp_ratio: 4, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClickEncoderConfig {
    pub kind: ClickEncoderKind,
    /// Width of the SimpleViT encoder.
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for ClickEncoderConfig {
    fn default() -> Self {
        ClickEncoderConfig { kind: ClickEncoderKind::PatchEmbed, dim: 64, depth: 2, heads: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub kind: HeadKind,
    /// Inner width of the conv heads.
    pub inner_dim: usize,
    /// Base pyramid width `C`; levels use `C, 2C, 4C, 8C`.
    pub fpn_channels: usize,
    /// Width of the multiscale fusion head.
    pub multiscale_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { kind: HeadKind::Conv, inner_dim: 384, fpn_channels: 128, multiscale_dim: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: MiniVitConfig,
    pub encoder: ClickEncoderConfig,
    pub head: HeadConfig,
    pub injection: InjectionMode,
    pub upsampler: UpsamplerKind,
    pub jbu: JbuConfig,
    pub disk: DiskMapConfig,
    /// Channel count of ingested features; required for the ingested upsampler.
    pub ingested_channels: Option<usize>,
    /// Seed for the trainable parameters.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: MiniVitConfig::default(),
            encoder: ClickEncoderConfig::default(),
            head: HeadConfig::default(),
            injection: InjectionMode::Early,
            upsampler: UpsamplerKind::LowresIdentity,
            jbu: JbuConfig::default(),
            disk: DiskMapConfig::default(),
            ingested_channels: None,
            init_seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        let bad = |m: String| Err(Error::Config(m));
        if b.patch == 0 || b.depth == 0 || b.mlp_ratio == 0 {
            return bad(format!("backbone patch, depth and mlp_ratio must be positive: {b:?}"));
        }
        if b.heads == 0 || b.dim % b.heads != 0 || b.dim % 4 != 0 {
            return bad(format!("backbone dim {} must be divisible by 4 and by heads {}", b.dim, b.heads));
        }
        let e = &self.encoder;
        if e.kind == ClickEncoderKind::SimpleVit && (e.heads == 0 || e.dim % e.heads != 0 || e.dim % 4 != 0) {
            return bad(format!("encoder dim {} must be divisible by 4 and by heads {}", e.dim, e.heads));
        }
        let h = &self.head;
        if h.inner_dim == 0 || h.fpn_channels == 0 || h.multiscale_dim == 0 {
            return bad("head widths must be positive".into());
        }
        self.jbu.validate()?;
        match (&self.upsampler, self.injection) {
            (UpsamplerKind::Ingested(_), InjectionMode::Early) => {
                return bad(
                    "early injection needs a runnable backbone and cannot be combined with ingested features".into(),
                )
            }
            (UpsamplerKind::Ingested(_), _) if self.ingested_channels.is_none() => {
                return bad("ingested_channels must be set for the ingested upsampler".into())
            }
            _ => {}
        }
        if h.kind == HeadKind::Multiscale && !matches!(self.upsampler, UpsamplerKind::Bilinear | UpsamplerKind::Nearest | UpsamplerKind::Jbu) {
            return bad(format!("the multiscale head needs a native dense upsampler, not {}", self.upsampler));
        }
        Ok(())
    }

    /// Channels of the features the head consumes.
    pub fn feature_channels(&self) -> usize {
        match self.upsampler {
            UpsamplerKind::Ingested(_) => self.ingested_channels.unwrap_or(0),
            _ => self.backbone.dim,
        }
    }

    /// Channels the click encoder must produce.
    pub fn click_channels(&self) -> usize {
        match self.injection {
            InjectionMode::Early => self.backbone.dim,
            _ => self.feature_channels(),
        }
    }
}

/// Deterministic initializer.
struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    fn fan_in<T: Float>(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Tensor::uniform(shape, -bound, bound, &mut self.rng)
    }

    /// Uniform with standard deviation `std`.
    fn with_std<T: Float>(&mut self, shape: Vec<usize>, std: f64) -> Tensor<T> {
        let bound = std * 3f64.sqrt();
        Tensor::uniform(shape, -bound, bound, &mut self.rng)
    }

    /// Glorot uniform.
    fn xavier<T: Float>(&mut self, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor<T> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::uniform(shape, -bound, bound, &mut self.rng)
    }
}

fn ones<T: Float>(n: usize) -> Tensor<T> {
    Tensor::full(vec![n], T::one())
}

fn zeros<T: Float>(shape: Vec<usize>) -> Tensor<T> {
    Tensor::zeros(shape)
}

/// Fixed 2D sine-cosine position embedding `[h*w, dim]`: the first half of
/// the channels encodes the row, the second half the column.
pub fn sincos_pos_embed<T: Float>(h: usize, w: usize, dim: usize) -> Tensor<T> {
    let quarter = dim / 4;
    let mut out = vec![T::zero(); h * w * dim];
    for y in 0..h {
        for x in 0..w {
            let row = &mut out[(y * w + x) * dim..(y * w + x + 1) * dim];
            for k in 0..quarter {
                let omega = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                let (py, px) = (y as f64 * omega, x as f64 * omega);
                row[k] = T::of(py.sin());
                row[quarter + k] = T::of(py.cos());
                row[2 * quarter + k] = T::of(px.sin());
                row[3 * quarter + k] = T::of(px.cos());
            }
        }
    }
    Tensor::new(vec![h * w, dim], out).expect("shape")
}

/// Parameters of one pre-LN transformer block under `prefix`. Linear
/// weights have standard deviation 0.02 and biases start at zero, so the
/// residual stream keeps the patch appearance of the embedding.
fn block_params<T: Float>(prefix: &str, dim: usize, mlp: usize, trainable: bool, init: &mut Init) -> Vec<Param<T>> {
    const STD: f64 = 0.02;
    let p = |n: &str, v: Tensor<T>| Param::new(format!("{prefix}.{n}"), v, trainable);
    vec![
        p("ln1.g", ones(dim)),
        p("ln1.b", zeros(vec![dim])),
        p("attn.qkv.w", init.with_std(vec![dim, 3 * dim], STD)),
        p("attn.qkv.b", zeros(vec![3 * dim])),
        p("attn.proj.w", init.with_std(vec![dim, dim], STD)),
        p("attn.proj.b", zeros(vec![dim])),
        p("ln2.g", ones(dim)),
        p("ln2.b", zeros(vec![dim])),
        p("mlp.fc1.w", init.with_std(vec![dim, mlp], STD)),
        p("mlp.fc1.b", zeros(vec![mlp])),
        p("mlp.fc2.w", init.with_std(vec![mlp, dim], STD)),
        p("mlp.fc2.b", zeros(vec![dim])),
    ]
}

fn conv_params<T: Float>(prefix: &str, cout: usize, cin: usize, k: usize, init: &mut Init) -> Vec<Param<T>> {
    let fan = cin * k * k;
    vec![
        Param::new(format!("{prefix}.w"), init.fan_in(vec![cout, cin, k, k], fan), true),
        Param::new(format!("{prefix}.b"), init.fan_in(vec![cout], fan), true),
    ]
}

/// Per-image state that does not depend on clicks.
#[derive(Clone, Debug)]
pub struct Context<T: Float> {
    h: usize,
    w: usize,
    hp: usize,
    wp: usize,
    /// ImageNet-normalized padded image.
    image: Tensor<T>,
    plan: UpsamplePlan<T>,
    /// Operator for separately upsampled click features.
    click_plan: Option<UpsamplePlan<T>>,
    /// Pyramid level at a quarter of the padded resolution.
    quarter_plan: Option<UpsamplePlan<T>>,
    /// Click-independent backbone tokens `[dim, gh, gw]` (absent for early injection).
    backbone: Option<Tensor<T>>,
    /// Click-independent upsampled features (absent for early injection).
    upsampled: Option<Tensor<T>>,
    crop: Option<Arc<ResamplePlan<T>>>,
}

impl<T: Float> Context<T> {
    pub fn image_hw(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn padded_hw(&self) -> (usize, usize) {
        (self.hp, self.wp)
    }

    /// The backbone tokens used when clicks enter after the backbone.
    pub fn cached_backbone(&self) -> Option<&Tensor<T>> {
        self.backbone.as_ref()
    }

    /// Upsampled click-independent features, when cached.
    pub fn cached_features(&self) -> Option<&Tensor<T>> {
        self.upsampled.as_ref()
    }
}

/// Replicate edges of `[C, h, w]` out to `[C, hp, wp]`.
fn pad_edge<T: Float>(x: &Tensor<T>, hp: usize, wp: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    if (h, w) == (hp, wp) {
        return Ok(x.clone());
    }
    let d = x.data();
    Ok(Tensor::from_fn(vec![c, hp, wp], |i| {
        let (ch, p) = (i / (hp * wp), i % (hp * wp));
        let (y, xx) = ((p / wp).min(h - 1), (p % wp).min(w - 1));
        d[ch * h * w + y * w + xx]
    }))
}

fn pad_zero<T: Float>(x: &Tensor<T>, hp: usize, wp: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    if (h, w) == (hp, wp) {
        return Ok(x.clone());
    }
    let d = x.data();
    Ok(Tensor::from_fn(vec![c, hp, wp], |i| {
        let (ch, p) = (i / (hp * wp), i % (hp * wp));
        let (y, xx) = (p / wp, p % wp);
        if y < h && xx < w {
            d[ch * h * w + y * w + xx]
        } else {
            T::zero()
        }
    }))
}

/// The trainable probe around a frozen backbone and upsampler.
#[derive(Clone, Debug)]
pub struct ProbeModel<T: Float = f32> {
    cfg: ModelConfig,
    params: BTreeMap<String, Param<T>>,
}

impl<T: Float> ProbeModel<T> {
    /// Build with the backbone at its seeded initialization, zero-initialized
    /// click encoder output and freshly initialized head.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let b = &cfg.backbone;
        let mut params = Vec::new();

        let mut binit = Init::new(b.seed);
        let pfan = 3 * b.patch * b.patch;
        params.push(Param::new("backbone.patch.w", binit.xavier(vec![b.dim, 3, b.patch, b.patch], pfan, b.dim), false));
        params.push(Param::new("backbone.patch.b", zeros(vec![b.dim]), false));
        for i in 0..b.depth {
            params.extend(block_params(&format!("backbone.blocks.{i}"), b.dim, b.dim * b.mlp_ratio, false, &mut binit));
        }
        params.push(Param::new("backbone.norm.g", ones(b.dim), false));
        params.push(Param::new("backbone.norm.b", zeros(vec![b.dim]), false));

        let mut init = Init::new(cfg.init_seed);
        let cc = cfg.click_channels();
        match cfg.encoder.kind {
            ClickEncoderKind::PatchEmbed => {
                params.push(Param::new("encoder.patch.w", zeros(vec![cc, 3, b.patch, b.patch]), true));
                params.push(Param::new("encoder.patch.b", zeros(vec![cc]), true));
            }
            ClickEncoderKind::SimpleVit => {
                let e = &cfg.encoder;
                params.push(Param::new("encoder.patch.w", init.xavier(vec![e.dim, 3, b.patch, b.patch], pfan, e.dim), true));
                params.push(Param::new("encoder.patch.b", zeros(vec![e.dim]), true));
                for i in 0..e.depth {
                    params.extend(block_params(&format!("encoder.blocks.{i}"), e.dim, 4 * e.dim, true, &mut init));
                }
                params.push(Param::new("encoder.norm.g", ones(e.dim), true));
                params.push(Param::new("encoder.norm.b", zeros(vec![e.dim]), true));
                params.push(Param::new("encoder.proj.w", zeros(vec![e.dim, cc]), true));
                params.push(Param::new("encoder.proj.b", zeros(vec![cc]), true));
            }
        }

        let cf = cfg.feature_channels();
        let hd = &cfg.head;
        match hd.kind {
            HeadKind::Linear => params.extend(conv_params("head.out", 1, cf, 1, &mut init)),
            HeadKind::SimpleConv => {
                params.extend(conv_params("head.c1", hd.inner_dim, cf, 1, &mut init));
                params.extend(conv_params("head.c2", hd.inner_dim, hd.inner_dim, 1, &mut init));
                params.extend(conv_params("head.out", 1, hd.inner_dim, 1, &mut init));
            }
            HeadKind::Conv => {
                params.extend(conv_params("head.c1", hd.inner_dim, cf, 3, &mut init));
                params.extend(conv_params("head.c2", hd.inner_dim, hd.inner_dim, 3, &mut init));
                params.extend(conv_params("head.out", 1, hd.inner_dim, 1, &mut init));
            }
            HeadKind::Multiscale => {
                for (k, width) in fpn_widths(hd.fpn_channels).into_iter().enumerate() {
                    params.extend(conv_params(&format!("head.fpn.{k}"), width, cf, 1, &mut init));
                    params.push(Param::new(format!("head.fpn.{k}.ln.g"), ones(width), true));
                    params.push(Param::new(format!("head.fpn.{k}.ln.b"), zeros(vec![width]), true));
                    params.extend(conv_params(&format!("head.ms.{k}"), hd.multiscale_dim, width, 1, &mut init));
                }
                params.extend(conv_params("head.fuse", hd.multiscale_dim, 4 * hd.multiscale_dim, 1, &mut init));
                params.extend(conv_params("head.out", 1, hd.multiscale_dim, 1, &mut init));
            }
        }
        let params = params.into_iter().map(|p| (p.name.clone(), p)).collect();
        Ok(ProbeModel { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.values()
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    /// Trainable parameters in name order.
    pub fn trainable(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.values().filter(|p| p.trainable)
    }

    pub fn trainable_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.values_mut().filter(|p| p.trainable)
    }

    /// Little-endian bytes of every frozen parameter plus the upsampler
    /// settings, in name order. Training must never change them.
    pub fn frozen_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.params.values().filter(|p| !p.trainable) {
            out.extend_from_slice(p.name.as_bytes());
            for v in p.value.data() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(self.cfg.upsampler.to_string().as_bytes());
        out.extend_from_slice(serde_json::to_string(&self.cfg.jbu).expect("serializable").as_bytes());
        out
    }

    /// Every parameter as `f32`, keyed by name.
    pub fn export_params(&self) -> TensorMap {
        self.params.iter().map(|(k, p)| (k.clone(), p.value.to_f32())).collect()
    }

    /// Replace parameter values; names and shapes must match exactly.
    pub fn load_params(&mut self, map: &TensorMap) -> Result<()> {
        for name in map.keys().filter(|k| k.as_str() != CONFIG_ENTRY) {
            if !self.params.contains_key(name) {
                return Err(Error::Format(format!("checkpoint has unknown parameter {name:?}")));
            }
        }
        for (name, p) in self.params.iter_mut() {
            let t = map.get(name).ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name:?}")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter {name:?} has shape {:?} in the checkpoint but {:?} in the model",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.lift();
        }
        Ok(())
    }

    /// Same model in another precision.
    pub fn cast<U: Float>(&self) -> ProbeModel<U> {
        let params = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), Param::new(p.name.clone(), p.value.cast(), p.trainable)))
            .collect();
        ProbeModel { cfg: self.cfg.clone(), params }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut map = self.export_params();
        let json = serde_json::to_string(&self.cfg).expect("config serializes");
        let codes: Vec<f32> = json.bytes().map(f32::from).collect();
        map.insert(CONFIG_ENTRY.to_string(), Tensor::new(vec![codes.len()], codes)?);
        write_tensor_file(path, map.iter().map(|(k, v)| (k.as_str(), v)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let map = read_tensor_file(path)?;
        let cfg = checkpoint_config(&map)?;
        let mut model = Self::new(cfg)?;
        model.load_params(&map)?;
        Ok(model)
    }

    fn p(&self, g: &mut Graph<T>, name: &str) -> Var {
        let p = self.params.get(name).unwrap_or_else(|| panic!("parameter {name} not registered"));
        g.param(p)
    }

    fn linear(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(g, &format!("{prefix}.w"));
        let b = self.p(g, &format!("{prefix}.b"));
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    fn layernorm(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(g, &format!("{prefix}.g"));
        let beta = self.p(g, &format!("{prefix}.b"));
        g.layernorm(x, gamma, beta, LN_EPS)
    }

    fn conv(&self, g: &mut Graph<T>, x: Var, prefix: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.p(g, &format!("{prefix}.w"));
        let b = self.p(g, &format!("{prefix}.b"));
        g.conv2d(x, w, Some(b), stride, pad)
    }

    fn block(&self, g: &mut Graph<T>, x: Var, prefix: &str, heads: usize) -> Result<Var> {
        let h = self.layernorm(g, x, &format!("{prefix}.ln1"))?;
        let qkv = self.linear(g, h, &format!("{prefix}.attn.qkv"))?;
        let a = g.attention(qkv, heads)?;
        let a = self.linear(g, a, &format!("{prefix}.attn.proj"))?;
        let x = g.add(x, a)?;
        let h = self.layernorm(g, x, &format!("{prefix}.ln2"))?;
        let h = self.linear(g, h, &format!("{prefix}.mlp.fc1"))?;
        let h = g.gelu(h);
        let h = self.linear(g, h, &format!("{prefix}.mlp.fc2"))?;
        g.add(x, h)
    }

    /// `[C, h, w]` to tokens `[h*w, C]`.
    fn to_tokens(g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (c, h, w) = g.value(x).dims3()?;
        let flat = g.reshape(x, &[c, h * w])?;
        g.transpose(flat)
    }

    fn from_tokens(g: &mut Graph<T>, t: Var, h: usize, w: usize) -> Result<Var> {
        let (_, c) = g.value(t).dims2()?;
        let m = g.transpose(t)?;
        g.reshape(m, &[c, h, w])
    }

    /// Backbone features `[dim, H/p, W/p]` of a normalized image whose sides
    /// are multiples of the patch size, with optional early-injected features.
    pub fn minivit_forward(&self, g: &mut Graph<T>, image: Var, injected: Option<Var>) -> Result<Var> {
        let b = &self.cfg.backbone;
        let (_, h, w) = g.value(image).dims3()?;
        if h % b.patch != 0 || w % b.patch != 0 {
            return Err(Error::shape(format!("image {h}x{w} is not divisible by patch {}", b.patch)));
        }
        let (gh, gw) = (h / b.patch, w / b.patch);
        let mut x = self.conv(g, image, "backbone.patch", b.patch, 0)?;
        if let Some(inj) = injected {
            if g.shape(inj) != g.shape(x) {
                return Err(Error::shape(format!(
                    "injected features {:?} do not match the token grid {:?}",
                    g.shape(inj),
                    g.shape(x)
                )));
            }
            x = g.add(x, inj)?;
        }
        let tokens = Self::to_tokens(g, x)?;
        let pos = g.constant(sincos_pos_embed(gh, gw, b.dim));
        let mut t = g.add(tokens, pos)?;
        for i in 0..b.depth {
            t = self.block(g, t, &format!("backbone.blocks.{i}"), b.heads)?;
        }
        let t = self.layernorm(g, t, "backbone.norm")?;
        Self::from_tokens(g, t, gh, gw)
    }

    /// Click features on the token grid from the `[3, Hp, Wp]` click maps.
    pub fn encode(&self, g: &mut Graph<T>, clicks3: Var) -> Result<Var> {
        let patch = self.cfg.backbone.patch;
        match self.cfg.encoder.kind {
            ClickEncoderKind::PatchEmbed => self.conv(g, clicks3, "encoder.patch", patch, 0),
            ClickEncoderKind::SimpleVit => {
                let e = &self.cfg.encoder;
                let x = self.conv(g, clicks3, "encoder.patch", patch, 0)?;
                let (_, gh, gw) = g.value(x).dims3()?;
                let tokens = Self::to_tokens(g, x)?;
                let pos = g.constant(sincos_pos_embed(gh, gw, e.dim));
                let mut t = g.add(tokens, pos)?;
                for i in 0..e.depth {
                    t = self.block(g, t, &format!("encoder.blocks.{i}"), e.heads)?;
                }
                let t = self.layernorm(g, t, "encoder.norm")?;
                let t = self.linear(g, t, "encoder.proj")?;
                Self::from_tokens(g, t, gh, gw)
            }
        }
    }

    fn head(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match self.cfg.head.kind {
            HeadKind::Linear => self.conv(g, x, "head.out", 1, 0),
            HeadKind::SimpleConv | HeadKind::Conv => {
                let pad = usize::from(self.cfg.head.kind == HeadKind::Conv);
                let h = self.conv(g, x, "head.c1", 1, pad)?;
                let h = g.gelu(h);
                let h = self.conv(g, h, "head.c2", 1, pad)?;
                let h = g.gelu(h);
                self.conv(g, h, "head.out", 1, 0)
            }
            HeadKind::Multiscale => Err(Error::Config("multiscale head needs a pyramid".into())),
        }
    }

    /// Layer norm over the channels of `[C, H, W]`.
    fn channel_layernorm(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let (_, h, w) = g.value(x).dims3()?;
        let t = Self::to_tokens(g, x)?;
        let t = self.layernorm(g, t, prefix)?;
        Self::from_tokens(g, t, h, w)
    }

    /// Pyramid levels at strides 1, 4, patch and 2 x patch, widths `C, 2C, 4C, 8C`.
    pub fn build_fpn(&self, g: &mut Graph<T>, dense: Var, quarter: Var, tokens: Var) -> Result<[Var; 4]> {
        let pooled = g.maxpool2x2(tokens)?;
        let mut out = Vec::with_capacity(4);
        for (k, x) in [dense, quarter, tokens, pooled].into_iter().enumerate() {
            let y = self.conv(g, x, &format!("head.fpn.{k}"), 1, 0)?;
            out.push(self.channel_layernorm(g, y, &format!("head.fpn.{k}.ln"))?);
        }
        Ok([out[0], out[1], out[2], out[3]])
    }

    /// Fuse a pyramid into logits at the resolution of its finest level.
    pub fn multiscale_head(&self, g: &mut Graph<T>, pyramid: &[Var; 4]) -> Result<Var> {
        let (_, h, w) = g.value(pyramid[0]).dims3()?;
        let mut levels = Vec::with_capacity(4);
        for (k, &x) in pyramid.iter().enumerate() {
            let y = self.conv(g, x, &format!("head.ms.{k}"), 1, 0)?;
            levels.push(g.bilinear_resize(y, h, w)?);
        }
        let cat = g.concat_channels(&levels)?;
        let fused = self.conv(g, cat, "head.fuse", 1, 0)?;
        self.conv(g, fused, "head.out", 1, 0)
    }

    /// Precompute everything about an image that clicks cannot change.
    /// `image` is `[3, H, W]` RGB in `[0, 1]`; ingested features are required
    /// exactly when the upsampler is ingested.
    pub fn prepare(&self, image: &Tensor<f32>, ingested: Option<&FeatureMap<f32>>) -> Result<Context<T>> {
        let (c, h, w) = image.dims3()?;
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::shape(format!("expected a [3, H, W] image, got {:?}", image.shape())));
        }
        let patch = self.cfg.backbone.patch;
        let (hp, wp) = (h.div_ceil(patch) * patch, w.div_ceil(patch) * patch);
        let (gh, gw) = (hp / patch, wp / patch);
        let guidance: Tensor<T> = pad_edge(&image.lift(), hp, wp)?;
        let norm = Tensor::from_fn(vec![3, hp, wp], |i| {
            let ch = i / (hp * wp);
            T::of((guidance.data()[i].as_f64() - IMAGENET_MEAN[ch]) / IMAGENET_STD[ch])
        });
        let kind = &self.cfg.upsampler;
        let crop = ((hp, wp) != (h, w)).then(|| {
            Arc::new(ResamplePlan::from_taps(hp, wp, h, w, |y, x, taps| taps.push((y * wp + x, 1.0))))
        });

        let (plan, backbone, upsampled) = match (kind, ingested) {
            (UpsamplerKind::Ingested(_), Some(fm)) => {
                let (fc, fh, fw) = fm.dims()?;
                if fm.source != FeatureSource::Ingested {
                    return Err(Error::Ingestion("features passed for ingestion are not marked ingested".into()));
                }
                if (fh, fw) != (h, w) {
                    return Err(Error::Ingestion(format!("ingested features are {fh}x{fw}, image is {h}x{w}")));
                }
                if Some(fc) != self.cfg.ingested_channels {
                    return Err(Error::Ingestion(format!(
                        "ingested features have {fc} channels, model expects {:?}",
                        self.cfg.ingested_channels
                    )));
                }
                let feats: Tensor<T> = pad_edge(&fm.data.lift(), hp, wp)?;
                let plan = UpsamplePlan::new(kind, &self.cfg.jbu, (hp, wp), &guidance)?;
                (plan, None, Some(feats))
            }
            (UpsamplerKind::Ingested(_), None) => {
                return Err(Error::Ingestion(format!("upsampler {kind} needs ingested features")))
            }
            (_, Some(_)) => return Err(Error::Config(format!("ingested features given to a {kind} model"))),
            (_, None) => {
                let plan = UpsamplePlan::new(kind, &self.cfg.jbu, (gh, gw), &guidance)?;
                if self.cfg.injection == InjectionMode::Early {
                    (plan, None, None)
                } else {
                    let mut g = Graph::inference();
                    let img = g.constant(norm.clone());
                    let f = self.minivit_forward(&mut g, img, None)?;
                    let tokens = g.value(f).clone();
                    let up = plan.apply(&tokens)?;
                    (plan, Some(tokens), Some(up))
                }
            }
        };
        let click_plan = match (self.cfg.injection, kind) {
            (InjectionMode::SeparateUpsample, UpsamplerKind::Ingested(_)) => {
                Some(UpsamplePlan::new(&UpsamplerKind::Bilinear, &self.cfg.jbu, (gh, gw), &guidance)?)
            }
            (InjectionMode::SeparateUpsample, _) => Some(plan.clone()),
            _ => None,
        };
        let quarter_plan = if self.cfg.head.kind == HeadKind::Multiscale {
            let (qh, qw) = (hp.div_ceil(4), wp.div_ceil(4));
            let mut g = Graph::inference();
            let gv = g.constant(guidance.clone());
            let small = g.bilinear_resize(gv, qh, qw)?;
            Some(UpsamplePlan::new(kind, &self.cfg.jbu, (gh, gw), g.value(small))?)
        } else {
            None
        };
        Ok(Context { h, w, hp, wp, image: norm, plan, click_plan, quarter_plan, backbone, upsampled, crop })
    }

    /// Logits `[1, H, W]` for the current clicks.
    pub fn forward(&self, g: &mut Graph<T>, ctx: &Context<T>, clicks: &ClickState) -> Result<Var> {
        if clicks.dims() != (ctx.h, ctx.w) {
            return Err(Error::shape(format!(
                "clicks are for a {:?} image, context is {}x{}",
                clicks.dims(),
                ctx.h,
                ctx.w
            )));
        }
        let maps: Tensor<T> = encode_clicks(clicks, ctx.h, ctx.w, &self.cfg.disk)?;
        let maps = g.constant(pad_zero(&maps, ctx.hp, ctx.wp)?);
        let click_feat = self.encode(g, maps)?;

        let (tokens, dense) = match self.cfg.injection {
            InjectionMode::Early => {
                let img = g.constant(ctx.image.clone());
                let t = self.minivit_forward(g, img, Some(click_feat))?;
                let d = ctx.plan.forward(g, t)?;
                (Some(t), d)
            }
            mode => {
                let feats = ctx.upsampled.as_ref().expect("cached for non-early injection");
                let f = g.constant(feats.clone());
                let (_, fh, fw) = feats.dims3()?;
                let c = match (mode, &ctx.click_plan) {
                    (InjectionMode::SeparateUpsample, Some(plan)) => plan.forward(g, click_feat)?,
                    _ => g.bilinear_resize(click_feat, fh, fw)?,
                };
                let d = g.add(f, c)?;
                let t = match &ctx.backbone {
                    Some(b) if self.cfg.head.kind == HeadKind::Multiscale => {
                        let bv = g.constant(b.clone());
                        Some(g.add(bv, click_feat)?)
                    }
                    _ => None,
                };
                (t, d)
            }
        };

        let mut logits = if self.cfg.head.kind == HeadKind::Multiscale {
            let tokens = tokens.ok_or_else(|| Error::Config("multiscale head needs backbone tokens".into()))?;
            let qp = ctx.quarter_plan.as_ref().expect("planned for multiscale");
            let quarter = qp.forward(g, tokens)?;
            let pyramid = self.build_fpn(g, dense, quarter, tokens)?;
            self.multiscale_head(g, &pyramid)?
        } else {
            self.head(g, dense)?
        };
        let (_, lh, lw) = g.value(logits).dims3()?;
        if (lh, lw) != (ctx.hp, ctx.wp) {
            logits = g.bilinear_resize(logits, ctx.hp, ctx.wp)?;
        }
        if let Some(crop) = &ctx.crop {
            logits = g.resample(logits, Arc::clone(crop))?;
        }
        Ok(logits)
    }

    /// Probabilities `[H * W]` without recording gradients.
    pub fn predict(&self, ctx: &Context<T>, clicks: &ClickState) -> Result<Vec<f32>> {
        let mut g = Graph::inference();
        let logits = self.forward(&mut g, ctx, clicks)?;
        let probs = g.sigmoid(logits);
        let out: Vec<f32> = g.value(probs).data().iter().map(|v| v.as_f64() as f32).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("probe forward"));
        }
        Ok(out)
    }

    /// Backbone features of an image (padded to the patch grid), without clicks.
    pub fn backbone_features(&self, image: &Tensor<f32>) -> Result<FeatureMap<T>> {
        let (_, h, w) = image.dims3()?;
        let patch = self.cfg.backbone.patch;
        let (hp, wp) = (h.div_ceil(patch) * patch, w.div_ceil(patch) * patch);
        let padded: Tensor<T> = pad_edge(&image.lift(), hp, wp)?;
        let norm = Tensor::from_fn(vec![3, hp, wp], |i| {
            let ch = i / (hp * wp);
            T::of((padded.data()[i].as_f64() - IMAGENET_MEAN[ch]) / IMAGENET_STD[ch])
        });
        let mut g = Graph::inference();
        let img = g.constant(norm);
        let f = self.minivit_forward(&mut g, img, None)?;
        Ok(FeatureMap::native(g.value(f).clone(), patch))
    }
}

impl ProbeModel<f32> {
    /// Frozen features of `image` after upsampler `kind`: `[C, H, W]` for
    /// dense kinds, the patch grid (over the edge-padded image) for the
    /// low-res identity.
    pub fn upsampled_features(&self, image: &Tensor<f32>, kind: &UpsamplerKind) -> Result<FeatureMap<f32>> {
        if kind.is_ingested() {
            return Err(Error::Config(format!("upsampler {kind} reads precomputed features; nothing to compute")));
        }
        let (_, h, w) = image.dims3()?;
        let patch = self.cfg.backbone.patch;
        let (hp, wp) = (h.div_ceil(patch) * patch, w.div_ceil(patch) * patch);
        let guidance = pad_edge(image, hp, wp)?;
        let feats = self.backbone_features(image)?;
        let (c, gh, gw) = feats.dims()?;
        let plan = UpsamplePlan::new(kind, &self.cfg.jbu, (gh, gw), &guidance)?;
        let up = plan.apply(&feats.data)?;
        if !kind.is_dense() {
            return Ok(FeatureMap::native(up, patch));
        }
        let d = up.data();
        let cropped = Tensor::from_fn(vec![c, h, w], |i| {
            let (ch, p) = (i / (h * w), i % (h * w));
            d[ch * hp * wp + (p / w) * wp + p % w]
        });
        Ok(FeatureMap::native(cropped, 1))
    }

    /// PCA rendering `[3, H, W]` of the frozen features the head would see
    /// with upsampler `kind`. Grids coarser than the image are shown with
    /// nearest-neighbour cells.
    pub fn visualize_features(&self, image: &Tensor<f32>, kind: &UpsamplerKind, ingested: Option<&FeatureMap<f32>>) -> Result<Tensor<f32>> {
        let (_, h, w) = image.dims3()?;
        if let UpsamplerKind::Ingested(_) = kind {
            let fm = ingested.ok_or_else(|| Error::Ingestion(format!("upsampler {kind} needs ingested features")))?;
            let (_, fh, fw) = fm.dims()?;
            if (fh, fw) != (h, w) {
                return Err(Error::Ingestion(format!("ingested features are {fh}x{fw}, image is {h}x{w}")));
            }
            return pca_visualize(fm);
        }
        let feats = self.upsampled_features(image, kind)?;
        let rgb = pca_visualize(&feats)?;
        if kind.is_dense() {
            return Ok(rgb);
        }
        let (_, gh, gw) = rgb.dims3()?;
        let patch = self.cfg.backbone.patch;
        let (hp, wp) = (gh * patch, gw * patch);
        let full = ResamplePlan::<f32>::nearest(gh, gw, hp, wp).apply(rgb.data(), 3);
        Ok(Tensor::from_fn(vec![3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            full[c * hp * wp + (p / w) * wp + p % w]
        }))
    }
}

/// Channel widths of the pyramid levels.
pub fn fpn_widths(c: usize) -> [usize; 4] {
    [c, 2 * c, 4 * c, 8 * c]
}

/// Model configuration stored in a checkpoint.
pub fn checkpoint_config(map: &TensorMap) -> Result<ModelConfig> {
    let codes = map
        .get(CONFIG_ENTRY)
        .ok_or_else(|| Error::Format(format!("checkpoint has no {CONFIG_ENTRY} entry")))?;
    let bytes: Vec<u8> = codes
        .data()
        .iter()
        .map(|&v| if (0.0..=255.0).contains(&v) && v.fract() == 0.0 { Ok(v as u8) } else { Err(()) })
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Format("config entry holds non-byte values".into()))?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Format("config entry is not UTF-8".into()))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("checkpoint config: {e}")))
}
