//! Frozen feature upsamplers and PCA feature visualization.
//!
//! Every native upsampler is a fixed linear map over spatial positions, so it
//! is expressed as a chain of [`ResamplePlan`]s. A plan depends only on the
//! feature grid and the guidance image, can be cached per image, and runs
//! inside an autodiff graph without any trainable state.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::tensor::kernels::{gemm, Layout};
use crate::tensor::{Float, Graph, ResamplePlan, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum UpsamplerKind {
    /// Keep the backbone grid; the head runs at feature stride.
    LowresIdentity,
    Bilinear,
    Nearest,
    /// Stacked 2x joint bilateral upsampling guided by the image.
    Jbu,
    /// Precomputed stride-1 features read from `<id>.<tag>.feat`.
    Ingested(String),
}

impl UpsamplerKind {
    /// Every kind that needs no external files.
    pub const NATIVE: [UpsamplerKind; 4] =
        [UpsamplerKind::LowresIdentity, UpsamplerKind::Bilinear, UpsamplerKind::Nearest, UpsamplerKind::Jbu];

    pub fn is_ingested(&self) -> bool {
        matches!(self, UpsamplerKind::Ingested(_))
    }

    /// Whether the output is at image resolution.
    pub fn is_dense(&self) -> bool {
        !matches!(self, UpsamplerKind::LowresIdentity)
    }
}

impl fmt::Display for UpsamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UpsamplerKind::LowresIdentity => f.write_str("lowres"),
            UpsamplerKind::Bilinear => f.write_str("bilinear"),
            UpsamplerKind::Nearest => f.write_str("nearest"),
            UpsamplerKind::Jbu => f.write_str("jbu"),
            UpsamplerKind::Ingested(tag) => write!(f, "ingested:{tag}"),
        }
    }
}

impl FromStr for UpsamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "lowres" | "lowres_identity" | "low-res" => UpsamplerKind::LowresIdentity,
            "bilinear" => UpsamplerKind::Bilinear,
            "nearest" => UpsamplerKind::Nearest,
            "jbu" => UpsamplerKind::Jbu,
            _ => match s.strip_prefix("ingested:") {
                Some(tag) if !tag.is_empty() && !tag.contains(['/', '\\', '.']) => {
                    UpsamplerKind::Ingested(tag.to_string())
                }
                _ => {
                    return Err(Error::Config(format!(
                        "unknown upsampler {s:?}; expected lowres, bilinear, nearest, jbu or ingested:<tag>"
                    )))
                }
            },
        })
    }
}

impl Serialize for UpsamplerKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for UpsamplerKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JbuConfig {
    /// Low-res window radius; the window is `(2r+1)^2` cells.
    pub window_radius: usize,
    /// Spatial Gaussian width in low-res cells.
    pub sigma_spatial: f64,
    /// Range Gaussian width on RGB in `[0, 1]`.
    pub sigma_range: f64,
}

impl Default for JbuConfig {
    fn default() -> Self {
        JbuConfig { window_radius: 2, sigma_spatial: 1.0, sigma_range: 0.15 }
    }
}

impl JbuConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_radius < 1 || !(self.sigma_spatial > 0.0) || !(self.sigma_range > 0.0) {
            return Err(Error::Config(format!("invalid JBU settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Native,
    Ingested,
}

/// A `[C, H, W]` feature map and the number of input pixels per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f32> {
    pub data: Tensor<T>,
    pub stride: usize,
    pub source: FeatureSource,
}

impl<T: Float> FeatureMap<T> {
    pub fn native(data: Tensor<T>, stride: usize) -> Self {
        FeatureMap { data, stride, source: FeatureSource::Native }
    }

    pub fn ingested(data: Tensor<T>) -> Self {
        FeatureMap { data, stride: 1, source: FeatureSource::Ingested }
    }

    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        self.data.dims3()
    }
}

/// `[3, H, W]` guidance downsampled by an integer factor with box averaging.
pub fn area_downsample(guide: &[f64], h: usize, w: usize, factor: usize) -> Result<Vec<f64>> {
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!("{h}x{w} guidance is not divisible by {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; 3 * oh * ow];
    for c in 0..3 {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for dy in 0..factor {
                    let row = c * h * w + (y * factor + dy) * w + x * factor;
                    acc += guide[row..row + factor].iter().sum::<f64>();
                }
                out[c * oh * ow + y * ow + x] = acc * norm;
            }
        }
    }
    Ok(out)
}

/// Plan for one 2x JBU stage from an `h x w` feature grid to the `2h x 2w`
/// guidance `guide_hr` (`[3, 2h, 2w]`, values in `[0, 1]`).
pub fn jbu_stage_plan<T: Float>(h: usize, w: usize, guide_hr: &[f64], cfg: &JbuConfig) -> Result<ResamplePlan<T>> {
    cfg.validate()?;
    let (hh, hw) = (2 * h, 2 * w);
    if guide_hr.len() != 3 * hh * hw {
        return Err(Error::shape(format!(
            "JBU stage from {h}x{w} needs 3x{hh}x{hw} guidance, got {} values",
            guide_hr.len()
        )));
    }
    let guide_lr = area_downsample(guide_hr, hh, hw, 2)?;
    let r = cfg.window_radius as i64;
    let inv_s = 1.0 / (2.0 * cfg.sigma_spatial * cfg.sigma_spatial);
    let inv_r = 1.0 / (2.0 * cfg.sigma_range * cfg.sigma_range);
    let (np_hr, np_lr) = (hh * hw, h * w);
    Ok(ResamplePlan::from_taps(h, w, hh, hw, |y, x, taps| {
        let qy = (y as f64 + 0.5) / 2.0 - 0.5;
        let qx = (x as f64 + 0.5) / 2.0 - 0.5;
        let (cy, cx) = ((qy + 0.5).floor() as i64, (qx + 0.5).floor() as i64);
        let gq = [guide_hr[y * hw + x], guide_hr[np_hr + y * hw + x], guide_hr[2 * np_hr + y * hw + x]];
        let mut total = 0.0;
        for py in (cy - r).max(0)..=(cy + r).min(h as i64 - 1) {
            for px in (cx - r).max(0)..=(cx + r).min(w as i64 - 1) {
                let p = py as usize * w + px as usize;
                let ds = (qy - py as f64).powi(2) + (qx - px as f64).powi(2);
                let dr = (0..3).map(|c| (gq[c] - guide_lr[c * np_lr + p]).powi(2)).sum::<f64>();
                let wgt = (-ds * inv_s - dr * inv_r).exp();
                total += wgt;
                taps.push((p, wgt));
            }
        }
        if total > 0.0 && total.is_finite() {
            for t in taps.iter_mut() {
                t.1 /= total;
            }
        } else {
            // Every range weight underflowed: fall back to the nearest cell.
            taps.clear();
            let p = cy.clamp(0, h as i64 - 1) as usize * w + cx.clamp(0, w as i64 - 1) as usize;
            taps.push((p, 1.0));
        }
    }))
}

/// One 2x JBU stage applied to a feature tensor.
pub fn jbu_stage<T: Float>(feat_lr: &Tensor<T>, guide_hr: &Tensor<T>, cfg: &JbuConfig) -> Result<Tensor<T>> {
    let (c, h, w) = feat_lr.dims3()?;
    let (gc, gh, gw) = guide_hr.dims3()?;
    if gc != 3 || gh != 2 * h || gw != 2 * w {
        return Err(Error::shape(format!(
            "JBU guidance must be 3x{}x{} for a {h}x{w} feature grid, got {gc}x{gh}x{gw}",
            2 * h,
            2 * w
        )));
    }
    let guide: Vec<f64> = guide_hr.data().iter().map(|v| v.as_f64()).collect();
    let plan = jbu_stage_plan::<T>(h, w, &guide, cfg)?;
    Tensor::new(vec![c, 2 * h, 2 * w], plan.apply(feat_lr.data(), c))
}

/// Smallest power of two that is at least `n`.
fn pow2_at_least(n: usize) -> usize {
    n.max(1).next_power_of_two()
}

/// A frozen upsampler specialised to one feature grid and guidance image.
#[derive(Clone, Debug)]
pub struct UpsamplePlan<T> {
    kind: UpsamplerKind,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    stages: Vec<Arc<ResamplePlan<T>>>,
}

impl<T: Float> UpsamplePlan<T> {
    /// Build the plan taking an `in_h x in_w` grid to the guidance resolution.
    /// `guidance` is `[3, H, W]` RGB in `[0, 1]`.
    pub fn new(kind: &UpsamplerKind, cfg: &JbuConfig, in_hw: (usize, usize), guidance: &Tensor<T>) -> Result<Self> {
        let (gc, gh, gw) = guidance.dims3()?;
        if gc != 3 {
            return Err(Error::shape(format!("guidance must have 3 channels, got {gc}")));
        }
        let (h, w) = in_hw;
        if h == 0 || w == 0 {
            return Err(Error::shape("empty feature grid"));
        }
        let mut stages = Vec::new();
        let out_hw = match kind {
            UpsamplerKind::LowresIdentity => in_hw,
            UpsamplerKind::Ingested(_) => {
                if in_hw != (gh, gw) {
                    return Err(Error::Ingestion(format!(
                        "ingested features are {h}x{w} but the image is {gh}x{gw}"
                    )));
                }
                in_hw
            }
            UpsamplerKind::Bilinear => {
                stages.push(Arc::new(ResamplePlan::bilinear(h, w, gh, gw)));
                (gh, gw)
            }
            UpsamplerKind::Nearest => {
                stages.push(Arc::new(ResamplePlan::nearest(h, w, gh, gw)));
                (gh, gw)
            }
            UpsamplerKind::Jbu => {
                let factor = pow2_at_least(gh.div_ceil(h).max(gw.div_ceil(w)));
                let (th, tw) = (h * factor, w * factor);
                let base_plan = ResamplePlan::<f64>::bilinear(gh, gw, th, tw);
                let raw: Vec<f64> = guidance.data().iter().map(|v| v.as_f64()).collect();
                let base = base_plan.apply(&raw, 3);
                let mut level = factor;
                let (mut ch, mut cw) = (h, w);
                while level > 1 {
                    level /= 2;
                    let guide = area_downsample(&base, th, tw, level)?;
                    stages.push(Arc::new(jbu_stage_plan::<T>(ch, cw, &guide, cfg)?));
                    ch *= 2;
                    cw *= 2;
                }
                if (ch, cw) != (gh, gw) {
                    stages.push(Arc::new(ResamplePlan::bilinear(ch, cw, gh, gw)));
                }
                (gh, gw)
            }
        };
        Ok(UpsamplePlan { kind: kind.clone(), in_hw, out_hw, stages })
    }

    pub fn kind(&self) -> &UpsamplerKind {
        &self.kind
    }

    pub fn out_hw(&self) -> (usize, usize) {
        self.out_hw
    }

    fn check(&self, c_h_w: (usize, usize, usize)) -> Result<()> {
        if (c_h_w.1, c_h_w.2) != self.in_hw {
            return Err(Error::shape(format!(
                "upsampler planned for a {:?} grid, got {}x{}",
                self.in_hw, c_h_w.1, c_h_w.2
            )));
        }
        Ok(())
    }

    /// Differentiable application inside a graph.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.check(g.value(x).dims3()?)?;
        let mut v = x;
        for plan in &self.stages {
            v = g.resample(v, Arc::clone(plan))?;
        }
        Ok(v)
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = x.dims3()?;
        self.check((c, h, w))?;
        let mut cur = x.clone();
        for plan in &self.stages {
            cur = Tensor::new(vec![c, plan.out_h, plan.out_w], plan.apply(cur.data(), c))?;
        }
        Ok(cur)
    }
}

/// Upsample a feature map to the guidance resolution. The low-res identity
/// returns its input unchanged; ingested maps must already match the image.
pub fn upsample<T: Float>(
    kind: &UpsamplerKind,
    feat: &FeatureMap<T>,
    guidance: &Tensor<T>,
    cfg: &JbuConfig,
) -> Result<FeatureMap<T>> {
    let (_, h, w) = feat.dims()?;
    match (kind, feat.source) {
        (UpsamplerKind::Ingested(_), FeatureSource::Native) => {
            return Err(Error::Config("the ingested upsampler needs ingested features".into()))
        }
        (k, FeatureSource::Ingested) if !k.is_ingested() => {
            return Err(Error::Config(format!("ingested features cannot be upsampled again with {k}")))
        }
        _ => {}
    }
    let plan = UpsamplePlan::new(kind, cfg, (h, w), guidance)?;
    let data = plan.apply(&feat.data)?;
    let stride = if kind.is_dense() { 1 } else { feat.stride };
    Ok(FeatureMap { data, stride, source: feat.source })
}

/// Upsample click features with the same frozen operator used for the image
/// features. Ingested upsamplers have no operator of their own, so click
/// features fall back to bilinear there.
pub fn upsample_clicks_separately<T: Float>(
    kind: &UpsamplerKind,
    click_feat: &FeatureMap<T>,
    guidance: &Tensor<T>,
    cfg: &JbuConfig,
) -> Result<FeatureMap<T>> {
    let kind = click_kind(kind);
    let native = FeatureMap { source: FeatureSource::Native, ..click_feat.clone() };
    let mut out = upsample(&kind, &native, guidance, cfg)?;
    if !kind.is_dense() {
        let (_, gh, gw) = guidance.dims3()?;
        out = upsample(&UpsamplerKind::Bilinear, &out, guidance, cfg)?;
        debug_assert_eq!(out.dims()?.1, gh);
        debug_assert_eq!(out.dims()?.2, gw);
    }
    out.stride = 1;
    Ok(out)
}

/// The operator applied to click features for a given image upsampler.
pub fn click_kind(kind: &UpsamplerKind) -> UpsamplerKind {
    match kind {
        UpsamplerKind::Ingested(_) | UpsamplerKind::LowresIdentity => UpsamplerKind::Bilinear,
        k => k.clone(),
    }
}

/// Result of projecting features on their top three principal components.
#[derive(Clone, Debug)]
pub struct PcaProjection {
    /// `[3, H, W]` in `[0, 1]`.
    pub rgb: Tensor<f32>,
    /// `[3, H, W]` raw projections onto the components before normalization.
    pub scores: Tensor<f64>,
    /// Eigenvalues of the three components, descending.
    pub eigenvalues: [f64; 3],
    /// Fraction of the total variance each component explains.
    pub explained: [f64; 3],
}

/// Principal-component projection of a feature map for display.
pub fn pca_project<T: Float>(feat: &FeatureMap<T>) -> Result<PcaProjection> {
    let (c, h, w) = feat.dims()?;
    if c < 3 {
        return Err(Error::InvalidArgument(format!("PCA visualisation needs at least 3 channels, got {c}")));
    }
    let n = h * w;
    if n == 0 {
        return Err(Error::shape("PCA of an empty feature map"));
    }
    // Centered [C, N] matrix in f64.
    let mut x: Vec<f64> = feat.data.data().iter().map(|v| v.as_f64()).collect();
    for ch in 0..c {
        let row = &mut x[ch * n..(ch + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    let mut cov = vec![0.0f64; c * c];
    gemm(
        c,
        n,
        c,
        1.0 / n as f64,
        &x,
        Layout::row_major(n),
        &x,
        Layout::transposed(n),
        0.0,
        &mut cov,
        Layout::row_major(c),
    );
    for i in 0..c {
        for j in 0..i {
            let s = 0.5 * (cov[i * c + j] + cov[j * c + i]);
            cov[i * c + j] = s;
            cov[j * c + i] = s;
        }
    }
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(c, c, &cov));
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let lead = eig.eigenvalues[order[0]].max(0.0);

    let mut rgb = vec![0.5f32; 3 * n];
    let mut scores = vec![0.0f64; 3 * n];
    let mut eigenvalues = [0.0; 3];
    let mut explained = [0.0; 3];
    for k in 0..3 {
        let idx = order[k];
        let lambda = eig.eigenvalues[idx].max(0.0);
        eigenvalues[k] = lambda;
        explained[k] = if total > 0.0 { lambda / total } else { 0.0 };
        if lead <= 0.0 || lambda <= 1e-6 * lead {
            continue;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let pivot = v
            .iter()
            .enumerate()
            .fold(0, |best, (i, a)| if a.abs() > v[best].abs() { i } else { best });
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|a| *a = -*a);
        }
        let mut proj = vec![0.0f64; n];
        for (ch, &coef) in v.iter().enumerate() {
            for (p, &xv) in proj.iter_mut().zip(&x[ch * n..(ch + 1) * n]) {
                *p += coef * xv;
            }
        }
        scores[k * n..(k + 1) * n].copy_from_slice(&proj);
        let (lo, hi) = proj.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &p| (l.min(p), u.max(p)));
        if hi - lo <= f64::EPSILON * hi.abs().max(lo.abs()).max(1e-300) {
            continue;
        }
        for (o, p) in rgb[k * n..(k + 1) * n].iter_mut().zip(&proj) {
            *o = ((p - lo) / (hi - lo)) as f32;
        }
    }
    Ok(PcaProjection {
        rgb: Tensor::new(vec![3, h, w], rgb)?,
        scores: Tensor::new(vec![3, h, w], scores)?,
        eigenvalues,
        explained,
    })
}

/// `[3, H, W]` RGB image in `[0, 1]` of the top three principal components.
pub fn pca_visualize<T: Float>(feat: &FeatureMap<T>) -> Result<Tensor<f32>> {
    Ok(pca_project(feat)?.rgb)
}
