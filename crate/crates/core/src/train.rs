//! Probe training: augmentation, click simulation per sample, normalized
//! focal loss and Adam on the trainable parameters.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clicks::{sample_iterative_click, sample_random_clicks, BinaryMask, ClickState, RandomClickConfig};
use crate::data::Instance;
use crate::model::ProbeModel;
use crate::tensor::kernels::sigmoid_f64;
use crate::tensor::{AdamConfig, AdamState, Float, Graph, ResamplePlan, Tensor};
use crate::upsample::FeatureMap;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub hflip_p: f64,
    pub scale: (f64, f64),
    /// Additive brightness shift drawn from `[-b, b]`.
    pub brightness: f64,
    /// Contrast factor drawn from `[1 - c, 1 + c]`.
    pub contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { enabled: true, hflip_p: 0.5, scale: (0.75, 1.40), brightness: 0.2, contrast: 0.2 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        if !(0.0..=1.0).contains(&self.hflip_p) || !(lo > 0.0 && lo <= hi) || self.brightness < 0.0 || !(0.0..1.0).contains(&self.contrast) {
            return Err(Error::Config(format!("invalid augmentation settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_after_drop: f64,
    /// Last epoch (1-based) trained at `lr`.
    pub lr_drop_epoch: usize,
    /// Side of the square training crop.
    pub resolution: usize,
    pub gamma_focal: f64,
    pub max_iterative_clicks: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub clicks: RandomClickConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch: 8,
            lr: 5e-5,
            lr_after_drop: 5e-6,
            lr_drop_epoch: 17,
            resolution: 224,
            gamma_focal: 2.0,
            max_iterative_clicks: 3,
            seed: 0,
            augment: AugmentConfig::default(),
            clicks: RandomClickConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch == 0 || self.resolution == 0 {
            return bad("epochs, batch and resolution must be positive".into());
        }
        if self.lr_drop_epoch >= self.epochs {
            return bad(format!("lr_drop_epoch {} must be below epochs {}", self.lr_drop_epoch, self.epochs));
        }
        if !(self.lr > 0.0 && self.lr_after_drop > 0.0) || self.gamma_focal < 0.0 {
            return bad("learning rates must be positive and gamma_focal non-negative".into());
        }
        self.augment.validate()
    }

    /// Learning rate for a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch <= self.lr_drop_epoch {
            self.lr
        } else {
            self.lr_after_drop
        }
    }
}

/// One concrete draw of the augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub hflip: bool,
    pub scale: f64,
    /// Crop origin as fractions of the free range in each axis.
    pub crop: (f64, f64),
    pub brightness: f64,
    pub contrast: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw { hflip: false, scale: 1.0, crop: (0.0, 0.0), brightness: 0.0, contrast: 1.0 };

    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        if !cfg.enabled {
            return Self::IDENTITY;
        }
        AugmentDraw {
            hflip: rng.random::<f64>() < cfg.hflip_p,
            scale: rng.random_range(cfg.scale.0..=cfg.scale.1),
            crop: (rng.random(), rng.random()),
            brightness: rng.random_range(-cfg.brightness..=cfg.brightness),
            contrast: rng.random_range(1.0 - cfg.contrast..=1.0 + cfg.contrast),
        }
    }
}

/// Reflect an index into `0..n` without repeating the edge pixel.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

fn hflip<T: Copy>(data: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for p in 0..planes {
        for y in 0..h {
            let row = &data[(p * h + y) * w..(p * h + y + 1) * w];
            out.extend(row.iter().rev());
        }
    }
    out
}

/// Crop `planes x h x w` to `size x size` at `(oy, ox)`, reflecting outside the source.
fn crop_reflect<T: Copy>(data: &[T], planes: usize, h: usize, w: usize, oy: isize, ox: isize, size: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(planes * size * size);
    for p in 0..planes {
        for y in 0..size {
            let sy = reflect(oy + y as isize, h);
            for x in 0..size {
                out.push(data[(p * h + sy) * w + reflect(ox + x as isize, w)]);
            }
        }
    }
    out
}

/// Apply one draw: flip, rescale (bilinear image, nearest mask), crop to
/// `size x size` with reflection padding, then photometric jitter. The crop
/// slides so the object stays visible when the draw would lose it.
pub fn augment_with(image: &Tensor<f32>, gt: &BinaryMask, draw: &AugmentDraw, size: usize) -> Result<(Tensor<f32>, BinaryMask)> {
    let (img, mask, _) = augment_sample(image, gt, None, draw, size)?;
    Ok((img, mask))
}

/// [`augment_with`] that also carries stride-1 ingested features through the
/// same flip, rescale and crop. Features get no photometric jitter.
pub fn augment_with_features(
    image: &Tensor<f32>,
    gt: &BinaryMask,
    features: &FeatureMap<f32>,
    draw: &AugmentDraw,
    size: usize,
) -> Result<(Tensor<f32>, BinaryMask, FeatureMap<f32>)> {
    let (img, mask, feats) = augment_sample(image, gt, Some(features), draw, size)?;
    Ok((img, mask, feats.expect("features were passed")))
}

fn augment_sample(
    image: &Tensor<f32>,
    gt: &BinaryMask,
    features: Option<&FeatureMap<f32>>,
    draw: &AugmentDraw,
    size: usize,
) -> Result<(Tensor<f32>, BinaryMask, Option<FeatureMap<f32>>)> {
    let (c, h, w) = image.dims3()?;
    if c != 3 || gt.dims() != (h, w) {
        return Err(Error::shape(format!("image {:?} and mask {:?} disagree", image.shape(), gt.dims())));
    }
    let fc = match features {
        Some(f) => {
            let (fc, fh, fw) = f.dims()?;
            if (fh, fw) != (h, w) || f.stride != 1 {
                return Err(Error::Ingestion(format!("features are {fh}x{fw} at stride {}, image is {h}x{w}", f.stride)));
            }
            fc
        }
        None => 0,
    };
    let mut img = image.data().to_vec();
    let mut mask: Vec<bool> = gt.data().to_vec();
    let mut feat: Option<Vec<f32>> = features.map(|f| f.data.data().to_vec());
    if draw.hflip {
        img = hflip(&img, 3, h, w);
        mask = hflip(&mask, 1, h, w);
        feat = feat.map(|f| hflip(&f, fc, h, w));
    }
    let (sh, sw) = (((h as f64 * draw.scale).round() as usize).max(1), ((w as f64 * draw.scale).round() as usize).max(1));
    if (sh, sw) != (h, w) {
        let plan = ResamplePlan::<f32>::bilinear(h, w, sh, sw);
        img = plan.apply(&img, 3);
        feat = feat.map(|f| plan.apply(&f, fc));
        let mf: Vec<f32> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        mask = ResamplePlan::<f32>::nearest(h, w, sh, sw).apply(&mf, 1).into_iter().map(|v| v > 0.5).collect();
    }
    let free = |n: usize, f: f64| -> isize {
        if n >= size {
            ((n - size) as f64 * f).floor() as isize
        } else {
            -(((size - n) as f64 * f).floor() as isize)
        }
    };
    let (mut oy, mut ox) = (free(sh, draw.crop.0), free(sw, draw.crop.1));
    let visible = |oy: isize, ox: isize| {
        (0..size).any(|y| {
            let sy = oy + y as isize;
            (0..sh as isize).contains(&sy)
                && (0..size).any(|x| {
                    let sx = ox + x as isize;
                    (0..sw as isize).contains(&sx) && mask[sy as usize * sw + sx as usize]
                })
        })
    };
    if mask.iter().any(|&b| b) && !visible(oy, ox) {
        let (mut cy, mut cx, mut n) = (0usize, 0usize, 0usize);
        for (i, _) in mask.iter().enumerate().filter(|(_, &b)| b) {
            cy += i / sw;
            cx += i % sw;
            n += 1;
        }
        let center = |c: usize, n_src: usize| -> isize {
            let want = c as isize - size as isize / 2;
            if n_src >= size {
                want.clamp(0, (n_src - size) as isize)
            } else {
                want
            }
        };
        oy = center(cy / n, sh);
        ox = center(cx / n, sw);
    }
    let img = crop_reflect(&img, 3, sh, sw, oy, ox, size);
    let mask = crop_reflect(&mask, 1, sh, sw, oy, ox, size);
    let feat = match feat {
        Some(f) => Some(FeatureMap::ingested(Tensor::new(vec![fc, size, size], crop_reflect(&f, fc, sh, sw, oy, ox, size))?)),
        None => None,
    };
    let img = if draw.brightness != 0.0 || draw.contrast != 1.0 {
        let mean = img.iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64;
        img.into_iter()
            .map(|v| (((v as f64 - mean) * draw.contrast + mean + draw.brightness).clamp(0.0, 1.0)) as f32)
            .collect()
    } else {
        img
    };
    Ok((Tensor::new(vec![3, size, size], img)?, BinaryMask::new(size, size, mask)?, feat))
}

/// Draw augmentation parameters from `seed` and apply them.
pub fn augment(image: &Tensor<f32>, gt: &BinaryMask, cfg: &AugmentConfig, size: usize, seed: u64) -> Result<(Tensor<f32>, BinaryMask)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    augment_with(image, gt, &AugmentDraw::sample(cfg, &mut rng), size)
}

/// `sum((1 - p_t)^gamma)` over all pixels, with the same `p_t` as the loss.
pub fn focal_weight_sum<T: Float>(logits: &[T], target: &[bool], gamma: f64) -> f64 {
    logits
        .iter()
        .zip(target)
        .map(|(z, &y)| {
            let z = z.as_f64();
            let p = sigmoid_f64(if y { z } else { -z });
            (1.0 - p).powf(gamma)
        })
        .sum()
}

/// The click state a training sample ends with: random clicks, then up to
/// `max_iterative_clicks` rounds of detached prediction and an iterative
/// click in the error region. The state's previous-probability channel holds
/// the last detached prediction.
pub fn simulate_training_clicks<T: Float>(
    model: &ProbeModel<T>,
    ctx: &crate::model::Context<T>,
    gt: &BinaryMask,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ClickState> {
    let mut state = sample_random_clicks(gt, rng.random(), &cfg.clicks)?;
    let rounds = rng.random_range(0..=cfg.max_iterative_clicks);
    let (h, w) = gt.dims();
    for _ in 0..rounds {
        let probs = model.predict(ctx, &state)?;
        state.set_prev_prob(&probs)?;
        let pred = BinaryMask::from_probs(h, w, &probs, 0.5)?;
        match sample_iterative_click(&pred, gt, rng.random()) {
            Ok(click) => {
                state.push(click)?;
            }
            Err(Error::NoErrorRegion) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Optimizer state carried across steps.
pub struct Trainer {
    pub cfg: TrainConfig,
    adam: AdamState,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer { adam: AdamState::new(AdamConfig::default(), cfg.lr), cfg })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.adam.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.adam.lr
    }

    /// One optimizer step on a batch of already augmented samples. The loss is
    /// the focal loss summed over every pixel of the batch divided by the
    /// batch's total focal weight, which is held constant for the gradient.
    pub fn train_step<T: Float>(&mut self, model: &mut ProbeModel<T>, batch: &[(Tensor<f32>, BinaryMask)], rng: &mut ChaCha8Rng) -> Result<f64> {
        self.train_step_with(model, batch, None, rng)
    }

    /// [`Trainer::train_step`] with one ingested feature map per sample, for
    /// models whose upsampler is ingested.
    pub fn train_step_with<T: Float>(
        &mut self,
        model: &mut ProbeModel<T>,
        batch: &[(Tensor<f32>, BinaryMask)],
        features: Option<&[FeatureMap<f32>]>,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if let Some(f) = features {
            if f.len() != batch.len() {
                return Err(Error::InvalidArgument(format!("{} feature maps for {} samples", f.len(), batch.len())));
            }
        }
        let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let (mut numer, mut weights) = (0.0, 0.0);
        for (i, (image, gt)) in batch.iter().enumerate() {
            let ctx = model.prepare(image, features.map(|f| &f[i]))?;
            let state = simulate_training_clicks(model, &ctx, gt, &self.cfg, rng)?;
            let mut g = Graph::new();
            let logits = model.forward(&mut g, &ctx, &state)?;
            let target = gt.data();
            weights += focal_weight_sum(g.value(logits).data(), target, self.cfg.gamma_focal);
            let loss = g.normalized_focal_loss(logits, target, self.cfg.gamma_focal, Some(1.0))?;
            numer += g.value(loss).item()?.as_f64();
            let grads = g.backward(loss)?;
            for p in model.trainable() {
                if let Some(gr) = grads.by_name(&p.name) {
                    let slot = acc.entry(p.name.clone()).or_insert_with(|| vec![0.0; gr.numel()]);
                    for (s, v) in slot.iter_mut().zip(gr.data()) {
                        *s += v.as_f64();
                    }
                }
            }
        }
        let norm = if weights > 0.0 { weights } else { 1.0 };
        let loss = numer / norm;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let mut params = Vec::new();
        let mut grads = Vec::new();
        for p in model.trainable_mut() {
            let g = match acc.get(&p.name) {
                Some(s) => Tensor::new(p.value.shape().to_vec(), s.iter().map(|v| T::of(v / norm)).collect())?,
                None => Tensor::zeros(p.value.shape().to_vec()),
            };
            grads.push(g);
            params.push(&mut p.value);
        }
        let grad_refs: Vec<&Tensor<T>> = grads.iter().collect();
        self.adam.step(&mut params, &grad_refs)?;
        Ok(loss)
    }
}

/// Train for `cfg.epochs` epochs. Each epoch shuffles the data with a seeded
/// generator, so a fixed seed reproduces the checkpoint bit for bit. One
/// JSON line per epoch goes to `log`.
pub fn fit<T: Float>(
    model: &mut ProbeModel<T>,
    dataset: &[Instance],
    cfg: &TrainConfig,
    log: Option<&mut dyn Write>,
    progress: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    fit_with_features(model, dataset, None, cfg, log, progress)
}

/// [`fit`] for ingested upsamplers: `features[i]` belongs to `dataset[i]` and
/// is augmented together with it.
pub fn fit_with_features<T: Float>(
    model: &mut ProbeModel<T>,
    dataset: &[Instance],
    features: Option<&[FeatureMap<f32>]>,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
    mut progress: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if dataset.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if let Some(f) = features {
        if f.len() != dataset.len() {
            return Err(Error::InvalidArgument(format!("{} feature maps for {} instances", f.len(), dataset.len())));
        }
    }
    let mut trainer = Trainer::new(*cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        trainer.set_lr(cfg.lr_at(epoch));
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch) {
            let mut batch = Vec::with_capacity(chunk.len());
            let mut feats = Vec::new();
            for &i in chunk {
                let inst = &dataset[i];
                let mut draw_rng = ChaCha8Rng::seed_from_u64(rng.random());
                let draw = AugmentDraw::sample(&cfg.augment, &mut draw_rng);
                match features {
                    Some(f) => {
                        let (img, gt, fm) = augment_with_features(&inst.image, &inst.gt, &f[i], &draw, cfg.resolution)?;
                        batch.push((img, gt));
                        feats.push(fm);
                    }
                    None => batch.push(augment_with(&inst.image, &inst.gt, &draw, cfg.resolution)?),
                }
            }
            let step_feats = features.map(|_| feats.as_slice());
            losses.push(trainer.train_step_with(model, &batch, step_feats, &mut rng)?);
        }
        let entry = EpochLog {
            epoch,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            lr: trainer.lr(),
            wall_ms: start.elapsed().as_millis() as u64,
        };
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&entry).expect("serializable");
            writeln!(w, "{line}").map_err(|e| Error::io("<training log>", e))?;
        }
        progress(&entry);
        history.push(entry);
    }
    Ok(history)
}

/// Parse a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}
