//! Dataset manifests, the synthetic shapes corpus, image and mask I/O, and the
//! `ISEGTNSR` tensor container used for features and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clicks::BinaryMask;
use crate::tensor::Tensor;
use crate::upsample::FeatureMap;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ISEGTNSR";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
/// Entry name under which ingested feature files store their tensor.
pub const FEATURE_ENTRY: &str = "features";

/// Named `f32` tensors, iterated in name order.
pub type TensorMap = BTreeMap<String, Tensor<f32>>;

/// Serialize tensors into the container format, entries sorted by name.
pub fn encode_tensors<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Result<Vec<u8>> {
    let mut sorted: Vec<(&str, &Tensor<f32>)> = entries.into_iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    if let Some(dup) = sorted.windows(2).find(|p| p[0].0 == p[1].0) {
        return Err(Error::Format(format!("duplicate tensor name {:?}", dup[0].0)));
    }
    let u32_of = |n: usize, what: &str| {
        u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} does not fit in u32")))
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(sorted.len(), "entry count")?.to_le_bytes());
    for (name, t) in sorted {
        out.extend_from_slice(&u32_of(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        out.extend_from_slice(&u32_of(t.ndim(), "rank")?.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
        out.extend_from_slice(&t.le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated file: {what} needs {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parse a container. Rejects bad magic, unknown versions and dtypes,
/// truncation, trailing bytes and duplicate names.
pub fn decode_tensors(bytes: &[u8]) -> Result<TensorMap> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic").ok() != Some(&MAGIC[..]) {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")?;
    let mut out = TensorMap::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u32("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype code {dtype} for {name:?}")));
        }
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("payload size of {name:?} overflows")))?;
        let payload = r.take(numel, "payload")?;
        let data: Vec<f32> =
            payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if out.contains_key(&name) {
            return Err(Error::Format(format!("duplicate tensor name {name:?}")));
        }
        out.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after last entry", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn write_tensor_file<'a>(path: &Path, entries: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Result<()> {
    let bytes = encode_tensors(entries)?;
    write_bytes(path, &bytes)
}

pub fn read_tensor_file(path: &Path) -> Result<TensorMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensors(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Write a file, creating parent directories.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// One segmentation instance; paths are relative to the dataset directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceEntry {
    pub id: String,
    pub image_path: String,
    pub mask_path: String,
    /// Mask pixels equal to this value form the ground truth.
    pub object_value: u8,
}

/// Manifest entries sorted by id.
pub fn read_manifest(dataset_dir: &Path) -> Result<Vec<InstanceEntry>> {
    let path = dataset_dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: InstanceEntry = serde_json::from_str(line)
            .map_err(|e| Error::Dataset(format!("{} line {}: {e}", path.display(), i + 1)))?;
        entries.push(entry);
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(dup) = entries.windows(2).find(|p| p[0].id == p[1].id) {
        return Err(Error::Dataset(format!("duplicate instance id {:?}", dup[0].id)));
    }
    Ok(entries)
}

pub fn write_manifest(dataset_dir: &Path, entries: &[InstanceEntry]) -> Result<()> {
    let mut sorted = entries.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut text = String::new();
    for e in &sorted {
        text.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
        text.push('\n');
    }
    write_bytes(&dataset_dir.join(MANIFEST_FILE), text.as_bytes())
}

/// A loaded instance: `[3, H, W]` RGB in `[0, 1]` and its mask.
#[derive(Clone, Debug)]
pub struct Instance {
    pub id: String,
    pub image: Tensor<f32>,
    pub gt: BinaryMask,
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image { path: path.to_path_buf(), message: other.to_string() },
    }
}

/// RGB image as `[3, H, W]` in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor(img: &image::RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(vec![3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    })
}

/// Single-channel 8-bit image as `(H, W, values)`.
pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_luma8();
    Ok((img.height() as usize, img.width() as usize, img.into_raw()))
}

/// A binary mask PNG: any nonzero pixel is set.
pub fn read_binary_mask(path: &Path) -> Result<BinaryMask> {
    let (h, w, v) = read_gray(path)?;
    BinaryMask::new(h, w, v.into_iter().map(|b| b != 0).collect())
}

pub fn write_binary_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let (h, w) = mask.dims();
    let data: Vec<u8> = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_png(path, w, h, image::ExtendedColorType::L8, &data)
}

/// Quantize a `[3, H, W]` tensor in `[0, 1]` to an RGB PNG.
pub fn write_rgb(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_bytes(path, &rgb_png(t)?)
}

/// PNG bytes of a `[3, H, W]` tensor in `[0, 1]`.
pub fn rgb_png(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("RGB output needs 3 channels, got {c}")));
    }
    let d = t.data();
    let mut bytes = vec![0u8; 3 * h * w];
    for p in 0..h * w {
        for ch in 0..3 {
            bytes[p * 3 + ch] = (d[ch * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    encode_png(w, h, image::ExtendedColorType::Rgb8, &bytes)
}

pub fn encode_png(w: usize, h: usize, color: image::ExtendedColorType, bytes: &[u8]) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(bytes, w as u32, h as u32, color)
        .map_err(|e| Error::Image { path: PathBuf::from("<memory>"), message: e.to_string() })?;
    Ok(out)
}

fn write_png(path: &Path, w: usize, h: usize, color: image::ExtendedColorType, bytes: &[u8]) -> Result<()> {
    write_bytes(path, &encode_png(w, h, color, bytes)?)
}

pub fn load_instance(dataset_dir: &Path, entry: &InstanceEntry) -> Result<Instance> {
    let image = read_rgb(&dataset_dir.join(&entry.image_path))?;
    let (mh, mw, values) = read_gray(&dataset_dir.join(&entry.mask_path))?;
    let (_, h, w) = image.dims3()?;
    if (mh, mw) != (h, w) {
        return Err(Error::Dataset(format!(
            "{}: mask is {mh}x{mw} but image is {h}x{w}",
            entry.id
        )));
    }
    let gt = BinaryMask::new(h, w, values.iter().map(|&v| v == entry.object_value).collect())?;
    if gt.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: object value {} does not occur in the mask",
            entry.id, entry.object_value
        )));
    }
    Ok(Instance { id: entry.id.clone(), image, gt })
}

/// Path of the ingested feature file for an instance.
/// Every instance of a dataset, in manifest (sorted id) order.
pub fn load_dataset(dataset_dir: &Path) -> Result<Vec<Instance>> {
    read_manifest(dataset_dir)?.iter().map(|e| load_instance(dataset_dir, e)).collect()
}

pub fn ingested_path(dataset_dir: &Path, instance_id: &str, tag: &str) -> PathBuf {
    dataset_dir.join(format!("{instance_id}.{tag}.feat"))
}

/// Load stride-1 features exported for an instance and check them against
/// the image size.
pub fn lookup_ingested_features(
    dataset_dir: &Path,
    instance_id: &str,
    tag: &str,
    image_hw: (usize, usize),
) -> Result<FeatureMap<f32>> {
    let path = ingested_path(dataset_dir, instance_id, tag);
    if !path.is_file() {
        return Err(Error::Ingestion(format!("feature file {} not found", path.display())));
    }
    let mut map = read_tensor_file(&path).map_err(|e| Error::Ingestion(e.to_string()))?;
    let t = map
        .remove(FEATURE_ENTRY)
        .ok_or_else(|| Error::Ingestion(format!("{} has no {FEATURE_ENTRY:?} entry", path.display())))?;
    let (_, h, w) = t.dims3().map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    if (h, w) != image_hw {
        return Err(Error::Ingestion(format!(
            "{}: features are {h}x{w} but the image is {}x{}",
            path.display(),
            image_hw.0,
            image_hw.1
        )));
    }
    if !t.all_finite() {
        return Err(Error::Ingestion(format!("{}: non-finite feature values", path.display())));
    }
    Ok(FeatureMap::ingested(t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_images: usize,
    pub resolution: usize,
    pub seed: u64,
    /// Index of the first image; ids and per-image randomness derive from it,
    /// so disjoint index ranges give disjoint splits of one corpus.
    pub first_index: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { n_images: 100, resolution: 224, seed: 42, first_index: 0 }
    }
}

#[derive(Clone, Copy, Debug)]
enum ShapeKind {
    Ellipse,
    Rect,
    Ring,
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    kind: ShapeKind,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    /// Inner radius fraction for rings.
    hole: f64,
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, res: f64) -> Shape {
        let kind = match rng.random_range(0..3) {
            0 => ShapeKind::Ellipse,
            1 => ShapeKind::Rect,
            _ => ShapeKind::Ring,
        };
        let ry = rng.random_range(0.08..0.32) * res;
        let rx = ry * rng.random_range(0.6..1.6);
        Shape {
            kind,
            cy: rng.random_range(0.15..0.85) * res,
            cx: rng.random_range(0.15..0.85) * res,
            ry,
            rx,
            angle: rng.random_range(0.0..std::f64::consts::PI),
            hole: rng.random_range(0.45..0.7),
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        match self.kind {
            ShapeKind::Ellipse => u * u + v * v <= 1.0,
            ShapeKind::Rect => u.abs() <= 0.8 && v.abs() <= 0.8,
            ShapeKind::Ring => {
                let r2 = u * u + v * v;
                r2 <= 1.0 && r2 >= self.hole * self.hole
            }
        }
    }
}

const FG_COLORS: [[u8; 3]; 6] =
    [[220, 60, 50], [40, 160, 70], [50, 90, 210], [230, 190, 40], [170, 60, 190], [240, 240, 240]];
const BG_COLORS: [[u8; 3]; 4] = [[90, 80, 70], [60, 70, 90], [110, 120, 100], [40, 40, 45]];

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Render one synthetic image and its label mask (0 background, shape `k`
/// painted as `k`, the ground-truth shape last). Returns the ground-truth label.
fn render(rng: &mut ChaCha8Rng, res: usize) -> (Vec<u8>, Vec<u8>, u8) {
    let resf = res as f64;
    let n_px = res * res;
    loop {
        let n_shapes = rng.random_range(1..=3usize);
        let shapes: Vec<Shape> = (0..n_shapes).map(|_| Shape::random(rng, resf)).collect();
        let gt_color = rng.random_range(0..FG_COLORS.len());
        // Distractors reuse the object's colour half of the time.
        let colors: Vec<usize> = (0..n_shapes)
            .map(|i| if i + 1 == n_shapes || rng.random_bool(0.5) { gt_color } else { rng.random_range(0..FG_COLORS.len()) })
            .collect();
        let mut labels = vec![0u8; n_px];
        for (k, s) in shapes.iter().enumerate() {
            for y in 0..res {
                for x in 0..res {
                    if s.contains(y as f64 + 0.5, x as f64 + 0.5) {
                        labels[y * res + x] = k as u8 + 1;
                    }
                }
            }
        }
        let gt_label = n_shapes as u8;
        let area = labels.iter().filter(|&&l| l == gt_label).count();
        if area * 100 < n_px || area * 100 > 60 * n_px {
            continue;
        }
        let bg = BG_COLORS[rng.random_range(0..BG_COLORS.len())];
        let bg2 = BG_COLORS[rng.random_range(0..BG_COLORS.len())];
        let (gy, gx) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let mut rgb = vec![0u8; 3 * n_px];
        for y in 0..res {
            for x in 0..res {
                let p = y * res + x;
                let t = (0.5 + 0.5 * (gy * (y as f64 / resf - 0.5) + gx * (x as f64 / resf - 0.5))).clamp(0.0, 1.0);
                let base: [f64; 3] = match labels[p] {
                    0 => [0, 1, 2].map(|c| bg[c] as f64 * (1.0 - t) + bg2[c] as f64 * t),
                    l => FG_COLORS[colors[l as usize - 1]].map(|v| v as f64),
                };
                for c in 0..3 {
                    let noise = rng.random_range(-12.0..12.0);
                    rgb[p * 3 + c] = (base[c] + noise).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        return (rgb, labels, gt_label);
    }
}

/// Generate a synthetic corpus: `<dir>/images/<id>.png`, `<dir>/masks/<id>.png`
/// and the manifest. Deterministic per `(seed, index)`.
pub fn generate_synthetic(dir: &Path, cfg: &SynthConfig) -> Result<Vec<InstanceEntry>> {
    if cfg.resolution < 16 {
        return Err(Error::Config(format!("synthetic resolution {} is too small", cfg.resolution)));
    }
    let res = cfg.resolution;
    let mut entries = Vec::with_capacity(cfg.n_images);
    for index in cfg.first_index..cfg.first_index + cfg.n_images {
        let id = format!("synth_{index:06}");
        let mut rng = image_rng(cfg.seed, index);
        let (rgb, labels, gt_label) = render(&mut rng, res);
        let image_path = format!("images/{id}.png");
        let mask_path = format!("masks/{id}.png");
        write_png(&dir.join(&image_path), res, res, image::ExtendedColorType::Rgb8, &rgb)?;
        write_png(&dir.join(&mask_path), res, res, image::ExtendedColorType::L8, &labels)?;
        entries.push(InstanceEntry { id, image_path, mask_path, object_value: gt_label });
    }
    write_manifest(dir, &entries)?;
    Ok(entries)
}
