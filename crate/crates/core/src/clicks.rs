//! Binary masks, error-region analysis, click simulation and disk-map encoding.
//!
//! Geometry conventions: 8-connected components labelled in raster order,
//! pixels outside the image count as background, and every tie is broken by
//! the lexicographically smallest `(row, col)`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Float, Tensor};
use crate::{Error, Result};

/// An `H x W` boolean mask, row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "BinaryMask {}x{} area {}", self.h, self.w, self.area())?;
        if self.h * self.w <= 400 {
            for r in 0..self.h {
                let row: String = (0..self.w).map(|c| if self.get(r, c) { '#' } else { '.' }).collect();
                writeln!(f, "{row}")?;
            }
        }
        Ok(())
    }
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape(format!("mask {h}x{w} needs {} values, got {}", h * w, data.len())));
        }
        Ok(BinaryMask { h, w, data })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        BinaryMask { h, w, data: vec![false; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        BinaryMask { h, w, data }
    }

    /// Pixels whose probability is strictly above `threshold`.
    pub fn from_probs<T: Float>(h: usize, w: usize, probs: &[T], threshold: f64) -> Result<Self> {
        Self::new(h, w, probs.iter().map(|p| p.as_f64() > threshold).collect())
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.w + c] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Row-major `(row, col)` of every set pixel.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.w;
        self.data.iter().enumerate().filter(|(_, &b)| b).map(move |(i, _)| (i / w, i % w))
    }

    fn zip(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> Result<BinaryMask> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!(
                "mask dims {:?} and {:?} differ",
                self.dims(),
                other.dims()
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(BinaryMask { h: self.h, w: self.w, data })
    }

    /// `self & !other`
    pub fn minus(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip(other, |a, b| a && !b)
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip(other, |a, b| a && b)
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip(other, |a, b| a || b)
    }

    pub fn not(&self) -> BinaryMask {
        BinaryMask { h: self.h, w: self.w, data: self.data.iter().map(|b| !b).collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Click {
    pub row: usize,
    pub col: usize,
    pub positive: bool,
    /// 1-based position within its [`ClickState`].
    pub index: usize,
}

impl Click {
    pub fn new(row: usize, col: usize, positive: bool) -> Self {
        Click { row, col, positive, index: 0 }
    }
}

/// Clicks issued so far plus the previous probability map.
#[derive(Clone, Debug, PartialEq)]
pub struct ClickState {
    h: usize,
    w: usize,
    clicks: Vec<Click>,
    prev_prob: Vec<f32>,
}

impl ClickState {
    pub fn new(h: usize, w: usize) -> Self {
        ClickState { h, w, clicks: Vec::new(), prev_prob: vec![0.0; h * w] }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn clicks(&self) -> &[Click] {
        &self.clicks
    }

    pub fn len(&self) -> usize {
        self.clicks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clicks.is_empty()
    }

    pub fn prev_prob(&self) -> &[f32] {
        &self.prev_prob
    }

    /// Append a click, assigning the next index.
    pub fn push(&mut self, click: Click) -> Result<&Click> {
        if click.row >= self.h || click.col >= self.w {
            return Err(Error::InvalidArgument(format!(
                "click ({}, {}) outside {}x{} image",
                click.row, click.col, self.h, self.w
            )));
        }
        let index = self.clicks.len() + 1;
        self.clicks.push(Click { index, ..click });
        Ok(self.clicks.last().expect("just pushed"))
    }

    /// Replace the previous-prediction channel; values are clamped to `[0, 1]`.
    pub fn set_prev_prob(&mut self, prob: &[f32]) -> Result<()> {
        if prob.len() != self.h * self.w {
            return Err(Error::shape(format!(
                "prev_prob has {} values for a {}x{} image",
                prob.len(),
                self.h,
                self.w
            )));
        }
        self.prev_prob = prob.iter().map(|p| if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) }).collect();
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiskMapConfig {
    pub radius: u32,
}

impl Default for DiskMapConfig {
    fn default() -> Self {
        DiskMapConfig { radius: 5 }
    }
}

/// `[3, H, W]`: positive disks, negative disks, previous probability.
pub fn encode_clicks<T: Float>(state: &ClickState, h: usize, w: usize, cfg: &DiskMapConfig) -> Result<Tensor<T>> {
    if state.dims() != (h, w) {
        return Err(Error::shape(format!("click state is {:?}, image is {h}x{w}", state.dims())));
    }
    let mut out = vec![T::zero(); 3 * h * w];
    let r = cfg.radius as i64;
    for click in state.clicks() {
        if click.row >= h || click.col >= w {
            return Err(Error::InvalidArgument(format!("click ({}, {}) outside {h}x{w}", click.row, click.col)));
        }
        let plane = if click.positive { 0 } else { h * w };
        let (cr, cc) = (click.row as i64, click.col as i64);
        for y in (cr - r).max(0)..=(cr + r).min(h as i64 - 1) {
            for x in (cc - r).max(0)..=(cc + r).min(w as i64 - 1) {
                if (y - cr).pow(2) + (x - cc).pow(2) <= r * r {
                    out[plane + y as usize * w + x as usize] = T::one();
                }
            }
        }
    }
    for (o, &p) in out[2 * h * w..].iter_mut().zip(state.prev_prob()) {
        *o = T::of(p as f64);
    }
    Tensor::new(vec![3, h, w], out)
}

/// Connected components of a mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Components {
    /// Per pixel: 0 for background, else the 1-based component label.
    pub labels: Vec<u32>,
    /// `areas[k]` is the pixel count of label `k + 1`.
    pub areas: Vec<usize>,
    /// First pixel of each component in raster order.
    pub first_pixel: Vec<(usize, usize)>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.areas.len()
    }

    pub fn mask_of(&self, label: u32, h: usize, w: usize) -> BinaryMask {
        BinaryMask { h, w, data: self.labels.iter().map(|&l| l == label).collect() }
    }
}

/// 8-connected components, labelled in raster order of their first pixel.
pub fn connected_components(mask: &BinaryMask) -> Components {
    let (h, w) = mask.dims();
    let mut labels = vec![0u32; h * w];
    let mut areas = Vec::new();
    let mut first_pixel = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask.data[start] || labels[start] != 0 {
            continue;
        }
        let label = areas.len() as u32 + 1;
        labels[start] = label;
        stack.push(start);
        let mut area = 0;
        while let Some(i) = stack.pop() {
            area += 1;
            let (r, c) = (i / w, i % w);
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (y, x) = (r as i64 + dr, c as i64 + dc);
                    if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                        continue;
                    }
                    let j = y as usize * w + x as usize;
                    if mask.data[j] && labels[j] == 0 {
                        labels[j] = label;
                        stack.push(j);
                    }
                }
            }
        }
        areas.push(area);
        first_pixel.push((start / w, start % w));
    }
    Components { labels, areas, first_pixel }
}

/// Stand-in for "no site"; large enough to never win, small enough to keep
/// the parabola intersections finite.
const FAR: f64 = 1e20;

/// Exact squared Euclidean distance transform of a sampled 1D function via the
/// lower envelope of parabolas (Felzenszwalb and Huttenlocher).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let para = |q: usize| f[q] + (q * q) as f64;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = (para(q) - para(p)) / (2.0 * (q - p) as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                break;
            }
        }
        if s <= z[k] {
            v[0] = q;
        } else {
            k += 1;
            v[k] = q;
            z[k] = s;
        }
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance from every pixel of an `h x w` grid to the nearest site.
/// Grids without sites yield `INF` everywhere.
fn squared_distance_to_sites(h: usize, w: usize, site: impl Fn(usize) -> bool) -> Vec<f64> {
    let n = h.max(w);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let mut grid: Vec<f64> = (0..h * w).map(|i| if site(i) { 0.0 } else { FAR }).collect();
    for c in 0..w {
        for r in 0..h {
            f[r] = grid[r * w + c];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for r in 0..h {
            grid[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        f[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }
    grid.iter_mut().filter(|d| **d >= FAR / 2.0).for_each(|d| *d = f64::INFINITY);
    grid
}

/// Squared distance from each set pixel to the nearest unset pixel, with the
/// image surrounded by a one-pixel unset border. Unset pixels map to 0.
pub fn boundary_distance_sq(mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = mask.dims();
    let (ph, pw) = (h + 2, w + 2);
    let padded = squared_distance_to_sites(ph, pw, |i| {
        let (r, c) = (i / pw, i % pw);
        r == 0 || c == 0 || r == ph - 1 || c == pw - 1 || !mask.get(r - 1, c - 1)
    });
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = padded[(r + 1) * pw + c + 1];
        }
    }
    out
}

/// Euclidean distance from each set pixel to the nearest unset pixel or the
/// image border.
pub fn boundary_distance(mask: &BinaryMask) -> Vec<f64> {
    boundary_distance_sq(mask).into_iter().map(f64::sqrt).collect()
}

/// Euclidean distance from every pixel to the nearest set pixel of `mask`
/// (`INF` when the mask is empty).
pub fn distance_to_mask(mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = mask.dims();
    squared_distance_to_sites(h, w, |i| mask.data[i]).into_iter().map(f64::sqrt).collect()
}

/// The error component the clicker targets and whether it is a false negative.
pub fn largest_error_region(pred: &BinaryMask, gt: &BinaryMask) -> Result<(BinaryMask, bool)> {
    let fn_mask = gt.minus(pred)?;
    let fp_mask = pred.minus(gt)?;
    let mut best: Option<(usize, (usize, usize), bool, u32)> = None;
    let fn_cc = connected_components(&fn_mask);
    let fp_cc = connected_components(&fp_mask);
    for (cc, positive) in [(&fn_cc, true), (&fp_cc, false)] {
        for k in 0..cc.count() {
            let cand = (cc.areas[k], cc.first_pixel[k], positive, k as u32 + 1);
            let better = match best {
                None => true,
                Some((area, first, _, _)) => cand.0 > area || (cand.0 == area && cand.1 < first),
            };
            if better {
                best = Some(cand);
            }
        }
    }
    let (_, _, positive, label) = best.ok_or(Error::NoErrorRegion)?;
    let cc = if positive { &fn_cc } else { &fp_cc };
    Ok((cc.mask_of(label, gt.height(), gt.width()), positive))
}

/// The deterministic evaluation click: the interior-most pixel of the largest
/// error component. The returned index continues `existing`.
pub fn next_click_eval(pred: &BinaryMask, gt: &BinaryMask, existing: &ClickState) -> Result<Click> {
    let (region, positive) = largest_error_region(pred, gt)?;
    let dist = boundary_distance_sq(&region);
    let w = region.width();
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (i, &d) in dist.iter().enumerate() {
        if region.data[i] && d > best.0 {
            best = (d, i);
        }
    }
    Ok(Click { row: best.1 / w, col: best.1 % w, positive, index: existing.len() + 1 })
}

/// Erosion by the 3x3 cross; pixels outside the image count as unset.
pub fn erode(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = mask.dims();
    BinaryMask::from_fn(h, w, |r, c| {
        mask.get(r, c)
            && r > 0
            && c > 0
            && r + 1 < h
            && c + 1 < w
            && mask.get(r - 1, c)
            && mask.get(r + 1, c)
            && mask.get(r, c - 1)
            && mask.get(r, c + 1)
    })
}

/// Erode until the area is at most a quarter of the original (rounded up),
/// never returning an empty mask for a nonempty input.
pub fn erode_to_quarter(mask: &BinaryMask) -> BinaryMask {
    let target = mask.area().div_ceil(4);
    let mut current = mask.clone();
    while current.area() > target {
        let next = erode(&current);
        if next.is_empty() {
            break;
        }
        current = next;
    }
    current
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomClickConfig {
    pub max_pos: usize,
    pub max_neg: usize,
    /// Inclusive pixel-distance band around the object for negative clicks.
    pub neg_band: (f64, f64),
}

impl Default for RandomClickConfig {
    fn default() -> Self {
        RandomClickConfig { max_pos: 10, max_neg: 10, neg_band: (5.0, 40.0) }
    }
}

/// Random initial clicks: positives inside the object, negatives in a band
/// around it. Positives come first.
pub fn sample_random_clicks(gt: &BinaryMask, seed: u64, cfg: &RandomClickConfig) -> Result<ClickState> {
    if gt.is_empty() {
        return Err(Error::InvalidArgument("random clicks need a nonempty ground truth".into()));
    }
    if cfg.max_pos == 0 {
        return Err(Error::InvalidArgument("max_pos must be at least 1".into()));
    }
    let (h, w) = gt.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ClickState::new(h, w);

    let inside: Vec<(usize, usize)> = gt.pixels().collect();
    let n_pos = rng.random_range(1..=cfg.max_pos).min(inside.len());
    for i in sample(&mut rng, inside.len(), n_pos) {
        let (r, c) = inside[i];
        state.push(Click::new(r, c, true))?;
    }

    let n_neg = rng.random_range(0..=cfg.max_neg);
    let dist = distance_to_mask(gt);
    let (lo, hi) = cfg.neg_band;
    let mut pool: Vec<(usize, usize)> = gt
        .not()
        .pixels()
        .filter(|&(r, c)| (lo..=hi).contains(&dist[r * w + c]))
        .collect();
    if pool.is_empty() {
        pool = gt.not().pixels().collect();
    }
    let n_neg = n_neg.min(pool.len());
    for i in sample(&mut rng, pool.len(), n_neg) {
        let (r, c) = pool[i];
        state.push(Click::new(r, c, false))?;
    }
    Ok(state)
}

/// Training-time corrective click: a uniform pixel of the eroded largest error
/// component. The index is left at 0 for [`ClickState::push`] to assign.
pub fn sample_iterative_click(pred: &BinaryMask, gt: &BinaryMask, seed: u64) -> Result<Click> {
    let (region, positive) = largest_error_region(pred, gt)?;
    let shrunk = erode_to_quarter(&region);
    let pixels: Vec<(usize, usize)> = shrunk.pixels().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (row, col) = pixels[rng.random_range(0..pixels.len())];
    Ok(Click::new(row, col, positive))
}

/// Intersection over union; two empty masks score 1.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!("iou of {:?} and {:?} masks", pred.dims(), gt.dims())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}
