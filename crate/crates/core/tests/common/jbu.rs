//! Direct, loop-based references for joint bilateral upsampling.

use clickprobe::tensor::Tensor;

/// One 2x stage computed straight from the weighting formula, no plan
/// machinery. `guide_hr` is `[3, 2h, 2w]`.
pub fn jbu_stage_direct(
    feat: &[f64],
    c: usize,
    h: usize,
    w: usize,
    guide_hr: &[f64],
    radius: i64,
    sigma_s: f64,
    sigma_r: f64,
) -> Vec<f64> {
    let (hh, hw) = (2 * h, 2 * w);
    let g = |ch: usize, y: usize, x: usize| guide_hr[ch * hh * hw + y * hw + x];
    // Guidance of a low-res cell: mean over its 2x2 hi-res block.
    let g_lr = |ch: usize, py: usize, px: usize| {
        (g(ch, 2 * py, 2 * px) + g(ch, 2 * py, 2 * px + 1) + g(ch, 2 * py + 1, 2 * px) + g(ch, 2 * py + 1, 2 * px + 1))
            / 4.0
    };
    let mut out = vec![0.0; c * hh * hw];
    for y in 0..hh {
        for x in 0..hw {
            let qy = (y as f64 + 0.5) / 2.0 - 0.5;
            let qx = (x as f64 + 0.5) / 2.0 - 0.5;
            let cy = (qy + 0.5).floor() as i64;
            let cx = (qx + 0.5).floor() as i64;
            let mut num = vec![0.0; c];
            let mut den = 0.0;
            for py in 0..h as i64 {
                for px in 0..w as i64 {
                    if (py - cy).abs() > radius || (px - cx).abs() > radius {
                        continue;
                    }
                    let ds = (qy - py as f64).powi(2) + (qx - px as f64).powi(2);
                    let dr: f64 = (0..3).map(|ch| (g(ch, y, x) - g_lr(ch, py as usize, px as usize)).powi(2)).sum();
                    let wt = (-ds / (2.0 * sigma_s * sigma_s)).exp() * (-dr / (2.0 * sigma_r * sigma_r)).exp();
                    den += wt;
                    for ch in 0..c {
                        num[ch] += wt * feat[ch * h * w + py as usize * w + px as usize];
                    }
                }
            }
            for ch in 0..c {
                out[ch * hh * hw + y * hw + x] = num[ch] / den;
            }
        }
    }
    out
}

/// Step edge: low-res features are 0 left of column `w/2` and 1 from it on;
/// the guidance switches from dark to bright at the matching hi-res column.
pub fn step_edge_fixture(h: usize, w: usize) -> (Tensor<f64>, Tensor<f64>) {
    let feat = Tensor::from_fn(vec![1, h, w], |i| if i % w >= w / 2 { 1.0 } else { 0.0 });
    let (hh, hw) = (2 * h, 2 * w);
    let guide = Tensor::from_fn(vec![3, hh, hw], |i| if i % hw >= hw / 2 { 0.9 } else { 0.1 });
    (feat, guide)
}

/// Number of pixels on a row strictly between the 10% and 90% levels of a
/// rising 0-to-1 profile.
pub fn transition_width(row: &[f64]) -> usize {
    row.iter().filter(|&&v| v > 0.1 && v < 0.9).count() + 1
}
