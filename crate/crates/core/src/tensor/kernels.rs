//! Raw numeric kernels shared by the forward and backward passes.

use super::Float;

/// Strided view of a matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub fn row_major(cols: usize) -> Self {
        Layout { offset: 0, rs: cols, cs: 1 }
    }

    /// Row-major `[cols, rows]` storage read as its transpose.
    pub fn transposed(stored_cols: usize) -> Self {
        Layout { offset: 0, rs: 1, cs: stored_cols }
    }

    pub fn at(self, offset: usize) -> Self {
        Layout { offset, ..self }
    }

    fn check(&self, rows: usize, cols: usize, len: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs;
        assert!(last < len, "gemm view out of bounds: {last} >= {len}");
    }
}

/// `c[m,n] = alpha * a[m,k] * b[k,n] + beta * c`, bounds checked.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    beta: T,
    c: &mut [T],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    la.check(m, k, a.len());
    lb.check(k, n, b.len());
    lc.check(m, n, c.len());
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c[lc.offset + i * lc.rs + j * lc.cs];
                *v = if beta == T::zero() { T::zero() } else { *v * beta };
            }
        }
        return;
    }
    // SAFETY: all three views were bounds checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(la.offset),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr().add(lb.offset),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr().add(lc.offset),
            lc.rs as isize,
            lc.cs as isize,
        )
    }
}

/// Geometry of a 2D convolution over a `[C,H,W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// Pointwise stride-1 convolutions read the input directly as the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns per im2col tile, bounding scratch memory.
    pub fn tile(&self) -> usize {
        const BUDGET: usize = 1 << 21;
        (BUDGET / self.k().max(1)).max(64).min(self.p().max(1))
    }
}

/// Fill `cols[K, p1-p0]` with the receptive fields of output pixels `p0..p1`.
pub(crate) fn im2col<T: Float>(x: &[T], g: &ConvGeom, p0: usize, p1: usize, cols: &mut [T]) {
    let width = p1 - p0;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let row = &mut cols[r * width..(r + 1) * width];
                let (mut oy, mut ox) = (p0 / g.wo, p0 % g.wo);
                for slot in row.iter_mut() {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    *slot = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                        plane[iy as usize * g.w + ix as usize]
                    } else {
                        T::zero()
                    };
                    ox += 1;
                    if ox == g.wo {
                        ox = 0;
                        oy += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-add `cols[K, p1-p0]` back into the input gradient.
pub(crate) fn col2im<T: Float>(cols: &[T], g: &ConvGeom, p0: usize, p1: usize, dx: &mut [T]) {
    let width = p1 - p0;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let row = &cols[r * width..(r + 1) * width];
                let (mut oy, mut ox) = (p0 / g.wo, p0 % g.wo);
                for &v in row {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                        plane[iy as usize * g.w + ix as usize] += v;
                    }
                    ox += 1;
                    if ox == g.wo {
                        ox = 0;
                        oy += 1;
                    }
                }
            }
        }
    }
}

/// A fixed linear map from an `in_h x in_w` grid to an `out_h x out_w` grid,
/// applied identically to every channel. Each output pixel is a sparse
/// weighted sum of input pixels (CSR layout).
#[derive(Clone, Debug, PartialEq)]
pub struct ResamplePlan<T> {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    offsets: Vec<u32>,
    index: Vec<u32>,
    weight: Vec<T>,
    /// Every row is nonnegative and sums to one, so [`ResamplePlan::apply`]
    /// clamps each output into the range of its taps to absorb rounding.
    convex: bool,
}

impl<T: Float> ResamplePlan<T> {
    /// Build from per-output-pixel tap lists `(input index, weight)`.
    pub fn from_taps(
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
        mut taps: impl FnMut(usize, usize, &mut Vec<(usize, f64)>),
    ) -> Self {
        let mut offsets = Vec::with_capacity(out_h * out_w + 1);
        let mut index = Vec::new();
        let mut weight: Vec<T> = Vec::new();
        let mut scratch = Vec::new();
        let mut convex = true;
        offsets.push(0u32);
        for oy in 0..out_h {
            for ox in 0..out_w {
                scratch.clear();
                taps(oy, ox, &mut scratch);
                let sum: f64 = scratch.iter().map(|t| t.1).sum();
                convex &= scratch.iter().all(|t| t.1 >= 0.0) && (sum - 1.0).abs() <= 1e-9;
                for &(i, w) in scratch.iter() {
                    if w == 0.0 {
                        continue;
                    }
                    debug_assert!(i < in_h * in_w);
                    if let Some(pos) = index[*offsets.last().unwrap() as usize..]
                        .iter()
                        .position(|&j| j as usize == i)
                    {
                        let at = *offsets.last().unwrap() as usize + pos;
                        weight[at] = T::of(weight[at].as_f64() + w);
                    } else {
                        index.push(i as u32);
                        weight.push(T::of(w));
                    }
                }
                offsets.push(index.len() as u32);
            }
        }
        ResamplePlan { in_h, in_w, out_h, out_w, offsets, index, weight, convex }
    }

    /// Half-pixel-center bilinear interpolation (`align_corners = false`).
    pub fn bilinear(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        let rows = linear_taps(in_h, out_h);
        let cols = linear_taps(in_w, out_w);
        Self::from_taps(in_h, in_w, out_h, out_w, |oy, ox, taps| {
            for &(iy, wy) in &rows[oy] {
                for &(ix, wx) in &cols[ox] {
                    taps.push((iy * in_w + ix, wy * wx));
                }
            }
        })
    }

    /// Nearest neighbour with half-pixel centers.
    pub fn nearest(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        let pick = |dst: usize, n_in: usize, n_out: usize| {
            (((dst as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
        };
        Self::from_taps(in_h, in_w, out_h, out_w, |oy, ox, taps| {
            taps.push((pick(oy, in_h, out_h) * in_w + pick(ox, in_w, out_w), 1.0));
        })
    }

    pub fn taps(&self, out_index: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let (s, e) = (self.offsets[out_index] as usize, self.offsets[out_index + 1] as usize);
        self.index[s..e].iter().map(|&i| i as usize).zip(self.weight[s..e].iter().copied())
    }

    pub fn in_size(&self) -> usize {
        self.in_h * self.in_w
    }

    pub fn out_size(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Apply to `channels` stacked planes.
    pub fn apply(&self, x: &[T], channels: usize) -> Vec<T> {
        let (ni, no) = (self.in_size(), self.out_size());
        let mut out = vec![T::zero(); channels * no];
        for c in 0..channels {
            let src = &x[c * ni..(c + 1) * ni];
            let dst = &mut out[c * no..(c + 1) * no];
            for (q, slot) in dst.iter_mut().enumerate() {
                let (s, e) = (self.offsets[q] as usize, self.offsets[q + 1] as usize);
                let mut acc = T::zero();
                for t in s..e {
                    acc += src[self.index[t] as usize] * self.weight[t];
                }
                if self.convex && e > s {
                    let first = src[self.index[s] as usize];
                    let (lo, hi) = self.index[s + 1..e].iter().map(|&i| src[i as usize]).fold((first, first), |(l, h), v| {
                        (if v < l { v } else { l }, if v > h { v } else { h })
                    });
                    acc = if acc < lo { lo } else if acc > hi { hi } else { acc };
                }
                *slot = acc;
            }
        }
        out
    }

    /// Adjoint of [`ResamplePlan::apply`], accumulated into `dx`.
    pub fn apply_transpose(&self, dy: &[T], channels: usize, dx: &mut [T]) {
        let (ni, no) = (self.in_size(), self.out_size());
        for c in 0..channels {
            let src = &dy[c * no..(c + 1) * no];
            let dst = &mut dx[c * ni..(c + 1) * ni];
            for (q, &g) in src.iter().enumerate() {
                let (s, e) = (self.offsets[q] as usize, self.offsets[q + 1] as usize);
                for t in s..e {
                    dst[self.index[t] as usize] += g * self.weight[t];
                }
            }
        }
    }
}

/// 1D linear interpolation taps with the half-pixel convention; negative
/// source coordinates clamp to zero, matching common framework behaviour.
fn linear_taps(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let lambda = src - i0 as f64;
            if i0 == i1 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - lambda), (i1, lambda)]
            }
        })
        .collect()
}

/// 2x2 max pooling with ceil-mode windows; returns values and flat argmax
/// indices into each input plane (first occurrence wins on ties).
pub(crate) fn maxpool2x2<T: Float>(x: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = usize::MAX;
                for iy in 2 * oy..(2 * oy + 2).min(h) {
                    for ix in 2 * ox..(2 * ox + 2).min(w) {
                        let i = iy * w + ix;
                        if best == usize::MAX || plane[i] > plane[best] {
                            best = i;
                        }
                    }
                }
                out.push(plane[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

/// Exact GELU `x * Phi(x)` and its derivative, evaluated in `f64`.
pub(crate) fn gelu_f64(x: f64) -> (f64, f64) {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (x * cdf, cdf + x * pdf)
}

/// Numerically stable logistic function.
pub(crate) fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_plan_rows_sum_to_one() {
        let plan = ResamplePlan::<f64>::bilinear(3, 5, 7, 4);
        for q in 0..plan.out_size() {
            let s: f64 = plan.taps(q).map(|(_, w)| w).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_is_adjoint() {
        let plan = ResamplePlan::<f64>::bilinear(4, 3, 9, 7);
        let x: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..126).map(|i| (i as f64 * 0.11).cos()).collect();
        let ax = plan.apply(&x, 2);
        let mut aty = vec![0.0; 24];
        plan.apply_transpose(&y, 2, &mut aty);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn gemm_with_transposed_views() {
        // a = [[1,2],[3,4]], b^T stored as [[5,6],[7,8]] -> a * b
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let bt = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(
            2,
            2,
            2,
            1.0,
            &a,
            Layout::row_major(2),
            &bt,
            Layout::transposed(2),
            0.0,
            &mut c,
            Layout::row_major(2),
        );
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let (v, a) = maxpool2x2(&[1.0f32, 1.0, 1.0, 1.0], 1, 2, 2);
        assert_eq!(v, vec![1.0]);
        assert_eq!(a, vec![0]);
        let (v, _) = maxpool2x2(&[0.0f32, 5.0, 2.0], 1, 1, 3);
        assert_eq!(v, vec![5.0, 2.0]);
    }
}
