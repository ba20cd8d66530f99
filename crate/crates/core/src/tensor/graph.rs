use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, col2im, gemm, im2col, ConvGeom, Layout, ResamplePlan};
use super::{Float, Param, Tensor};
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    Gelu(Var),
    Sigmoid(Var),
    Resample { x: Var, plan: Arc<ResamplePlan<T>> },
    MaxPool { x: Var, argmax: Vec<u32> },
    Concat(Vec<Var>),
    Attention { qkv: Var, heads: usize, probs: Vec<T> },
    Sum(Var),
    Mean(Var),
    WeightedSum { x: Var, weights: Arc<Vec<T>> },
    /// Scalar loss whose gradient w.r.t. `x` was computed during the forward pass.
    Loss { x: Var, dx: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records operations as they execute so that [`Graph::backward`] can replay
/// them in reverse. Nodes are appended in execution order, which is already a
/// topological order.
///
/// A node requires a gradient iff one of its inputs does; leaves marked as
/// frozen never receive gradients, but gradients still flow *through* the ops
/// that consume them.
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
    bindings: HashMap<String, Var>,
    /// When false, parameters bind as constants and nothing is differentiable
    /// unless a leaf asks for it explicitly.
    track_params: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of leaf nodes after a backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: HashMap<Var, Tensor<T>>,
    names: HashMap<String, Var>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.get(name).and_then(|v| self.leaves.get(v))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

fn same_shape<T: Float>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), bindings: HashMap::new(), track_params: true }
    }

    /// A graph for forward-only evaluation: trainable parameters bind as constants.
    pub fn inference() -> Self {
        Graph { track_params: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Bind a named parameter. Binding the same name twice returns the first node.
    pub fn param(&mut self, p: &Param<T>) -> Var {
        if let Some(&v) = self.bindings.get(&p.name) {
            return v;
        }
        let v = self.leaf(p.value.clone(), p.trainable && self.track_params);
        self.bindings.insert(p.name.clone(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn map_unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        self.map_unary(x, Op::Scale(x, s), |v| v * s)
    }

    /// `x[..., M] + b[M]`, broadcasting the bias over leading dimensions.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let m = *xv.shape().last().ok_or_else(|| Error::shape("add_bias on scalar"))?;
        if bv.shape() != [m] {
            return Err(Error::shape(format!(
                "add_bias: bias {:?} does not match last dim of {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let bias = bv.data();
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + bias[i % m]).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, rg, Op::AddBias(x, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        let (k2, m) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(format!("matmul: inner dims {k} and {k2} differ")));
        }
        let mut out = vec![T::zero(); n * m];
        gemm(
            n,
            k,
            m,
            T::one(),
            self.value(a).data(),
            Layout::row_major(k),
            self.value(b).data(),
            Layout::row_major(m),
            T::zero(),
            &mut out,
            Layout::row_major(m),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let data = transpose_buf(self.value(x).data(), r, c);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], data)?, rg, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Reshape(x)))
    }

    /// 2D convolution of `x[C_in,H,W]` with `w[C_out,C_in,kh,kw]` and optional bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (cin, h, wd) = self.value(x).dims3()?;
        let ws = self.value(w).shape().to_vec();
        let [cout, wcin, kh, kw] = ws[..] else {
            return Err(Error::shape(format!("conv2d: weight must be rank 4, got {ws:?}")));
        };
        if wcin != cin {
            return Err(Error::shape(format!("conv2d: input has {cin} channels, weight expects {wcin}")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
        }
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                wd + 2 * padding
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape(format!(
                    "conv2d: bias {:?} does not match {cout} output channels",
                    self.value(b).shape()
                )));
            }
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (wd + 2 * padding - kw) / stride + 1,
        };
        let (k, p) = (geom.k(), geom.p());
        let mut out = vec![T::zero(); cout * p];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        if geom.is_pointwise() {
            gemm(cout, k, p, T::one(), wv, Layout::row_major(k), xv, Layout::row_major(p), T::zero(), &mut out, Layout::row_major(p));
        } else {
            let tile = geom.tile();
            let mut cols = vec![T::zero(); k * tile];
            let mut p0 = 0;
            while p0 < p {
                let p1 = (p0 + tile).min(p);
                im2col(xv, &geom, p0, p1, &mut cols);
                gemm(
                    cout,
                    k,
                    p1 - p0,
                    T::one(),
                    wv,
                    Layout::row_major(k),
                    &cols,
                    Layout::row_major(p1 - p0),
                    T::zero(),
                    &mut out,
                    Layout::row_major(p).at(p0),
                );
                p0 = p1;
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (co, row) in out.chunks_mut(p).enumerate() {
                let bias = bv[co];
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        let out = Tensor::new(vec![cout, geom.ho, geom.wo], out)?;
        Ok(self.push(out, rg, Op::Conv2d { x, w, b, geom }))
    }

    /// Normalize over the last dimension, then scale by `gamma` and shift by `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().ok_or_else(|| Error::shape("layernorm on scalar"))?;
        if d == 0 {
            return Err(Error::shape("layernorm: empty last dimension"));
        }
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Error::shape(format!("layernorm: affine params must have shape [{d}]")));
        }
        let rg = self.rg(&[x, gamma, beta]);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.numel() / d;
        let mut out = vec![T::zero(); xv.numel()];
        let mut xhat = if rg { vec![T::zero(); xv.numel()] } else { Vec::new() };
        let mut rstds = if rg { vec![T::zero(); rows] } else { Vec::new() };
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                let xh = (row[j].as_f64() - mean) * rstd;
                out[r * d + j] = T::of(xh * g[j].as_f64() + b[j].as_f64());
                if rg {
                    xhat[r * d + j] = T::of(xh);
                }
            }
            if rg {
                rstds[r] = T::of(rstd);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(out, rg, Op::LayerNorm { x, gamma, beta, xhat, rstd: rstds }))
    }

    /// Softmax over the last dimension with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().ok_or_else(|| Error::shape("softmax on scalar"))?;
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_row(row);
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Softmax(x)))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Gelu(x), |v| T::of(kernels::gelu_f64(v.as_f64()).0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Sigmoid(x), |v| T::of(kernels::sigmoid_f64(v.as_f64())))
    }

    /// Apply a fixed spatial resampling to every channel of `x[C,H,W]`.
    pub fn resample(&mut self, x: Var, plan: Arc<ResamplePlan<T>>) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if (h, w) != (plan.in_h, plan.in_w) {
            return Err(Error::shape(format!(
                "resample: plan expects {}x{} input, got {h}x{w}",
                plan.in_h, plan.in_w
            )));
        }
        let out = plan.apply(self.value(x).data(), c);
        let out = Tensor::new(vec![c, plan.out_h, plan.out_w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Resample { x, plan }))
    }

    /// Bilinear resize of `x[C,H,W]` with half-pixel centers (`align_corners = false`).
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (_, h, w) = self.value(x).dims3()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape(format!("bilinear_resize: zero-size output {out_h}x{out_w}")));
        }
        if (h, w) == (out_h, out_w) {
            return Ok(x);
        }
        self.resample(x, Arc::new(ResamplePlan::bilinear(h, w, out_h, out_w)))
    }

    pub fn nearest_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (_, h, w) = self.value(x).dims3()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape(format!("nearest_resize: zero-size output {out_h}x{out_w}")));
        }
        if (h, w) == (out_h, out_w) {
            return Ok(x);
        }
        self.resample(x, Arc::new(ResamplePlan::nearest(h, w, out_h, out_w)))
    }

    /// 2x2 max pooling, output `[C, ceil(H/2), ceil(W/2)]`.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let (out, argmax) = kernels::maxpool2x2(self.value(x).data(), c, h, w);
        let out = Tensor::new(vec![c, h.div_ceil(2), w.div_ceil(2)], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::MaxPool { x, argmax }))
    }

    /// Stack `[C_i,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let (_, h, w) = self.value(*first).dims3()?;
        let mut data = Vec::new();
        let mut channels = 0;
        for &x in xs {
            let (c, hi, wi) = self.value(x).dims3()?;
            if (hi, wi) != (h, w) {
                return Err(Error::shape(format!("concat_channels: spatial {hi}x{wi} differs from {h}x{w}")));
            }
            data.extend_from_slice(self.value(x).data());
            channels += c;
        }
        let out = Tensor::new(vec![channels, h, w], data)?;
        let rg = self.rg(xs);
        Ok(self.push(out, rg, Op::Concat(xs.to_vec())))
    }

    /// Multi-head scaled dot-product self-attention over packed `qkv[N, 3D]`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let (n, d3) = self.value(qkv).dims2()?;
        if heads == 0 || d3 % (3 * heads) != 0 {
            return Err(Error::shape(format!("attention: width {d3} not divisible into 3 x {heads} heads")));
        }
        let d = d3 / 3;
        let hd = d / heads;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let rg = self.rg(&[qkv]);
        let src = self.value(qkv).data();
        let mut out = vec![T::zero(); n * d];
        let mut probs = vec![T::zero(); if rg { heads * n * n } else { n * n }];
        for h in 0..heads {
            let p = if rg { &mut probs[h * n * n..(h + 1) * n * n] } else { &mut probs[..] };
            gemm(n, hd, n, scale, src, Layout::row_major(d3).at(h * hd), src, Layout::transposed(d3).at(d + h * hd), T::zero(), p, Layout::row_major(n));
            for row in p.chunks_mut(n) {
                softmax_row(row);
            }
            gemm(n, n, hd, T::one(), p, Layout::row_major(n), src, Layout::row_major(d3).at(2 * d + h * hd), T::zero(), &mut out, Layout::row_major(d).at(h * hd));
        }
        if !rg {
            probs = Vec::new();
        }
        let out = Tensor::new(vec![n, d], out)?;
        Ok(self.push(out, rg, Op::Attention { qkv, heads, probs }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(T::of(s)), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s: f64 = xv.data().iter().map(|v| v.as_f64()).sum::<f64>() / xv.numel().max(1) as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(T::of(s)), rg, Op::Mean(x))
    }

    /// `sum_i weights_i * x_i` against constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Arc<Vec<T>>) -> Result<Var> {
        let xv = self.value(x);
        if weights.len() != xv.numel() {
            return Err(Error::shape(format!("weighted_sum: {} weights for {} elements", weights.len(), xv.numel())));
        }
        let s: f64 = xv.data().iter().zip(weights.iter()).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(T::of(s)), rg, Op::WeightedSum { x, weights }))
    }

    /// Normalized focal loss on binary logits.
    ///
    /// With `p_t = sigmoid(z)` on positives and `1 - sigmoid(z)` on negatives and
    /// focal weights `w = (1 - p_t)^gamma`, the loss is
    /// `-sum(w * ln(max(p_t, 1e-6))) / sum(w)`. The normalizer `sum(w)` is a
    /// constant for differentiation; pass `normalizer` to pin it explicitly.
    pub fn normalized_focal_loss(&mut self, logits: Var, target: &[bool], gamma: f64, normalizer: Option<f64>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.numel() == 0 {
            return Err(Error::InvalidArgument("normalized_focal_loss: empty input".into()));
        }
        if lv.numel() != target.len() {
            return Err(Error::shape(format!("normalized_focal_loss: {} logits vs {} targets", lv.numel(), target.len())));
        }
        const CLAMP: f64 = 1e-6;
        let n = lv.numel();
        let mut pt = Vec::with_capacity(n);
        let mut weight_sum = 0.0;
        for (z, &y) in lv.data().iter().zip(target) {
            let z = z.as_f64();
            let p = kernels::sigmoid_f64(if y { z } else { -z });
            weight_sum += (1.0 - p).powf(gamma);
            pt.push(p);
        }
        let norm = match normalizer {
            Some(s) => s,
            None if weight_sum > 0.0 => weight_sum,
            None => 1.0,
        };
        let mut loss = 0.0;
        for &p in &pt {
            loss -= (1.0 - p).powf(gamma) * p.max(CLAMP).ln();
        }
        loss /= norm;
        let rg = self.rg(&[logits]);
        let dx = if rg {
            pt.iter()
                .zip(target)
                .map(|(&p, &y)| {
                    let s = if y { 1.0 } else { -1.0 };
                    let q = 1.0 - p;
                    let mut d = gamma * p * q.powf(gamma) * p.max(CLAMP).ln();
                    if p >= CLAMP {
                        d -= q.powf(gamma + 1.0);
                    }
                    T::of(s * d / norm)
                })
                .collect()
        } else {
            Vec::new()
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite("normalized_focal_loss"));
        }
        Ok(self.push(Tensor::scalar(T::of(loss)), rg, Op::Loss { x: logits, dx }))
    }

    /// Mean binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.numel() == 0 || lv.numel() != target.len() {
            return Err(Error::shape(format!("bce_with_logits: {} logits vs {} targets", lv.numel(), target.len())));
        }
        let n = lv.numel() as f64;
        let mut loss = 0.0;
        let mut dx = Vec::with_capacity(lv.numel());
        for (z, &y) in lv.data().iter().zip(target) {
            let z = z.as_f64();
            let y = if y { 1.0 } else { 0.0 };
            loss += z.max(0.0) - y * z + (-z.abs()).exp().ln_1p();
            dx.push(T::of((kernels::sigmoid_f64(z) - y) / n));
        }
        let rg = self.rg(&[logits]);
        if !rg {
            dx = Vec::new();
        }
        Ok(self.push(Tensor::scalar(T::of(loss / n)), rg, Op::Loss { x: logits, dx }))
    }

    /// Mean softmax cross-entropy of `logits[N,K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k) = self.value(logits).dims2()?;
        if targets.len() != n || targets.iter().any(|&t| t >= k) {
            return Err(Error::shape("cross_entropy: targets do not match logits".to_string()));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(k).enumerate() {
            softmax_row(row);
            loss -= row[targets[r]].as_f64().max(f64::MIN_POSITIVE).ln();
            row[targets[r]] -= T::one();
            row.iter_mut().for_each(|v| *v = T::of(v.as_f64() / n as f64));
        }
        let rg = self.rg(&[logits]);
        if !rg {
            probs = Vec::new();
        }
        Ok(self.push(Tensor::scalar(T::of(loss / n as f64)), rg, Op::Loss { x: logits, dx: probs }))
    }

    /// Reverse pass from a scalar `loss`; returns gradients of every leaf that
    /// requires one and is reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut leaves = HashMap::new();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { leaves, names: self.bindings.clone() });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                leaves.insert(Var(i), Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients { leaves, names: self.bindings.clone() })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(buf) = self.buf(grads, v) {
                        add_into(buf, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                if let Some(buf) = self.buf(grads, *a) {
                    buf.iter_mut().zip(g.iter().zip(&bv)).for_each(|(d, (&gi, &bi))| *d += gi * bi);
                }
                if let Some(buf) = self.buf(grads, *b) {
                    buf.iter_mut().zip(g.iter().zip(&av)).for_each(|(d, (&gi, &ai))| *d += gi * ai);
                }
            }
            Op::Scale(x, s) => {
                if let Some(buf) = self.buf(grads, *x) {
                    buf.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * *s);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(buf) = self.buf(grads, *x) {
                    add_into(buf, g);
                }
                let m = self.value(*b).numel();
                if let Some(buf) = self.buf(grads, *b) {
                    for row in g.chunks(m) {
                        add_into(buf, row);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.value(*a).dims2()?;
                let m = self.value(*b).shape()[1];
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                if let Some(buf) = self.buf(grads, *a) {
                    gemm(n, m, k, T::one(), g, Layout::row_major(m), bv, Layout::transposed(m), T::one(), buf, Layout::row_major(k));
                }
                if let Some(buf) = self.buf(grads, *b) {
                    gemm(k, n, m, T::one(), av, Layout::transposed(k), g, Layout::row_major(m), T::one(), buf, Layout::row_major(m));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2()?;
                if let Some(buf) = self.buf(grads, *x) {
                    add_into(buf, &transpose_buf(g, c, r));
                }
            }
            Op::Reshape(x) => {
                if let Some(buf) = self.buf(grads, *x) {
                    add_into(buf, g);
                }
            }
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(*x, *w, *b, geom, g, grads),
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.value(*gamma).numel();
                let gam = self.value(*gamma).data();
                if let Some(buf) = self.buf(grads, *gamma) {
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        buf.iter_mut().zip(gr.iter().zip(xr)).for_each(|(o, (&gi, &xi))| *o += gi * xi);
                    }
                }
                if let Some(buf) = self.buf(grads, *beta) {
                    for gr in g.chunks(d) {
                        add_into(buf, gr);
                    }
                }
                if let Some(buf) = self.buf(grads, *x) {
                    for (r, (gr, xr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = gr[j].as_f64() * gam[j].as_f64();
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xr[j].as_f64();
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        let rs = rstd[r].as_f64();
                        for j in 0..d {
                            let dxh = gr[j].as_f64() * gam[j].as_f64();
                            buf[r * d + j] += T::of(rs * (dxh - mean_dxh - xr[j].as_f64() * mean_dxh_xh));
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                if let Some(buf) = self.buf(grads, *x) {
                    for ((gr, yr), br) in g.chunks(d).zip(y.chunks(d)).zip(buf.chunks_mut(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                        for j in 0..d {
                            br[j] += T::of(yr[j].as_f64() * (gr[j].as_f64() - dot));
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(buf) = self.buf(grads, *x) {
                    for ((d, &gi), &xi) in buf.iter_mut().zip(g).zip(xv) {
                        *d += gi * T::of(kernels::gelu_f64(xi.as_f64()).1);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(buf) = self.buf(grads, *x) {
                    for ((d, &gi), &yi) in buf.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (T::one() - yi);
                    }
                }
            }
            Op::Resample { x, plan } => {
                let c = self.value(*x).shape()[0];
                if let Some(buf) = self.buf(grads, *x) {
                    plan.apply_transpose(g, c, buf);
                }
            }
            Op::MaxPool { x, argmax } => {
                let (c, h, w) = self.value(*x).dims3()?;
                let per = argmax.len() / c.max(1);
                if let Some(buf) = self.buf(grads, *x) {
                    for (j, (&gi, &a)) in g.iter().zip(argmax).enumerate() {
                        buf[(j / per) * h * w + a as usize] += gi;
                    }
                }
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).numel();
                    if let Some(buf) = self.buf(grads, x) {
                        add_into(buf, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Attention { qkv, heads, probs } => self.attention_backward(*qkv, *heads, probs, g, grads)?,
            Op::Sum(x) => {
                if let Some(buf) = self.buf(grads, *x) {
                    buf.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = T::of(self.value(*x).numel() as f64);
                if let Some(buf) = self.buf(grads, *x) {
                    buf.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::WeightedSum { x, weights } => {
                if let Some(buf) = self.buf(grads, *x) {
                    buf.iter_mut().zip(weights.iter()).for_each(|(d, &w)| *d += g[0] * w);
                }
            }
            Op::Loss { x, dx } => {
                if let Some(buf) = self.buf(grads, *x) {
                    buf.iter_mut().zip(dx).for_each(|(d, &v)| *d += g[0] * v);
                }
            }
        }
        Ok(())
    }

    /// Gradient accumulator for `v`, or `None` when `v` needs no gradient.
    fn buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
    }

    fn conv2d_backward(&self, x: Var, w: Var, b: Option<Var>, geom: &ConvGeom, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (k, p) = (geom.k(), geom.p());
        let cout = self.value(w).shape()[0];
        if let Some(b) = b {
            if let Some(buf) = self.buf(grads, b) {
                for (co, row) in g.chunks(p).enumerate() {
                    buf[co] += T::of(row.iter().map(|v| v.as_f64()).sum());
                }
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let need_w = self.nodes[w.0].requires_grad;
        let need_x = self.nodes[x.0].requires_grad;
        if geom.is_pointwise() {
            if need_w {
                let buf = self.buf(grads, w).unwrap();
                gemm(cout, p, k, T::one(), g, Layout::row_major(p), xv, Layout::transposed(p), T::one(), buf, Layout::row_major(k));
            }
            if need_x {
                let buf = self.buf(grads, x).unwrap();
                gemm(k, cout, p, T::one(), wv, Layout::transposed(k), g, Layout::row_major(p), T::one(), buf, Layout::row_major(p));
            }
            return;
        }
        if !need_w && !need_x {
            return;
        }
        let tile = geom.tile();
        let mut cols = vec![T::zero(); k * tile];
        let mut p0 = 0;
        while p0 < p {
            let p1 = (p0 + tile).min(p);
            let width = p1 - p0;
            if need_w {
                im2col(xv, geom, p0, p1, &mut cols);
                let buf = self.buf(grads, w).unwrap();
                gemm(cout, width, k, T::one(), g, Layout::row_major(p).at(p0), &cols, Layout::transposed(width), T::one(), buf, Layout::row_major(k));
            }
            if need_x {
                gemm(k, cout, width, T::one(), wv, Layout::transposed(k), g, Layout::row_major(p).at(p0), T::zero(), &mut cols, Layout::row_major(width));
                let buf = self.buf(grads, x).unwrap();
                col2im(&cols[..k * width], geom, p0, p1, buf);
            }
            p0 = p1;
        }
    }

    fn attention_backward(&self, qkv: Var, heads: usize, probs: &[T], g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let (n, d3) = self.value(qkv).dims2()?;
        let d = d3 / 3;
        let hd = d / heads;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let src = self.value(qkv).data();
        let Some(buf) = self.buf(grads, qkv) else { return Ok(()) };
        let mut dp = vec![T::zero(); n * n];
        for h in 0..heads {
            let p = &probs[h * n * n..(h + 1) * n * n];
            // dP = dO V^T
            gemm(n, hd, n, T::one(), g, Layout::row_major(d).at(h * hd), src, Layout::transposed(d3).at(2 * d + h * hd), T::zero(), &mut dp, Layout::row_major(n));
            // dV += P^T dO
            gemm(n, n, hd, T::one(), p, Layout::transposed(n), g, Layout::row_major(d).at(h * hd), T::one(), buf, Layout::row_major(d3).at(2 * d + h * hd));
            for (dr, pr) in dp.chunks_mut(n).zip(p.chunks(n)) {
                let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                for (dv, &pv) in dr.iter_mut().zip(pr) {
                    *dv = T::of(pv.as_f64() * (dv.as_f64() - dot)) * scale;
                }
            }
            // dQ += dS K ; dK += dS^T Q
            gemm(n, n, hd, T::one(), &dp, Layout::row_major(n), src, Layout::row_major(d3).at(d + h * hd), T::one(), buf, Layout::row_major(d3).at(h * hd));
            gemm(n, n, hd, T::one(), &dp, Layout::transposed(n), src, Layout::row_major(d3).at(h * hd), T::one(), buf, Layout::row_major(d3).at(d + h * hd));
        }
        Ok(())
    }
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn transpose_buf<T: Float>(x: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

fn softmax_row<T: Float>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += v.as_f64();
    }
    let inv = T::of(1.0 / sum);
    row.iter_mut().for_each(|v| *v *= inv);
}
