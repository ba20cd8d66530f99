//! Shared finite-difference fixtures for the autodiff and acceptance suites.
#![allow(dead_code)]


pub mod geometry;
pub mod jbu;
pub mod stubs;

use clickprobe::tensor::{GradCheck, GradCheckReport, Graph, Tensor, Var};
use clickprobe::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = fn(u64) -> Result<GradCheckReport>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

/// Values spaced far enough apart that max pooling has no near-ties within the FD step.
fn spaced_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// Rows whose standard deviation is at least 0.25. Layer norm is close to a
/// sign function on nearly constant rows, where a step of 1e-3 is not small.
fn spread_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut out = Vec::with_capacity(n * d);
    while out.len() < n * d {
        let row: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        if var >= 0.0625 {
            out.extend(row);
        }
    }
    Tensor::new(vec![n, d], out).unwrap()
}

fn check(f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>, x: &Tensor<f64>, seed: u64) -> Result<GradCheckReport> {
    GradCheck { seed, ..GradCheck::default() }.run(f, x)
}

fn conv_input(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (cin, cout) = (r.random_range(1..4), r.random_range(1..4));
    let k = [1, 3][r.random_range(0..2)];
    let (h, w) = (r.random_range(k..7), r.random_range(k..7));
    let stride = r.random_range(1..3);
    let pad = r.random_range(0..2);
    let x = rand_tensor(&[cin, h, w], &mut r);
    let wt = rand_tensor(&[cout, cin, k, k], &mut r);
    let b = rand_tensor(&[cout], &mut r);
    check(
        move |g, v| {
            let (wv, bv) = (g.constant(wt.clone()), g.constant(b.clone()));
            g.conv2d(v, wv, Some(bv), stride, pad)
        },
        &x,
        seed,
    )
}

fn conv_weight(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = rand_tensor(&[2, 5, 5], &mut r);
    let wt = rand_tensor(&[3, 2, 3, 3], &mut r);
    let b = rand_tensor(&[3], &mut r);
    let stride = 1 + (seed as usize % 2);
    check(
        move |g, v| {
            let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
            g.conv2d(xv, v, Some(bv), stride, 1)
        },
        &wt,
        seed,
    )
}

fn conv_bias(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = rand_tensor(&[2, 4, 4], &mut r);
    let wt = rand_tensor(&[3, 2, 2, 2], &mut r);
    let b = rand_tensor(&[3], &mut r);
    check(
        move |g, v| {
            let (xv, wv) = (g.constant(x.clone()), g.constant(wt.clone()));
            let y = g.conv2d(xv, wv, Some(v), 2, 0)?;
            Ok(g.gelu(y))
        },
        &b,
        seed,
    )
}

fn matmul_lhs(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (n, k, m) = (r.random_range(1..6), r.random_range(1..6), r.random_range(1..6));
    let a = rand_tensor(&[n, k], &mut r);
    let b = rand_tensor(&[k, m], &mut r);
    check(move |g, v| { let bv = g.constant(b.clone()); g.matmul(v, bv) }, &a, seed)
}

fn matmul_rhs(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let a = rand_tensor(&[4, 3], &mut r);
    let b = rand_tensor(&[3, 5], &mut r);
    check(move |g, v| { let av = g.constant(a.clone()); g.matmul(av, v) }, &b, seed)
}

fn layernorm_input(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (n, d) = (r.random_range(1..5), r.random_range(2..8));
    let x = spread_rows(n, d, &mut r);
    let gamma = rand_tensor(&[d], &mut r);
    let beta = rand_tensor(&[d], &mut r);
    check(
        move |g, v| {
            let (gv, bv) = (g.constant(gamma.clone()), g.constant(beta.clone()));
            g.layernorm(v, gv, bv, 1e-6)
        },
        &x,
        seed,
    )
}

fn layernorm_affine(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = spread_rows(3, 6, &mut r);
    let beta = rand_tensor(&[6], &mut r);
    let gamma = rand_tensor(&[6], &mut r);
    check(
        move |g, v| {
            let (xv, bv) = (g.constant(x.clone()), g.constant(beta.clone()));
            g.layernorm(xv, v, bv, 1e-6)
        },
        &gamma,
        seed,
    )
}

fn softmax(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = rand_tensor(&[r.random_range(1..4), r.random_range(1..7)], &mut r);
    check(|g, v| g.softmax(v), &x, seed)
}

fn gelu(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = Tensor::uniform(vec![r.random_range(1..20)], -3.0, 3.0, &mut r);
    check(|g, v| Ok(g.gelu(v)), &x, seed)
}

fn sigmoid(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = Tensor::uniform(vec![r.random_range(1..20)], -4.0, 4.0, &mut r);
    check(|g, v| Ok(g.sigmoid(v)), &x, seed)
}

fn bilinear(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = rand_tensor(&[r.random_range(1..3), r.random_range(1..5), r.random_range(1..5)], &mut r);
    let (oh, ow) = (r.random_range(1..9), r.random_range(1..9));
    check(move |g, v| g.bilinear_resize(v, oh, ow), &x, seed)
}

fn nearest(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = rand_tensor(&[2, r.random_range(1..5), r.random_range(1..5)], &mut r);
    let (oh, ow) = (r.random_range(1..9), r.random_range(1..9));
    check(move |g, v| g.nearest_resize(v, oh, ow), &x, seed)
}

fn maxpool(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = spaced_tensor(&[r.random_range(1..3), r.random_range(1..6), r.random_range(1..6)], &mut r);
    check(|g, v| g.maxpool2x2(v), &x, seed)
}

fn concat(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (h, w) = (r.random_range(1..4), r.random_range(1..4));
    let other = rand_tensor(&[2, h, w], &mut r);
    let x = rand_tensor(&[r.random_range(1..3), h, w], &mut r);
    check(
        move |g, v| {
            let o = g.constant(other.clone());
            let c = g.concat_channels(&[o, v, v])?;
            Ok(g.gelu(c))
        },
        &x,
        seed,
    )
}

fn attention(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let heads = r.random_range(1..4);
    let hd = r.random_range(1..4);
    let n = r.random_range(1..6);
    let x = rand_tensor(&[n, 3 * heads * hd], &mut r);
    check(move |g, v| g.attention(v, heads), &x, seed)
}

fn elementwise(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (n, m) = (r.random_range(1..4), r.random_range(1..5));
    let x = rand_tensor(&[n, m], &mut r);
    let other = rand_tensor(&[n, m], &mut r);
    let bias = rand_tensor(&[m], &mut r);
    check(
        move |g, v| {
            let o = g.constant(other.clone());
            let b = g.constant(bias.clone());
            let a = g.add(v, o)?;
            let p = g.mul(a, v)?;
            let s = g.scale(p, -0.7);
            let t = g.transpose(s)?;
            let t = g.transpose(t)?;
            let t = g.add_bias(t, b)?;
            let t = g.reshape(t, &[n * m])?;
            Ok(g.mean(t))
        },
        &x,
        seed,
    )
}

fn focal_loss(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let n = r.random_range(4..40);
    let logits: Vec<f64> = (0..n).map(|_| r.random_range(-4.0..4.0)).collect();
    let target: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
    let gamma = [0.0, 1.0, 2.0, 2.5][seed as usize % 4];
    // The normalizer is a constant for differentiation: pin it at the base point.
    let mut g = Graph::<f64>::new();
    let z = g.leaf(Tensor::new(vec![1, 1, n], logits.clone())?, true);
    let loss = g.normalized_focal_loss(z, &target, gamma, None)?;
    let analytic = g.backward(loss)?.get(z).unwrap().data().to_vec();
    let norm: f64 = logits
        .iter()
        .zip(&target)
        .map(|(&l, &y)| {
            let p = 1.0 / (1.0 + (-(if y { l } else { -l })).exp());
            (1.0 - p).powf(gamma)
        })
        .sum();
    GradCheck { seed, ..GradCheck::default() }.compare(
        &analytic,
        |p| {
            let mut g = Graph::<f64>::new();
            let z = g.constant(Tensor::new(vec![1, 1, n], p.to_vec())?);
            let l = g.normalized_focal_loss(z, &target, gamma, Some(norm))?;
            g.value(l).item()
        },
        &logits,
    )
}

fn bce(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let n = r.random_range(1..30);
    let x = Tensor::uniform(vec![n], -5.0, 5.0, &mut r);
    let target: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
    check(move |g, v| g.bce_with_logits(v, &target), &x, seed)
}

fn cross_entropy(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (n, k) = (r.random_range(1..5), r.random_range(2..6));
    let x = Tensor::uniform(vec![n, k], -3.0, 3.0, &mut r);
    let targets: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    check(move |g, v| g.cross_entropy(v, &targets), &x, seed)
}

fn composite(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = rand_tensor(&[2, 6, 6], &mut r);
    let w1 = rand_tensor(&[3, 2, 3, 3], &mut r);
    check(
        move |g, v| {
            let wv = g.constant(w1.clone());
            let y = g.conv2d(v, wv, None, 1, 1)?;
            let y = g.gelu(y);
            let y = g.bilinear_resize(y, 5, 7)?;
            Ok(g.sum(y))
        },
        &x,
        seed,
    )
}


/// Every differentiable op (and each loss) with its checker.
pub fn op_checks() -> Vec<(&'static str, Check)> {
    vec![
        ("conv2d/input", conv_input as Check),
        ("conv2d/weight", conv_weight),
        ("conv2d/bias", conv_bias),
        ("matmul/lhs", matmul_lhs),
        ("matmul/rhs", matmul_rhs),
        ("layernorm/input", layernorm_input),
        ("layernorm/gamma", layernorm_affine),
        ("softmax", softmax),
        ("gelu", gelu),
        ("sigmoid", sigmoid),
        ("bilinear_resize", bilinear),
        ("nearest_resize", nearest),
        ("maxpool2x2", maxpool),
        ("concat_channels", concat),
        ("attention", attention),
        ("add/mul/scale/transpose/bias/mean", elementwise),
        ("conv-gelu-resize-sum", composite),
        ("loss/normalized_focal", focal_loss),
        ("loss/bce", bce),
        ("loss/cross_entropy", cross_entropy),
    ]
}
