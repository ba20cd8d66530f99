//! Central finite-difference gradient checking in `f64`.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1)` over checked elements.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub passed: bool,
}

/// Settings for a finite-difference check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tol: f64,
    /// Check a seeded random subset of at most this many elements.
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-3, tol: 1e-4, max_elements: None, seed: 0x5eed }
    }
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for each requested index.
pub fn numeric_gradient(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    indices: &[usize],
    h: f64,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            probe[i] = x[i] + h;
            let up = f(&probe)?;
            probe[i] = x[i] - h;
            let down = f(&probe)?;
            probe[i] = x[i];
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

impl GradCheck {
    pub fn sampled(mut self, n: usize) -> Self {
        self.max_elements = Some(n);
        self
    }

    pub fn tolerance(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    fn indices(&self, len: usize) -> Vec<usize> {
        match self.max_elements {
            Some(n) if n < len => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let mut idx = sample(&mut rng, len, n).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..len).collect(),
        }
    }

    /// Compare a caller-supplied analytic gradient against central differences of `f`.
    pub fn compare(
        &self,
        analytic: &[f64],
        f: impl FnMut(&[f64]) -> Result<f64>,
        x: &[f64],
    ) -> Result<GradCheckReport> {
        if analytic.len() != x.len() {
            return Err(Error::shape(format!(
                "gradcheck: {} analytic entries for {} inputs",
                analytic.len(),
                x.len()
            )));
        }
        let idx = self.indices(x.len());
        let numeric = numeric_gradient(f, x, &idx, self.step)?;
        let mut worst = (0.0f64, 0usize);
        for (&i, &n) in idx.iter().zip(&numeric) {
            let a = analytic[i];
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
            if !err.is_finite() || err > worst.0 {
                worst = (if err.is_finite() { err } else { f64::INFINITY }, i);
            }
        }
        Ok(GradCheckReport {
            max_rel_error: worst.0,
            worst_index: worst.1,
            checked: idx.len(),
            passed: worst.0 < self.tol,
        })
    }

    /// Check `f` with respect to its input `x`. Non-scalar outputs are reduced
    /// by a fixed seeded random projection before differentiation.
    pub fn run<F>(&self, f: F, x: &Tensor<f64>) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
    {
        let eval = |g: &mut Graph<f64>, input: Var| -> Result<Var> {
            let out = f(g, input)?;
            if g.value(out).numel() == 1 {
                return Ok(out);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9);
            let w: Vec<f64> = (0..g.value(out).numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
            g.weighted_sum(out, Arc::new(w))
        };

        let mut g = Graph::<f64>::new();
        let input = g.leaf(x.clone(), true);
        let loss = eval(&mut g, input)?;
        let grads = g.backward(loss)?;
        let analytic = match grads.get(input) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; x.numel()],
        };
        let shape = x.shape().to_vec();
        self.compare(
            &analytic,
            |probe| {
                let mut g = Graph::<f64>::new();
                let input = g.leaf(Tensor::new(shape.clone(), probe.to_vec())?, false);
                let out = eval(&mut g, input)?;
                g.value(out).item()
            },
            x.data(),
        )
    }
}

/// Central-difference check of `f` at `x` with step `h` and tolerance `tol`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    GradCheck { step: h, tol, ..GradCheck::default() }.run(f, x)
}
