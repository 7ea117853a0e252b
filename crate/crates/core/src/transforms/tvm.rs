//! Total-variation denoising by plain gradient descent.
//!
//! Objective: `ℓ(z) = ½‖z − x‖² + λ·TV(z)` where `TV` sums
//! `√(d² + μ²)` over horizontal and vertical neighbor differences `d` of
//! each channel, with `μ = 1e-6·t`. Each iteration is
//! `z ← z − h·∇ℓ(z)` starting from `z = x`, where `h` starts at `TV_STEP`
//! and is halved until the objective does not increase. The tiny `μ` makes
//! the curvature near flat regions about `1/μ`, so a fixed step oscillates.

use crate::error::{invalid, Result};
use crate::image::Image;

/// Initial gradient-descent step size of every iteration.
pub const TV_STEP: f64 = 0.1;

const MAX_HALVINGS: usize = 30;

fn smoothing(t: f64) -> f64 {
    1e-6 * t
}

/// Visits every neighbor pair `(a, b)` as flat value indices.
fn for_each_pair(img: &Image, mut f: impl FnMut(usize, usize)) {
    let (w, h, q) = (img.width(), img.height(), img.channels());
    for row in 0..h {
        for col in 0..w {
            let here = (row * w + col) * q;
            for ch in 0..q {
                if col + 1 < w {
                    f(here + ch, here + q + ch);
                }
                if row + 1 < h {
                    f(here + ch, here + w * q + ch);
                }
            }
        }
    }
}

pub fn tv_objective(z: &Image, x: &Image, lambda: f64) -> Result<f64> {
    z.ensure_same_shape(x)?;
    let mu = smoothing(z.range());
    let fidelity: f64 = z
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| 0.5 * (a - b) * (a - b))
        .sum();
    let zd = z.data();
    let mut tv = 0.0;
    for_each_pair(z, |a, b| {
        let d = zd[a] - zd[b];
        tv += (d * d + mu * mu).sqrt();
    });
    Ok(fidelity + lambda * tv)
}

pub fn tv_objective_gradient(z: &Image, x: &Image, lambda: f64) -> Result<Vec<f64>> {
    z.ensure_same_shape(x)?;
    let mu = smoothing(z.range());
    let zd = z.data();
    let mut grad: Vec<f64> = zd.iter().zip(x.data()).map(|(a, b)| a - b).collect();
    for_each_pair(z, |a, b| {
        let d = zd[a] - zd[b];
        let s = lambda * d / (d * d + mu * mu).sqrt();
        grad[a] += s;
        grad[b] -= s;
    });
    Ok(grad)
}

/// Iterates of one denoising run, retained for backpropagation.
#[derive(Debug, Clone)]
pub struct TvmTrace {
    lambda: f64,
    iterates: Vec<Image>,
    steps: Vec<f64>,
}

impl TvmTrace {
    pub fn output(&self) -> &Image {
        self.iterates.last().expect("trace holds at least the start point")
    }

    pub fn iterates(&self) -> &[Image] {
        &self.iterates
    }

    /// Accepted step size of each iteration.
    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    /// Vector–Jacobian product of the whole unrolled descent with respect to
    /// the input `x`, holding the accepted step sizes fixed.
    pub fn vjp(&self, upstream: &[f64]) -> Vec<f64> {
        let mut g = upstream.to_vec();
        let mut dx = vec![0.0; g.len()];
        let Some(first) = self.iterates.first() else {
            return g;
        };
        let mu = smoothing(first.range());
        for (z, &h) in self.iterates[..self.iterates.len() - 1].iter().zip(&self.steps).rev() {
            for (d, gv) in dx.iter_mut().zip(&g) {
                *d += h * gv;
            }
            // g ← (1 − h)·g − h·λ·H(z)·g
            let zd = z.data();
            let mut hess_g = vec![0.0; g.len()];
            for_each_pair(z, |a, b| {
                let d = zd[a] - zd[b];
                let r = d * d + mu * mu;
                let curv = mu * mu / (r * r.sqrt());
                let diff = g[a] - g[b];
                hess_g[a] += curv * diff;
                hess_g[b] -= curv * diff;
            });
            for (gv, hv) in g.iter_mut().zip(&hess_g) {
                *gv = (1.0 - h) * *gv - h * self.lambda * hv;
            }
        }
        for (d, gv) in dx.iter_mut().zip(&g) {
            *d += gv;
        }
        dx
    }
}

pub fn tvm_denoise_trace(x: &Image, lambda: f64, iters: usize) -> Result<TvmTrace> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(invalid("lambda", "must be finite and non-negative"));
    }
    let mut iterates = Vec::with_capacity(iters + 1);
    let mut steps = Vec::with_capacity(iters);
    iterates.push(x.clone());
    for _ in 0..iters {
        let z = iterates.last().expect("non-empty");
        let current = tv_objective(z, x, lambda)?;
        let grad = tv_objective_gradient(z, x, lambda)?;
        let mut h = TV_STEP;
        let mut next = None;
        for _ in 0..MAX_HALVINGS {
            let trial = x.with_data(z.data().iter().zip(&grad).map(|(v, g)| v - h * g).collect())?;
            if tv_objective(&trial, x, lambda)? <= current {
                next = Some(trial);
                break;
            }
            h *= 0.5;
        }
        match next {
            Some(z) => {
                iterates.push(z);
                steps.push(h);
            }
            None => {
                // no descent direction at this precision: stay put
                iterates.push(z.clone());
                steps.push(0.0);
            }
        }
    }
    Ok(TvmTrace {
        lambda,
        iterates,
        steps,
    })
}

pub fn tvm_denoise(x: &Image, lambda: f64, iters: usize) -> Result<Image> {
    Ok(tvm_denoise_trace(x, lambda, iters)?.output().clone())
}
