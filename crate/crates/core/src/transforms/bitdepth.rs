//! Uniform bit-depth reduction and its logistic relaxation.
//!
//! With `L = 2^bits − 1` the levels are `ℓ·t/L`. The hard quantizer writes
//! the output as a staircase, `(t/L) · Σ_{ℓ=1..L} step(v − θ_ℓ)` with
//! thresholds `θ_ℓ = (ℓ − ½)·t/L` and `step(0) = 0`, so exact midpoints round
//! down. The smooth version swaps each step for `σ(α·(v − θ_ℓ))`.

use crate::error::{invalid, Result};
use crate::image::Image;

fn levels(bits: u32) -> Result<f64> {
    if !(1..=8).contains(&bits) {
        return Err(invalid("bits", format!("must be in 1..=8, got {bits}")));
    }
    Ok(((1u32 << bits) - 1) as f64)
}

fn threshold(level: usize, top: f64, t: f64) -> f64 {
    (level as f64 - 0.5) * t / top
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn bit_depth(x: &Image, bits: u32) -> Result<Image> {
    let top = levels(bits)?;
    let t = x.range();
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let count = (1..=top as usize).filter(|&l| v > threshold(l, top, t)).count();
            count as f64 * t / top
        })
        .collect();
    x.with_data(data)
}

pub fn bit_depth_smooth(x: &Image, bits: u32, alpha: f64) -> Result<Image> {
    let top = levels(bits)?;
    if !(alpha > 0.0) {
        return Err(invalid("alpha", "must be positive"));
    }
    let t = x.range();
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let s: f64 = (1..=top as usize)
                .map(|l| logistic(alpha * (v - threshold(l, top, t))))
                .sum();
            s * t / top
        })
        .collect();
    x.with_data(data)
}

/// Elementwise derivative of [`bit_depth_smooth`] times `upstream`.
pub fn bit_depth_smooth_vjp(x: &Image, bits: u32, alpha: f64, upstream: &[f64]) -> Result<Vec<f64>> {
    let top = levels(bits)?;
    let t = x.range();
    if upstream.len() != x.data().len() {
        return Err(crate::error::Error::ShapeMismatch {
            expected: format!("{}", x.data().len()),
            got: format!("{}", upstream.len()),
        });
    }
    Ok(x.data()
        .iter()
        .zip(upstream)
        .map(|(&v, &u)| {
            let d: f64 = (1..=top as usize)
                .map(|l| {
                    let s = logistic(alpha * (v - threshold(l, top, t)));
                    alpha * s * (1.0 - s)
                })
                .sum();
            u * d * t / top
        })
        .collect())
}
