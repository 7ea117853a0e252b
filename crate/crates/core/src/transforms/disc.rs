//! RandDisc (nearest-center snapping) and its softmax relaxation RandMix.
//!
//! Both draw their per-pixel noise as one `gaussian_sample` call over all
//! image values, so the same stream state reproduces the same noise for
//! either transform. The `*_with_noise` variants take that noise
//! explicitly.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{gaussian_sample, RngStream};

use super::ClusterSet;

fn check_noise(x: &Image, noise: &[f64]) -> Result<()> {
    if noise.len() != x.data().len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} noise values", x.data().len()),
            got: format!("{}", noise.len()),
        });
    }
    Ok(())
}

/// `x̃_i = argmin_c ‖x_i + w_i − c‖₂`.
pub fn rand_disc(x: &Image, centers: &ClusterSet, sigma: f64, rng: &mut RngStream) -> Result<Image> {
    centers.ensure_dim(x.channels())?;
    let noise = gaussian_sample(x.data().len(), sigma, rng)?;
    rand_disc_with_noise(x, centers, &noise)
}

pub fn rand_disc_with_noise(x: &Image, centers: &ClusterSet, noise: &[f64]) -> Result<Image> {
    centers.ensure_dim(x.channels())?;
    check_noise(x, noise)?;
    let q = x.channels();
    let mut out = Vec::with_capacity(x.data().len());
    let mut noisy = vec![0.0; q];
    for (pixel, w) in x.pixels().zip(noise.chunks_exact(q)) {
        for ((n, p), w) in noisy.iter_mut().zip(pixel).zip(w) {
            *n = p + w;
        }
        out.extend_from_slice(centers.center(centers.nearest(&noisy)));
    }
    x.with_data(out)
}

/// Softmax weights `exp(−α‖v − c_j‖²)` normalized over `j`, written into
/// `weights`. The largest exponent is subtracted first.
fn mixture_weights(noisy: &[f64], centers: &ClusterSet, alpha: f64, weights: &mut [f64]) {
    let mut top = f64::NEG_INFINITY;
    for (w, c) in weights.iter_mut().zip(centers.iter()) {
        let d: f64 = noisy.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        *w = -alpha * d;
        top = top.max(*w);
    }
    let mut total = 0.0;
    for w in weights.iter_mut() {
        *w = (*w - top).exp();
        total += *w;
    }
    for w in weights.iter_mut() {
        *w /= total;
    }
}

/// `x̃_i = Σ_j c_j · softmax_j(−α‖x_i + w_i − c_j‖²)`.
pub fn rand_mix(x: &Image, centers: &ClusterSet, sigma: f64, alpha: f64, rng: &mut RngStream) -> Result<Image> {
    centers.ensure_dim(x.channels())?;
    let noise = gaussian_sample(x.data().len(), sigma, rng)?;
    rand_mix_with_noise(x, centers, alpha, &noise)
}

pub fn rand_mix_with_noise(x: &Image, centers: &ClusterSet, alpha: f64, noise: &[f64]) -> Result<Image> {
    centers.ensure_dim(x.channels())?;
    check_noise(x, noise)?;
    if !(alpha > 0.0) {
        return Err(crate::error::invalid("alpha", "must be positive"));
    }
    let q = x.channels();
    let mut out = vec![0.0; x.data().len()];
    let mut noisy = vec![0.0; q];
    let mut weights = vec![0.0; centers.k()];
    for ((pixel, w), o) in x.pixels().zip(noise.chunks_exact(q)).zip(out.chunks_exact_mut(q)) {
        for ((n, p), w) in noisy.iter_mut().zip(pixel).zip(w) {
            *n = p + w;
        }
        mixture_weights(&noisy, centers, alpha, &mut weights);
        for (p, c) in weights.iter().zip(centers.iter()) {
            for (o, cv) in o.iter_mut().zip(c) {
                *o += p * cv;
            }
        }
    }
    x.with_data(out)
}

/// Vector–Jacobian product of RandMix with respect to the input, with the
/// centers and noise held fixed. `rng` must be in the same state as for the
/// paired forward call so the same noise is regenerated.
///
/// Per pixel the Jacobian is `2α · Σ_j p_j (c_j − m)(c_j − m)ᵀ`, twice α
/// times the covariance of the centers under the softmax weights `p`.
pub fn rand_mix_input_jacobian_vp(
    x: &Image,
    centers: &ClusterSet,
    sigma: f64,
    alpha: f64,
    rng: &mut RngStream,
    upstream: &Image,
) -> Result<Image> {
    x.ensure_same_shape(upstream)?;
    let noise = gaussian_sample(x.data().len(), sigma, rng)?;
    let grad = rand_mix_vjp_with_noise(x, centers, alpha, &noise, upstream.data())?;
    x.with_raw_data(grad)
}

pub fn rand_mix_vjp_with_noise(
    x: &Image,
    centers: &ClusterSet,
    alpha: f64,
    noise: &[f64],
    upstream: &[f64],
) -> Result<Vec<f64>> {
    centers.ensure_dim(x.channels())?;
    check_noise(x, noise)?;
    check_noise(x, upstream)?;
    let q = x.channels();
    let k = centers.k();
    let mut grad = vec![0.0; x.data().len()];
    let mut noisy = vec![0.0; q];
    let mut weights = vec![0.0; k];
    let mut mean = vec![0.0; q];
    for (((pixel, w), u), g) in x
        .pixels()
        .zip(noise.chunks_exact(q))
        .zip(upstream.chunks_exact(q))
        .zip(grad.chunks_exact_mut(q))
    {
        for ((n, p), w) in noisy.iter_mut().zip(pixel).zip(w) {
            *n = p + w;
        }
        mixture_weights(&noisy, centers, alpha, &mut weights);
        mean.iter_mut().for_each(|m| *m = 0.0);
        for (p, c) in weights.iter().zip(centers.iter()) {
            for (m, cv) in mean.iter_mut().zip(c) {
                *m += p * cv;
            }
        }
        for (p, c) in weights.iter().zip(centers.iter()) {
            let proj: f64 = c.iter().zip(&mean).zip(u).map(|((cv, m), u)| (cv - m) * u).sum();
            for ((g, cv), m) in g.iter_mut().zip(c).zip(&mean) {
                *g += 2.0 * alpha * p * (cv - m) * proj;
            }
        }
    }
    Ok(grad)
}
