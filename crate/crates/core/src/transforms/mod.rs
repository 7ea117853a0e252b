//! Stochastic input transforms and the baseline preprocessors.
//!
//! [`gaussian_transform`], [`rand_disc`] and [`rand_mix`] are the three
//! randomized defenses. RandDisc and RandMix share the same cluster centers,
//! obtained by [`sample_candidates`] followed by [`select_centers`]. The
//! baselines ([`bit_depth`], [`tvm_denoise`], [`resize_padding`]) do not use
//! randomness except for the random placement in ResizePadding; each has a
//! differentiable counterpart used when attacking it.

mod bitdepth;
mod clusters;
mod disc;
mod gaussian;
mod resample;
mod tvm;

pub use bitdepth::{bit_depth, bit_depth_smooth, bit_depth_smooth_vjp};
pub use clusters::{sample_candidates, select_centers, Candidates, ClusterSet};
pub use disc::{
    rand_disc, rand_disc_with_noise, rand_mix, rand_mix_input_jacobian_vp, rand_mix_vjp_with_noise, rand_mix_with_noise,
};
pub use gaussian::gaussian_transform;
pub use resample::{
    downsample_maxpool, maxpool_with_argmax, resize_padding, resize_padding_with_placement, upsample_bilinear,
    BilinearMap, DownsampleConfig, Placement,
};
pub use tvm::{tv_objective, tv_objective_gradient, tvm_denoise, tvm_denoise_trace, TvmTrace, TV_STEP};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::Image;
use crate::rng::RngStream;

/// Hyperparameters of the randomized defenses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformConfig {
    /// Per-pixel noise scale.
    pub sigma: f64,
    /// Noise added to each sampled candidate center.
    pub tau: f64,
    /// Number of candidates drawn from the image.
    pub s: usize,
    /// Number of cluster centers.
    pub k: usize,
    /// Inverse temperature of the center sampler.
    pub gamma: f64,
    /// Inverse temperature of the RandMix softmax.
    pub alpha: f64,
    /// Pixel range `t`.
    pub t: f64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self::mnist()
    }
}

impl TransformConfig {
    /// `s = 100`, `γ = α = 40 / t²`.
    pub fn with_defaults(t: f64, k: usize, sigma: f64, tau: f64) -> Self {
        Self {
            sigma,
            tau,
            s: 100,
            k,
            gamma: 40.0 / (t * t),
            alpha: 40.0 / (t * t),
            t,
        }
    }

    /// Black-and-white MNIST setting: two clusters, `σ = τ = 0.15` on `[0, 1]`.
    pub fn mnist() -> Self {
        Self::with_defaults(1.0, 2, 0.15, 0.15)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(invalid("sigma", "must be finite and non-negative"));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(invalid("tau", "must be finite and non-negative"));
        }
        if self.k == 0 {
            return Err(invalid("k", "need at least one cluster"));
        }
        if self.k > self.s {
            return Err(invalid("k", format!("k = {} exceeds s = {}", self.k, self.s)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(invalid("gamma", "must be finite and non-negative"));
        }
        if !(self.alpha > 0.0) {
            return Err(invalid("alpha", "must be positive"));
        }
        if !(self.t > 0.0) {
            return Err(invalid("t", "must be positive"));
        }
        Ok(())
    }
}

/// Candidate sampling followed by center selection, with the sizes and
/// scales from `cfg`.
pub fn draw_centers(x: &Image, cfg: &TransformConfig, rng: &mut RngStream) -> Result<ClusterSet> {
    let candidates = sample_candidates(x, cfg.s, cfg.tau, rng)?;
    select_centers(&candidates, cfg.k, cfg.gamma, rng)
}
