use serde::{Deserialize, Serialize};

use super::kl::{kl_gaussian_bound, kl_randdisc_bound, KLBoundReport, KlEstimation};
use crate::attack::{majority_label, DefensePipeline, Transform};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::rng::RngStream;
use crate::transforms::downsample_maxpool;

/// Empirical class frequencies under `m` stochastic evaluations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginEstimate {
    pub votes: usize,
    pub class_frequencies: Vec<f64>,
    /// `freq[y] − max_{z≠y} freq[z]`.
    pub margin: f64,
}

impl MarginEstimate {
    pub fn from_counts(counts: &[usize], y: usize) -> Result<Self> {
        let votes: usize = counts.iter().sum();
        if votes == 0 {
            return Err(Error::Empty("vote counts"));
        }
        if y >= counts.len() {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: counts.len(),
            });
        }
        let class_frequencies: Vec<f64> = counts.iter().map(|&c| c as f64 / votes as f64).collect();
        let runner_up = class_frequencies
            .iter()
            .enumerate()
            .filter(|(z, _)| *z != y)
            .map(|(_, &f)| f)
            .fold(0.0, f64::max);
        Ok(Self {
            votes,
            margin: class_frequencies[y] - runner_up,
            class_frequencies,
        })
    }

    /// Hoeffding half-width `√(log(2K)/(2m))` of the frequency estimates.
    pub fn estimation_error(&self) -> f64 {
        ((2.0 * self.class_frequencies.len() as f64).ln() / (2.0 * self.votes as f64)).sqrt()
    }
}

pub fn estimate_margin(
    pipeline: &DefensePipeline<'_>,
    x: &Image,
    y: usize,
    m: usize,
    rng: &mut RngStream,
) -> Result<MarginEstimate> {
    let counts = pipeline.vote_counts(x, m, rng)?;
    MarginEstimate::from_counts(&counts, y)
}

/// Most frequent label over `m` stochastic evaluations; ties go to the
/// smallest class index.
pub fn majority_vote_classify(
    pipeline: &DefensePipeline<'_>,
    x: &Image,
    m: usize,
    rng: &mut RngStream,
) -> Result<usize> {
    Ok(majority_label(&pipeline.vote_counts(x, m, rng)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub u_kl: f64,
    pub cluster_term: f64,
    pub margin: f64,
    /// `margin − √(2·U_KL)`.
    pub residual: f64,
    pub certified: bool,
    /// `max(0, 1 − K·exp(−2·m·residual²))` when certified, else 0.
    pub vote_confidence: f64,
    pub votes: usize,
    pub margin_error: f64,
}

impl Certificate {
    /// Certified iff `margin > √(2·U)`. An infinite bound never certifies.
    pub fn decide(u_kl: f64, cluster_term: f64, estimate: &MarginEstimate) -> Self {
        let residual = estimate.margin - (2.0 * u_kl).sqrt();
        let certified = residual > 0.0;
        let k = estimate.class_frequencies.len() as f64;
        let vote_confidence = if certified {
            (1.0 - k * (-2.0 * estimate.votes as f64 * residual * residual).exp()).max(0.0)
        } else {
            0.0
        };
        Self {
            u_kl,
            cluster_term,
            margin: estimate.margin,
            residual,
            certified,
            vote_confidence,
            votes: estimate.votes,
            margin_error: estimate.estimation_error(),
        }
    }
}

/// The KL bound matching `transform` at budget `epsilon`. Downsampled
/// RandDisc is bounded on the pooled image.
pub fn kl_bound_for(
    transform: &Transform,
    x: &Image,
    epsilon: f64,
    estimation: &KlEstimation,
    rng: &mut RngStream,
) -> Result<KLBoundReport> {
    match transform {
        Transform::Gaussian { sigma } => kl_gaussian_bound(x, epsilon, *sigma),
        Transform::RandDisc { config } => kl_randdisc_bound(x, epsilon, config, estimation, rng),
        Transform::DownsampledRandDisc { config, downsample } => {
            let pooled = downsample_maxpool(x, *downsample)?;
            kl_randdisc_bound(&pooled, epsilon, config, estimation, rng)
        }
        _ => Err(Error::Uncertifiable(transform.name())),
    }
}

/// Certifies `x` against every ε-bounded perturbation: the margin of the
/// defended classifier at `x` must exceed `√(2·U_KL)`.
pub fn certify(
    x: &Image,
    y: usize,
    pipeline: &DefensePipeline<'_>,
    epsilon: f64,
    m: usize,
    estimation: &KlEstimation,
    rng: &mut RngStream,
) -> Result<Certificate> {
    if m == 0 {
        return Err(invalid("m", "need at least one vote"));
    }
    let bound = kl_bound_for(pipeline.transform(), x, epsilon, estimation, &mut rng.fork())?;
    let estimate = estimate_margin(pipeline, x, y, m, rng)?;
    Ok(Certificate::decide(bound.total, bound.cluster_term, &estimate))
}
