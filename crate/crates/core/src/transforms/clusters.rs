use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::rng::RngStream;

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Noisy copies of randomly chosen pixels, `b_j = x_{i_j} + ε_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    dim: usize,
    values: Vec<f64>,
}

impl Candidates {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || !values.len().is_multiple_of(dim) {
            return Err(invalid(
                "candidates",
                "length must be a positive multiple of the dimension",
            ));
        }
        Ok(Self { dim, values })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, j: usize) -> &[f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.dim)
    }
}

/// The `k` centers each pixel gets snapped to (RandDisc) or mixed over
/// (RandMix). Duplicates are allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    dim: usize,
    values: Vec<f64>,
}

impl ClusterSet {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || !values.len().is_multiple_of(dim) {
            return Err(invalid("centers", "length must be a multiple of the dimension"));
        }
        if values.is_empty() {
            return Err(Error::Empty("cluster set"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("centers", "every center must be finite"));
        }
        Ok(Self { dim, values })
    }

    /// Scalar centers for single-channel images.
    pub fn scalar(values: &[f64]) -> Result<Self> {
        Self::new(1, values.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn center(&self, j: usize) -> &[f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.dim)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Index of the closest center; ties go to the lowest index.
    pub fn nearest(&self, point: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, c) in self.iter().enumerate() {
            let d = squared_distance(point, c);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        best
    }

    pub(crate) fn ensure_dim(&self, dim: usize) -> Result<()> {
        if self.dim == dim {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: format!("{dim}-channel centers"),
                got: format!("{}-channel centers", self.dim),
            })
        }
    }
}

/// Draws `s` pixel indices uniformly with replacement and perturbs each
/// chosen pixel with `N(0, τ²I)` noise.
pub fn sample_candidates(x: &Image, s: usize, tau: f64, rng: &mut RngStream) -> Result<Candidates> {
    if s == 0 {
        return Err(invalid("s", "need at least one candidate"));
    }
    if x.pixel_count() == 0 {
        return Err(Error::Empty("image"));
    }
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(invalid("tau", "must be finite and non-negative"));
    }
    let q = x.channels();
    let mut values = Vec::with_capacity(s * q);
    for _ in 0..s {
        let i = rng.below(x.pixel_count());
        for &v in x.pixel(i) {
            let noise = if tau > 0.0 { tau * rng.standard_normal() } else { 0.0 };
            values.push(v + noise);
        }
    }
    Candidates::new(q, values)
}

/// Adaptive seeding in the spirit of k-means++: the first center is uniform
/// over the candidates; each later center is drawn from all candidates with
/// probability proportional to `exp(γ · min_ℓ ‖c_ℓ − b‖²)`, so far-away
/// candidates are favored. Candidates are never removed.
pub fn select_centers(candidates: &Candidates, k: usize, gamma: f64, rng: &mut RngStream) -> Result<ClusterSet> {
    let s = candidates.len();
    if s == 0 {
        return Err(Error::Empty("candidate list"));
    }
    if k == 0 {
        return Err(invalid("k", "need at least one cluster"));
    }
    if k > s {
        return Err(invalid("k", format!("k = {k} exceeds {s} candidates")));
    }
    let dim = candidates.dim();
    let mut values = Vec::with_capacity(k * dim);
    let first = rng.below(s);
    values.extend_from_slice(candidates.get(first));

    let mut min_dist: Vec<f64> = candidates
        .iter()
        .map(|b| squared_distance(b, candidates.get(first)))
        .collect();
    let mut weights = vec![0.0; s];
    for _ in 1..k {
        let top = min_dist.iter().fold(f64::NEG_INFINITY, |m, &d| m.max(gamma * d));
        for (w, d) in weights.iter_mut().zip(&min_dist) {
            *w = (gamma * d - top).exp();
        }
        let pick = rng.weighted_index(&weights);
        let chosen = candidates.get(pick).to_vec();
        for (d, b) in min_dist.iter_mut().zip(candidates.iter()) {
            *d = d.min(squared_distance(b, &chosen));
        }
        values.extend_from_slice(&chosen);
    }
    ClusterSet::new(dim, values)
}
