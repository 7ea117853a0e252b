use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::rng::RngStream;
use crate::transforms::{draw_centers, ClusterSet, TransformConfig};

/// Which closed form or estimator produced a [`KLBoundReport`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMethod {
    Gaussian,
    RandDisc,
}

/// How assignment laws are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentMode {
    /// Gaussian CDF differences; single-channel only.
    Exact,
    /// Frequencies over this many noise draws, smoothed before KL.
    MonteCarlo { draws: usize },
}

/// Sample sizes of the RandDisc bound estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KlEstimation {
    /// Center sets drawn from the clean image (M_c).
    pub center_draws: usize,
    /// Noise draws per assignment law (M_a); used when the image has more
    /// than one channel or `exact` is off.
    pub assignment_draws: usize,
    /// Use the exact CDF law for single-channel images.
    pub exact: bool,
}

impl Default for KlEstimation {
    fn default() -> Self {
        Self {
            center_draws: 50,
            assignment_draws: 10_000,
            exact: true,
        }
    }
}

impl KlEstimation {
    pub fn mode(&self, channels: usize) -> AssignmentMode {
        if self.exact && channels == 1 {
            AssignmentMode::Exact
        } else {
            AssignmentMode::MonteCarlo {
                draws: self.assignment_draws,
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.center_draws == 0 || self.assignment_draws == 0 {
            return Err(invalid("estimation", "center and assignment draws must be positive"));
        }
        Ok(())
    }
}

/// An upper bound on `KL(law(x̃) ‖ law(x̃'))` over all admissible `x'`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KLBoundReport {
    pub method: BoundMethod,
    /// `s·q·ε²/(2τ²)` for RandDisc, 0 for Gaussian.
    pub cluster_term: f64,
    pub per_pixel_terms: Vec<f64>,
    pub total: f64,
    pub center_draws: usize,
    pub assignment_draws: usize,
}

fn check_scale(name: &'static str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(invalid(name, "must be positive (the divergence is infinite otherwise)"));
    }
    Ok(())
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(invalid("epsilon", "must be finite and non-negative"));
    }
    Ok(())
}

/// Worst case over `‖x − x'‖∞ ≤ ε` of the Gaussian-noise KL:
/// `q·ε²/(2σ²)` for each of the `n` pixels.
pub fn kl_gaussian_bound(x: &Image, epsilon: f64, sigma: f64) -> Result<KLBoundReport> {
    check_scale("sigma", sigma)?;
    check_epsilon(epsilon)?;
    let per = x.channels() as f64 * epsilon * epsilon / (2.0 * sigma * sigma);
    let per_pixel_terms = vec![per; x.pixel_count()];
    Ok(KLBoundReport {
        method: BoundMethod::Gaussian,
        cluster_term: 0.0,
        total: per * x.pixel_count() as f64,
        per_pixel_terms,
        center_draws: 0,
        assignment_draws: 0,
    })
}

/// Exact Gaussian KL for a known pair: `Σ ‖x_i − x'_i‖² / (2σ²)`.
pub fn kl_gaussian_pair(x: &Image, x_adv: &Image, sigma: f64) -> Result<f64> {
    check_scale("sigma", sigma)?;
    x.ensure_same_shape(x_adv)?;
    Ok(x.data()
        .iter()
        .zip(x_adv.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / (2.0 * sigma * sigma))
}

/// Upper tail `P(Z > z)` of the standard normal.
fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// `P(lo < Z ≤ hi)`, computed from whichever tail keeps precision.
fn normal_interval(lo: f64, hi: f64) -> f64 {
    if lo >= 0.0 {
        normal_sf(lo) - normal_sf(hi)
    } else if hi <= 0.0 {
        normal_sf(-hi) - normal_sf(-lo)
    } else {
        1.0 - normal_sf(-lo) - normal_sf(hi)
    }
}

/// Exact single-channel law of `argmin_j |v + w − c_j|`, `w ~ N(0, σ²)`.
/// Equal centers share one region, credited to the lowest index.
fn exact_assignment(v: f64, centers: &ClusterSet, sigma: f64) -> Vec<f64> {
    let k = centers.k();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centers.center(a)[0].total_cmp(&centers.center(b)[0]).then(a.cmp(&b)));
    order.dedup_by(|b, a| centers.center(*a)[0] == centers.center(*b)[0]);
    let mut probs = vec![0.0; k];
    if sigma == 0.0 {
        probs[centers.nearest(&[v])] = 1.0;
        return probs;
    }
    for (r, &j) in order.iter().enumerate() {
        let c = centers.center(j)[0];
        let lo = if r == 0 {
            f64::NEG_INFINITY
        } else {
            0.5 * (centers.center(order[r - 1])[0] + c)
        };
        let hi = if r + 1 == order.len() {
            f64::INFINITY
        } else {
            0.5 * (c + centers.center(order[r + 1])[0])
        };
        probs[j] = normal_interval((lo - v) / sigma, (hi - v) / sigma).max(0.0);
    }
    probs
}

fn empirical_assignment(
    pixel: &[f64],
    centers: &ClusterSet,
    sigma: f64,
    draws: usize,
    rng: &mut RngStream,
) -> Vec<f64> {
    let mut counts = vec![0usize; centers.k()];
    let mut noisy = vec![0.0; pixel.len()];
    for _ in 0..draws {
        for (n, &p) in noisy.iter_mut().zip(pixel) {
            *n = p + sigma * rng.standard_normal();
        }
        counts[centers.nearest(&noisy)] += 1;
    }
    counts.iter().map(|&c| c as f64 / draws as f64).collect()
}

/// Law of the RandDisc assignment of one pixel given the centers.
/// Monte Carlo results are raw frequencies; see [`smooth_empirical`].
pub fn assignment_distribution(
    pixel: &[f64],
    centers: &ClusterSet,
    sigma: f64,
    mode: AssignmentMode,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    if pixel.len() != centers.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}-channel pixel", centers.dim()),
            got: format!("{} channels", pixel.len()),
        });
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(invalid("sigma", "must be finite and non-negative"));
    }
    match mode {
        AssignmentMode::Exact if pixel.len() == 1 => Ok(exact_assignment(pixel[0], centers, sigma)),
        AssignmentMode::Exact => Err(invalid("mode", "exact assignment laws need single-channel pixels")),
        AssignmentMode::MonteCarlo { draws: 0 } => Err(invalid("draws", "must be positive")),
        AssignmentMode::MonteCarlo { draws } => Ok(empirical_assignment(pixel, centers, sigma, draws, rng)),
    }
}

/// Adds `1/(2M)` to every cell of an empirical law from `M` draws and
/// renormalizes.
pub fn smooth_empirical(frequencies: &[f64], draws: usize) -> Vec<f64> {
    let extra = 0.5 / draws as f64;
    let total = 1.0 + extra * frequencies.len() as f64;
    frequencies.iter().map(|&f| (f + extra) / total).collect()
}

/// `Σ p_j log(p_j/q_j)` with `0·log(0/·) = 0`; `+∞` when some `p_j > 0`
/// meets `q_j = 0`.
pub fn kl_multinomial(p: &[f64], q: &[f64]) -> f64 {
    let mut kl = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            kl += a * (a / b).ln();
        }
    }
    // rounding can leave tiny negatives for nearly equal laws
    kl.max(0.0)
}

/// Vertices of the feasible box `[v − ε, v + ε] ∩ [0, t]` per channel;
/// coinciding vertices are listed once.
fn vertices(pixel: &[f64], epsilon: f64, t: f64) -> Vec<Vec<f64>> {
    let q = pixel.len();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(1 << q);
    for mask in 0..(1usize << q) {
        let v: Vec<f64> = pixel
            .iter()
            .enumerate()
            .map(|(c, &p)| {
                if mask >> c & 1 == 1 {
                    (p + epsilon).min(t)
                } else {
                    (p - epsilon).max(0.0)
                }
            })
            .collect();
        if !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

/// Mean over `center_sets` of the assignment-law divergence between
/// `pixel` and `other`.
pub fn expected_assignment_kl(
    pixel: &[f64],
    other: &[f64],
    sigma: f64,
    center_sets: &[ClusterSet],
    mode: AssignmentMode,
    rng: &mut RngStream,
) -> Result<f64> {
    if center_sets.is_empty() {
        return Err(Error::Empty("center sets"));
    }
    let mut sum = 0.0;
    for centers in center_sets {
        let mut p = assignment_distribution(pixel, centers, sigma, mode, rng)?;
        let mut q = assignment_distribution(other, centers, sigma, mode, rng)?;
        if let AssignmentMode::MonteCarlo { draws } = mode {
            p = smooth_empirical(&p, draws);
            q = smooth_empirical(&q, draws);
        }
        sum += kl_multinomial(&p, &q);
    }
    Ok(sum / center_sets.len() as f64)
}

/// `sup_Δ E_u[KL(r(x_i|u) ‖ r(x_i + Δ|u))]` over the vertices of the
/// ε-box around `pixel` (clipped to `[0, t]`), `u` ranging over
/// `center_sets`.
pub fn per_pixel_kl_sup(
    pixel: &[f64],
    epsilon: f64,
    sigma: f64,
    t: f64,
    center_sets: &[ClusterSet],
    mode: AssignmentMode,
    rng: &mut RngStream,
) -> Result<f64> {
    check_epsilon(epsilon)?;
    if epsilon == 0.0 {
        return Ok(0.0);
    }
    let mut best = 0.0_f64;
    for v in vertices(pixel, epsilon, t) {
        if v.as_slice() == pixel {
            continue;
        }
        best = best.max(expected_assignment_kl(pixel, &v, sigma, center_sets, mode, rng)?);
    }
    Ok(best)
}

/// Draws the center sets `u ~ P_c` from the clean image.
pub fn draw_center_sets(
    x: &Image,
    cfg: &TransformConfig,
    count: usize,
    rng: &mut RngStream,
) -> Result<Vec<ClusterSet>> {
    let root = rng.fork();
    (0..count)
        .map(|i| draw_centers(x, cfg, &mut root.substream(i as u64)))
        .collect()
}

/// The RandDisc bound: `s·q·ε²/(2τ²)` plus, per pixel, the vertex
/// supremum of the expected assignment divergence. Center sets come from
/// the clean image and are shared by all pixels. Pixels with identical
/// values share one evaluation in exact mode.
pub fn kl_randdisc_bound(
    x: &Image,
    epsilon: f64,
    cfg: &TransformConfig,
    estimation: &KlEstimation,
    rng: &mut RngStream,
) -> Result<KLBoundReport> {
    check_scale("tau", cfg.tau)?;
    check_epsilon(epsilon)?;
    cfg.validate()?;
    estimation.validate()?;
    let q = x.channels();
    let cluster_term = cfg.s as f64 * q as f64 * epsilon * epsilon / (2.0 * cfg.tau * cfg.tau);
    let mode = estimation.mode(q);
    let mut per_pixel_terms = vec![0.0; x.pixel_count()];
    if epsilon > 0.0 {
        let center_sets = draw_center_sets(x, cfg, estimation.center_draws, rng)?;
        let root = rng.fork();
        let mut cache: Vec<(Vec<u64>, f64)> = Vec::new();
        for (i, (pixel, term)) in x.pixels().zip(per_pixel_terms.iter_mut()).enumerate() {
            let key: Vec<u64> = pixel.iter().map(|v| v.to_bits()).collect();
            if mode == AssignmentMode::Exact {
                if let Some((_, v)) = cache.iter().find(|(k, _)| *k == key) {
                    *term = *v;
                    continue;
                }
            }
            let value = per_pixel_kl_sup(
                pixel,
                epsilon,
                cfg.sigma,
                x.range(),
                &center_sets,
                mode,
                &mut root.substream(i as u64),
            )?;
            if mode == AssignmentMode::Exact {
                cache.push((key, value));
            }
            *term = value;
        }
    }
    let total = cluster_term + per_pixel_terms.iter().sum::<f64>();
    Ok(KLBoundReport {
        method: BoundMethod::RandDisc,
        cluster_term,
        per_pixel_terms,
        total,
        center_draws: estimation.center_draws,
        assignment_draws: if mode == AssignmentMode::Exact {
            0
        } else {
            estimation.assignment_draws
        },
    })
}
