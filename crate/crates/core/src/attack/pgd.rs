use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pipeline::DefensePipeline;
use crate::classifier::LossKind;
use crate::error::{invalid, Error, Result};
use crate::image::{Image, LabeledExample, PerturbationBudget};
use crate::rng::RngStream;

/// PGD hyperparameters. PGD always maximizes `loss`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    /// Step size η.
    pub eta: f64,
    pub steps: usize,
    /// Stochastic gradient copies averaged per step.
    pub grad_copies: usize,
    pub loss: LossKind,
}

impl AttackConfig {
    pub const DEFAULT_STEPS: usize = 40;
    pub const DEFAULT_COPIES: usize = 20;

    /// 40 steps, 20 copies, cross-entropy, `η = 2.5·ε/T`.
    pub fn new(epsilon: f64) -> Self {
        Self::with_schedule(epsilon, Self::DEFAULT_STEPS, Self::DEFAULT_COPIES)
    }

    /// `η = 2.5·ε/steps`.
    pub fn with_schedule(epsilon: f64, steps: usize, grad_copies: usize) -> Self {
        Self {
            epsilon,
            eta: Self::default_eta(epsilon, steps),
            steps,
            grad_copies,
            loss: LossKind::CrossEntropy,
        }
    }

    pub fn default_eta(epsilon: f64, steps: usize) -> f64 {
        2.5 * epsilon / steps.max(1) as f64
    }

    /// Single step with `η = ε`.
    pub fn fgsm(epsilon: f64, grad_copies: usize) -> Self {
        Self {
            epsilon,
            eta: epsilon,
            steps: 1,
            grad_copies,
            loss: LossKind::CrossEntropy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(invalid("epsilon", "must be finite and non-negative"));
        }
        // η = 0 only makes sense for the trivial ε = 0 attack
        if !(self.eta > 0.0 || (self.eta == 0.0 && self.epsilon == 0.0)) || !self.eta.is_finite() {
            return Err(invalid("eta", "must be positive"));
        }
        if self.steps == 0 || self.grad_copies == 0 {
            return Err(invalid("attack", "steps and grad_copies must be at least 1"));
        }
        if let LossKind::CarliniWagner { kappa } = self.loss {
            if !(kappa >= 0.0) {
                return Err(invalid("kappa", "must be non-negative"));
            }
        }
        Ok(())
    }
}

/// Mean of `copies` independent stochastic input gradients of `loss`
/// through `pipeline`. Bit-exact given `rng`'s key.
pub fn averaged_stochastic_gradient(
    pipeline: &DefensePipeline<'_>,
    x: &Image,
    y: usize,
    loss: LossKind,
    copies: usize,
    rng: &RngStream,
) -> Result<Image> {
    pipeline.averaged_gradient(x, y, loss, copies, rng)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projected gradient ascent from `x`:
/// `x_{t+1} = Π(x_t + η·sign(ĝ_t))`, with `Π` the projection onto the
/// ε-ball around `x` intersected with `[0, t]` and `sign(0) = 0`.
/// `pipeline` must be differentiable; pass its surrogate.
pub fn pgd(
    pipeline: &DefensePipeline<'_>,
    x: &Image,
    y: usize,
    cfg: &AttackConfig,
    rng: &mut RngStream,
) -> Result<Image> {
    pgd_with_observer(pipeline, x, y, cfg, rng, |_, _| {})
}

/// [`pgd`], calling `observe(step, iterate)` after every projected step.
pub fn pgd_with_observer(
    pipeline: &DefensePipeline<'_>,
    x: &Image,
    y: usize,
    cfg: &AttackConfig,
    rng: &mut RngStream,
    mut observe: impl FnMut(usize, &Image),
) -> Result<Image> {
    cfg.validate()?;
    if !pipeline.is_differentiable() {
        return Err(Error::NotDifferentiable(pipeline.transform().name()));
    }
    let budget = PerturbationBudget::new(cfg.epsilon, x.range())?;
    let root = rng.fork();
    let mut current = x.clamp();
    if cfg.epsilon == 0.0 {
        return Ok(current);
    }
    for step in 0..cfg.steps {
        let grad = pipeline.averaged_gradient(&current, y, cfg.loss, cfg.grad_copies, &root.substream(step as u64))?;
        for (v, g) in current.data_mut().iter_mut().zip(grad.data()) {
            *v += cfg.eta * sign(*g);
        }
        budget.project(x, &mut current)?;
        observe(step, &current);
    }
    Ok(current)
}

/// One signed-gradient step of size ε.
pub fn fgsm(
    pipeline: &DefensePipeline<'_>,
    x: &Image,
    y: usize,
    epsilon: f64,
    loss: LossKind,
    grad_copies: usize,
    rng: &mut RngStream,
) -> Result<Image> {
    let cfg = AttackConfig {
        loss,
        ..AttackConfig::fgsm(epsilon, grad_copies)
    };
    pgd(pipeline, x, y, &cfg, rng)
}

/// Adversarial example for every input, image `i` attacked with
/// substream `i` of a fork of `rng`.
pub fn attack_examples(
    surrogate: &DefensePipeline<'_>,
    examples: &[LabeledExample],
    cfg: &AttackConfig,
    rng: &mut RngStream,
) -> Result<Vec<Image>> {
    let root = rng.fork();
    examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| pgd(surrogate, &ex.image, ex.label, cfg, &mut root.substream(i as u64)))
        .collect()
}

/// Majority-vote label from vote counts; ties go to the smallest class.
pub fn majority_label(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

/// Fraction of `images` whose `m`-vote majority label under `defense`
/// equals the matching label.
pub fn majority_vote_accuracy(
    defense: &DefensePipeline<'_>,
    images: &[Image],
    labels: &[usize],
    m: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(invalid("examples", "need one label per image and at least one image"));
    }
    let root = rng.fork();
    let hits = images
        .par_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (img, &y))| {
            let counts = defense.vote_counts(img, m, &mut root.substream(i as u64))?;
            Ok(usize::from(majority_label(&counts) == y))
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / images.len() as f64)
}

/// Attacks every example through `attack_surrogate` and scores the
/// adversarial images with `defense` by `m`-vote majority.
pub fn evaluate_robust_accuracy(
    defense: &DefensePipeline<'_>,
    attack_surrogate: &DefensePipeline<'_>,
    examples: &[LabeledExample],
    cfg: &AttackConfig,
    m: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    if !std::ptr::eq(defense.model(), attack_surrogate.model()) && defense.model() != attack_surrogate.model() {
        return Err(invalid("pipelines", "defense and surrogate must share the base model"));
    }
    let adversarial = attack_examples(attack_surrogate, examples, cfg, rng)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    majority_vote_accuracy(defense, &adversarial, &labels, m, rng)
}
