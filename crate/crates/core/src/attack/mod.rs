//! Whitebox ℓ∞ attacks on defended classifiers.
//!
//! A [`DefensePipeline`] is a [`Transform`] followed by a
//! [`Model`](crate::classifier::Model); outputs are clamped to `[0, t]`
//! before the classifier. Randomized pipelines are attacked by averaging
//! input gradients over independent copies of the randomness, and
//! non-differentiable ones through [`Transform::surrogate`].

mod pgd;
mod pipeline;

pub use pgd::{
    attack_examples, averaged_stochastic_gradient, evaluate_robust_accuracy, fgsm, majority_label,
    majority_vote_accuracy, pgd, pgd_with_observer, AttackConfig,
};
pub use pipeline::{DefensePipeline, Transform, TransformedCopy, SMOOTH_BITDEPTH_SHARPNESS};
