//! KL-divergence certificates for the Gaussian and RandDisc defenses.
//!
//! If every admissible `x'` satisfies `KL(law(x̃) ‖ law(x̃')) ≤ U`, Pinsker's
//! inequality moves every class probability by at most `√(U/2)`, so the
//! margin moves by at most `√(2U)`. A clean margin above `√(2U)` therefore
//! keeps the correct label on top for every `x'`.

mod kl;
mod margin;

pub use kl::{
    assignment_distribution, draw_center_sets, expected_assignment_kl, kl_gaussian_bound, kl_gaussian_pair,
    kl_multinomial, kl_randdisc_bound, per_pixel_kl_sup, smooth_empirical, AssignmentMode, BoundMethod, KLBoundReport,
    KlEstimation,
};
pub use margin::{certify, estimate_margin, kl_bound_for, majority_vote_classify, Certificate, MarginEstimate};
