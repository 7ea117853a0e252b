//! Randomized discretization defenses against ℓ∞ whitebox attacks.

// `!(x > 0.0)` style checks are meant to reject NaN too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod certify;
pub mod classifier;
pub mod error;
pub mod image;
pub mod rng;
pub mod transforms;

pub use error::{Error, Result};
pub use image::{linf_distance, Dataset, Image, LabeledExample, PerturbationBudget};
pub use rng::{gaussian_sample, RngStream};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/images.md")]
    mod images {}
    #[doc = include_str!("../../../book/src/transforms.md")]
    mod transforms {}
    #[doc = include_str!("../../../book/src/classifier.md")]
    mod classifier {}
    #[doc = include_str!("../../../book/src/attacks.md")]
    mod attacks {}
    #[doc = include_str!("../../../book/src/certificates.md")]
    mod certificates {}
}
