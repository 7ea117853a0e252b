use crate::error::Result;
use crate::image::Image;
use crate::rng::{gaussian_sample, RngStream};

/// `x + w` with `w ~ N(0, σ²I)`. The result is left unclamped.
pub fn gaussian_transform(x: &Image, sigma: f64, rng: &mut RngStream) -> Result<Image> {
    let noise = gaussian_sample(x.data().len(), sigma, rng)?;
    let data = x.data().iter().zip(&noise).map(|(v, w)| v + w).collect();
    x.with_raw_data(data)
}
