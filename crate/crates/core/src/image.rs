//! Dense pixel grids and the ℓ∞ geometry the threat model lives in.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// A `width × height` image with `channels` values per pixel, stored
/// row-major with channels interleaved: element `(col, row, ch)` lives at
/// `(row * width + col) * channels + ch`.
///
/// Valid pixel values are `[0, t]` where `t` is [`Image::range`]. Images
/// produced by stochastic transforms may leave that interval; those carry
/// `is_clamped() == false` until [`Image::clamp`] is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
    range: f64,
    clamped: bool,
}

impl Image {
    /// Builds an image, flagging it clamped when every value lies in `[0, t]`.
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>, range: f64) -> Result<Self> {
        let mut image = Self::new_raw(width, height, channels, data, range)?;
        image.clamped = image.data.iter().all(|&v| (0.0..=range).contains(&v));
        Ok(image)
    }

    /// Builds an image without inspecting its values; the clamped flag is
    /// always `false`.
    pub fn new_raw(width: usize, height: usize, channels: usize, data: Vec<f64>, range: f64) -> Result<Self> {
        if !(range > 0.0 && range.is_finite()) {
            return Err(invalid("t", format!("pixel range must be positive, got {range}")));
        }
        if channels == 0 {
            return Err(invalid("channels", "must be at least 1"));
        }
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{width}x{height}x{channels} = {expected} values"),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
            range,
            clamped: false,
        })
    }

    /// Constant image.
    pub fn filled(width: usize, height: usize, channels: usize, value: f64, range: f64) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels], range)
    }

    pub fn zeros(width: usize, height: usize, channels: usize, range: f64) -> Result<Self> {
        Self::filled(width, height, channels, 0.0, range)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Number of channels per pixel (`q`).
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of pixels (`n`), not values.
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Maximum admissible pixel value `t`.
    pub fn range(&self) -> f64 {
        self.range
    }

    pub fn is_clamped(&self) -> bool {
        self.clamped
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access invalidates the clamped flag.
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.clamped = false;
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Channel values of pixel `i` in row-major pixel order.
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.channels)
    }

    pub fn get(&self, col: usize, row: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    /// Same geometry and range, new values; the clamped flag is recomputed.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.width, self.height, self.channels, data, self.range)
    }

    /// Same geometry and range, new values, flagged unclamped.
    pub fn with_raw_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new_raw(self.width, self.height, self.channels, data, self.range)
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub(crate) fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.width, self.height, self.channels)
    }

    pub fn ensure_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: self.shape_string(),
                got: other.shape_string(),
            })
        }
    }

    /// Coordinatewise projection onto `[0, t]`.
    pub fn clamp(&self) -> Image {
        let mut out = self.clone();
        out.clamp_in_place();
        out
    }

    pub fn clamp_in_place(&mut self) {
        let t = self.range;
        for v in &mut self.data {
            *v = v.clamp(0.0, t);
        }
        self.clamped = true;
    }
}

/// `max_i |a_i - b_i|` over all values of two equally shaped images.
pub fn linf_distance(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs())))
}

/// An ℓ∞ radius `ε` in pixel-value units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBudget {
    epsilon: f64,
}

impl PerturbationBudget {
    pub fn new(epsilon: f64, range: f64) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon <= range) {
            return Err(invalid("epsilon", format!("must lie in [0, {range}], got {epsilon}")));
        }
        Ok(Self { epsilon })
    }

    pub fn epsilon(self) -> f64 {
        self.epsilon
    }

    /// Projects `candidate` onto `{u : ‖u − center‖∞ ≤ ε} ∩ [0, t]`.
    pub fn project(self, center: &Image, candidate: &mut Image) -> Result<()> {
        center.ensure_same_shape(candidate)?;
        let t = candidate.range;
        for (u, &c) in candidate.data.iter_mut().zip(&center.data) {
            *u = u.clamp(c - self.epsilon, c + self.epsilon).clamp(0.0, t);
        }
        candidate.clamped = true;
        Ok(())
    }
}

/// An image together with its ground-truth class.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub image: Image,
    pub label: usize,
}

/// A labeled collection where every label is below `classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<LabeledExample>,
    classes: usize,
}

impl Dataset {
    pub fn new(examples: Vec<LabeledExample>, classes: usize) -> Result<Self> {
        if let Some(bad) = examples.iter().find(|e| e.label >= classes) {
            return Err(Error::LabelOutOfRange {
                label: bad.label,
                classes,
            });
        }
        Ok(Self { examples, classes })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn get(&self, index: usize) -> Option<&LabeledExample> {
        self.examples.get(index)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LabeledExample> {
        self.examples.iter()
    }

    /// The examples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            classes: self.classes,
        }
    }

    pub fn take(&self, count: usize) -> Self {
        Self {
            examples: self.examples.iter().take(count).cloned().collect(),
            classes: self.classes,
        }
    }
}
