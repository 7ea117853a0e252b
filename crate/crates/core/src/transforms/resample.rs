//! Max-pool downsampling, corner-aligned bilinear resizing and random
//! resize-and-pad.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::Image;
use crate::rng::RngStream;

/// Square max-pooling window and stride, no padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DownsampleConfig {
    pub filter_size: usize,
    pub stride: usize,
}

impl DownsampleConfig {
    pub const IDENTITY: DownsampleConfig = DownsampleConfig {
        filter_size: 1,
        stride: 1,
    };

    /// Default schedule for 28×28 images: larger radii get coarser pooling.
    ///
    /// | ε            | filter | stride |
    /// |--------------|--------|--------|
    /// | (0, 0.02]    | 1      | 1      |
    /// | (0.02, 0.05] | 1      | 2      |
    /// | (0.05, 0.07] | 2      | 3      |
    /// | (0.07, 0.1]  | 2      | 4      |
    /// | (0.1, 0.3]   | 2      | 7      |
    ///
    /// ε = 0 maps to the identity; radii above 0.3 have no entry.
    pub fn for_epsilon(epsilon: f64) -> Option<DownsampleConfig> {
        let (filter_size, stride) = match epsilon {
            e if e < 0.0 || e.is_nan() => return None,
            e if e <= 0.02 => (1, 1),
            e if e <= 0.05 => (1, 2),
            e if e <= 0.07 => (2, 3),
            e if e <= 0.1 => (2, 4),
            e if e <= 0.3 => (2, 7),
            _ => return None,
        };
        Some(DownsampleConfig { filter_size, stride })
    }

    pub fn output_side(&self, side: usize) -> usize {
        (side - self.filter_size) / self.stride + 1
    }

    pub fn is_identity(&self) -> bool {
        self.filter_size == 1 && self.stride == 1
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.filter_size == 0 || self.stride == 0 {
            return Err(invalid("downsample", "filter size and stride must be positive"));
        }
        if self.filter_size > width || self.filter_size > height {
            return Err(invalid(
                "downsample",
                format!("filter {} larger than {}x{} image", self.filter_size, width, height),
            ));
        }
        Ok(())
    }
}

/// Max-pooling; also returns, for each output value, the index of the input
/// value it was taken from (first maximum wins).
pub fn maxpool_with_argmax(x: &Image, cfg: DownsampleConfig) -> Result<(Image, Vec<usize>)> {
    cfg.validate(x.width(), x.height())?;
    let q = x.channels();
    let ow = cfg.output_side(x.width());
    let oh = cfg.output_side(x.height());
    let mut out = Vec::with_capacity(ow * oh * q);
    let mut argmax = Vec::with_capacity(ow * oh * q);
    let data = x.data();
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..q {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for dy in 0..cfg.filter_size {
                    for dx in 0..cfg.filter_size {
                        let i = ((oy * cfg.stride + dy) * x.width() + ox * cfg.stride + dx) * q + ch;
                        if data[i] > best {
                            best = data[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_i);
            }
        }
    }
    let pooled = if x.is_clamped() {
        Image::new(ow, oh, q, out, x.range())?
    } else {
        Image::new_raw(ow, oh, q, out, x.range())?
    };
    Ok((pooled, argmax))
}

pub fn downsample_maxpool(x: &Image, cfg: DownsampleConfig) -> Result<Image> {
    maxpool_with_argmax(x, cfg).map(|(img, _)| img)
}

#[derive(Debug, Clone, PartialEq)]
struct AxisTap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn axis_taps(input: usize, output: usize) -> Vec<AxisTap> {
    (0..output)
        .map(|d| {
            let src = if output > 1 {
                d as f64 * (input - 1) as f64 / (output - 1) as f64
            } else {
                0.0
            };
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            AxisTap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Corner-aligned bilinear resampling between two grid sizes: output
/// corners coincide with input corners. Linear in the input, so the same
/// map also provides its adjoint for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearMap {
    in_w: usize,
    in_h: usize,
    out_w: usize,
    out_h: usize,
    cols: Vec<AxisTap>,
    rows: Vec<AxisTap>,
}

impl BilinearMap {
    pub fn new(in_w: usize, in_h: usize, out_w: usize, out_h: usize) -> Result<Self> {
        if in_w == 0 || in_h == 0 || out_w == 0 || out_h == 0 {
            return Err(invalid("size", "bilinear resize needs positive sizes"));
        }
        Ok(Self {
            in_w,
            in_h,
            out_w,
            out_h,
            cols: axis_taps(in_w, out_w),
            rows: axis_taps(in_h, out_h),
        })
    }

    pub fn output_size(&self) -> (usize, usize) {
        (self.out_w, self.out_h)
    }

    /// Resamples `q`-channel data laid out as the input grid.
    pub fn apply(&self, input: &[f64], q: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.out_w * self.out_h * q);
        for r in &self.rows {
            for c in &self.cols {
                for ch in 0..q {
                    let at = |y: usize, x: usize| input[(y * self.in_w + x) * q + ch];
                    let top = (1.0 - c.frac) * at(r.lo, c.lo) + c.frac * at(r.lo, c.hi);
                    let bottom = (1.0 - c.frac) * at(r.hi, c.lo) + c.frac * at(r.hi, c.hi);
                    out.push((1.0 - r.frac) * top + r.frac * bottom);
                }
            }
        }
        out
    }

    /// Adjoint: spreads output-grid values back onto the input grid.
    pub fn transpose(&self, output: &[f64], q: usize) -> Vec<f64> {
        let mut input = vec![0.0; self.in_w * self.in_h * q];
        let mut o = 0;
        for r in &self.rows {
            for c in &self.cols {
                for ch in 0..q {
                    let g = output[o];
                    o += 1;
                    let mut add = |y: usize, x: usize, w: f64| input[(y * self.in_w + x) * q + ch] += w * g;
                    add(r.lo, c.lo, (1.0 - r.frac) * (1.0 - c.frac));
                    add(r.lo, c.hi, (1.0 - r.frac) * c.frac);
                    add(r.hi, c.lo, r.frac * (1.0 - c.frac));
                    add(r.hi, c.hi, r.frac * c.frac);
                }
            }
        }
        input
    }
}

/// Bilinear resize to `out_w × out_h`.
pub fn upsample_bilinear(x: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    let map = BilinearMap::new(x.width(), x.height(), out_w, out_h)?;
    let data = map.apply(x.data(), x.channels());
    if x.is_clamped() {
        Image::new(out_w, out_h, x.channels(), data, x.range())
    } else {
        Image::new_raw(out_w, out_h, x.channels(), data, x.range())
    }
}

/// Where ResizePadding put the resized image inside the padded canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub side: usize,
    pub offset_x: usize,
    pub offset_y: usize,
    pub canvas: usize,
}

impl Placement {
    pub fn sample(min_size: usize, max_size: usize, rng: &mut RngStream) -> Result<Self> {
        if min_size == 0 || min_size > max_size {
            return Err(invalid(
                "resize",
                format!("need 0 < min ≤ max, got {min_size}..{max_size}"),
            ));
        }
        let side = min_size + rng.below(max_size - min_size + 1);
        let slack = max_size - side + 1;
        let offset_x = rng.below(slack);
        let offset_y = rng.below(slack);
        Ok(Self {
            side,
            offset_x,
            offset_y,
            canvas: max_size,
        })
    }
}

/// Resize to a uniformly random side in `[min_size, max_size]`, then zero-pad
/// at a uniformly random offset to `max_size × max_size`.
pub fn resize_padding(x: &Image, min_size: usize, max_size: usize, rng: &mut RngStream) -> Result<Image> {
    let placement = Placement::sample(min_size, max_size, rng)?;
    resize_padding_with_placement(x, placement)
}

pub fn resize_padding_with_placement(x: &Image, p: Placement) -> Result<Image> {
    let resized = upsample_bilinear(x, p.side, p.side)?;
    let q = x.channels();
    let mut canvas = vec![0.0; p.canvas * p.canvas * q];
    for row in 0..p.side {
        let src = &resized.data()[row * p.side * q..(row + 1) * p.side * q];
        let start = ((row + p.offset_y) * p.canvas + p.offset_x) * q;
        canvas[start..start + p.side * q].copy_from_slice(src);
    }
    Image::new(p.canvas, p.canvas, q, canvas, x.range())
}
