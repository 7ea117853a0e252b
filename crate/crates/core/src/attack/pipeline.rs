use serde::{Deserialize, Serialize};

use crate::classifier::{LossKind, Model};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::rng::{gaussian_sample, RngStream};
use crate::transforms::{
    bit_depth, bit_depth_smooth, bit_depth_smooth_vjp, draw_centers, maxpool_with_argmax, rand_disc_with_noise,
    rand_mix_vjp_with_noise, rand_mix_with_noise, resize_padding_with_placement, tvm_denoise_trace, BilinearMap,
    ClusterSet, DownsampleConfig, Placement, TransformConfig, TvmTrace,
};

/// Logistic sharpness of the BitDepth surrogate, in units of levels per
/// pixel-value unit: each step rises over about a fifth of a level gap.
pub const SMOOTH_BITDEPTH_SHARPNESS: f64 = 20.0;

/// Input transform placed in front of the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Transform {
    Identity,
    Gaussian {
        sigma: f64,
    },
    RandDisc {
        config: TransformConfig,
    },
    RandMix {
        config: TransformConfig,
    },
    BitDepth {
        bits: u32,
    },
    SmoothBitDepth {
        bits: u32,
        alpha: f64,
    },
    Tvm {
        lambda: f64,
        iters: usize,
    },
    /// Random resize plus zero padding; the canvas is resized back to the
    /// model's input size when the two differ.
    ResizePadding {
        min_size: usize,
        max_size: usize,
    },
    /// Max-pool, RandDisc on the pooled image (centers drawn from it),
    /// bilinear upsampling back to the input size.
    DownsampledRandDisc {
        config: TransformConfig,
        downsample: DownsampleConfig,
    },
    DownsampledRandMix {
        config: TransformConfig,
        downsample: DownsampleConfig,
    },
}

impl Transform {
    pub fn name(&self) -> &'static str {
        match self {
            Transform::Identity => "identity",
            Transform::Gaussian { .. } => "gaussian",
            Transform::RandDisc { .. } => "rand_disc",
            Transform::RandMix { .. } => "rand_mix",
            Transform::BitDepth { .. } => "bit_depth",
            Transform::SmoothBitDepth { .. } => "smooth_bit_depth",
            Transform::Tvm { .. } => "tvm",
            Transform::ResizePadding { .. } => "resize_padding",
            Transform::DownsampledRandDisc { .. } => "downsampled_rand_disc",
            Transform::DownsampledRandMix { .. } => "downsampled_rand_mix",
        }
    }

    pub fn is_stochastic(&self) -> bool {
        !matches!(
            self,
            Transform::Identity | Transform::BitDepth { .. } | Transform::SmoothBitDepth { .. } | Transform::Tvm { .. }
        ) && !matches!(self, Transform::Gaussian { sigma } if *sigma == 0.0)
    }

    pub fn is_differentiable(&self) -> bool {
        !matches!(
            self,
            Transform::RandDisc { .. } | Transform::BitDepth { .. } | Transform::DownsampledRandDisc { .. }
        )
    }

    /// The differentiable stand-in an attacker uses: RandDisc becomes
    /// RandMix with the same centers law, BitDepth its logistic relaxation.
    /// Differentiable transforms are their own surrogate.
    pub fn surrogate(&self, t: f64) -> Transform {
        match *self {
            Transform::RandDisc { config } => Transform::RandMix { config },
            Transform::DownsampledRandDisc { config, downsample } => {
                Transform::DownsampledRandMix { config, downsample }
            }
            Transform::BitDepth { bits } => Transform::SmoothBitDepth {
                bits,
                alpha: SMOOTH_BITDEPTH_SHARPNESS * ((1u32 << bits.min(8)) - 1) as f64 / t,
            },
            ref other => other.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Transform::Gaussian { sigma } if !(*sigma >= 0.0 && sigma.is_finite()) => {
                Err(invalid("sigma", "must be finite and non-negative"))
            }
            Transform::RandDisc { config }
            | Transform::RandMix { config }
            | Transform::DownsampledRandDisc { config, .. }
            | Transform::DownsampledRandMix { config, .. } => config.validate(),
            Transform::BitDepth { bits } | Transform::SmoothBitDepth { bits, .. } if !(1..=8).contains(bits) => {
                Err(invalid("bits", format!("must be in 1..=8, got {bits}")))
            }
            Transform::SmoothBitDepth { alpha, .. } if !(*alpha > 0.0) => Err(invalid("alpha", "must be positive")),
            Transform::Tvm { lambda, .. } if !(*lambda >= 0.0) => Err(invalid("lambda", "must be non-negative")),
            Transform::ResizePadding { min_size, max_size } if *min_size == 0 || min_size > max_size => {
                Err(invalid("resize", "need 0 < min_size ≤ max_size"))
            }
            _ => Ok(()),
        }
    }
}

/// What a differentiable forward pass keeps for its backward pass.
#[derive(Debug, Clone)]
enum Tape {
    Identity,
    RandMix {
        input: Image,
        centers: ClusterSet,
        noise: Vec<f64>,
        alpha: f64,
    },
    SmoothBitDepth {
        input: Image,
        bits: u32,
        alpha: f64,
    },
    Tvm(TvmTrace),
    ResizePadding {
        placement: Placement,
        resize: BilinearMap,
        back: Option<BilinearMap>,
    },
    DownsampledRandMix {
        argmax: Vec<usize>,
        input_len: usize,
        pooled: Image,
        centers: ClusterSet,
        noise: Vec<f64>,
        alpha: f64,
        up: BilinearMap,
    },
}

/// One transformed copy: the clamped output fed to the classifier, plus
/// the data needed to backpropagate through it.
#[derive(Debug, Clone)]
pub struct TransformedCopy {
    output: Image,
    /// Values outside `[0, t]` before the final clamp get zero gradient.
    clipped: Vec<bool>,
    tape: Option<Tape>,
}

impl TransformedCopy {
    pub fn output(&self) -> &Image {
        &self.output
    }

    fn finish(raw: Image, tape: Option<Tape>) -> Self {
        let t = raw.range();
        let clipped = raw.data().iter().map(|&v| !(0.0..=t).contains(&v)).collect();
        Self {
            output: raw.clamp(),
            clipped,
            tape,
        }
    }

    /// Pulls a gradient with respect to the output back to the input.
    pub fn vjp(&self, upstream: &[f64]) -> Result<Vec<f64>> {
        let tape = self
            .tape
            .as_ref()
            .ok_or(Error::NotDifferentiable("copy was produced without a tape"))?;
        if upstream.len() != self.clipped.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} gradient values", self.clipped.len()),
                got: format!("{}", upstream.len()),
            });
        }
        let g: Vec<f64> = upstream
            .iter()
            .zip(&self.clipped)
            .map(|(&u, &c)| if c { 0.0 } else { u })
            .collect();
        match tape {
            Tape::Identity => Ok(g),
            Tape::RandMix {
                input,
                centers,
                noise,
                alpha,
            } => rand_mix_vjp_with_noise(input, centers, *alpha, noise, &g),
            Tape::SmoothBitDepth { input, bits, alpha } => bit_depth_smooth_vjp(input, *bits, *alpha, &g),
            Tape::Tvm(trace) => Ok(trace.vjp(&g)),
            Tape::ResizePadding {
                placement: p,
                resize,
                back,
            } => {
                let q = self.output.channels();
                let canvas = match back {
                    Some(map) => map.transpose(&g, q),
                    None => g,
                };
                let mut window = vec![0.0; p.side * p.side * q];
                for row in 0..p.side {
                    let start = ((row + p.offset_y) * p.canvas + p.offset_x) * q;
                    window[row * p.side * q..(row + 1) * p.side * q]
                        .copy_from_slice(&canvas[start..start + p.side * q]);
                }
                Ok(resize.transpose(&window, q))
            }
            Tape::DownsampledRandMix {
                argmax,
                input_len,
                pooled,
                centers,
                noise,
                alpha,
                up,
            } => {
                let g_mix = up.transpose(&g, pooled.channels());
                let g_pooled = rand_mix_vjp_with_noise(pooled, centers, *alpha, noise, &g_mix)?;
                let mut dx = vec![0.0; *input_len];
                for (&i, gv) in argmax.iter().zip(&g_pooled) {
                    dx[i] += gv;
                }
                Ok(dx)
            }
        }
    }
}

/// A transform composed with a classifier.
#[derive(Debug, Clone)]
pub struct DefensePipeline<'m> {
    model: &'m Model,
    transform: Transform,
}

impl<'m> DefensePipeline<'m> {
    pub fn new(model: &'m Model, transform: Transform) -> Result<Self> {
        transform.validate()?;
        Ok(Self { model, transform })
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn transform(&self) -> &Transform {
        &self.transform
    }

    /// Same model behind [`Transform::surrogate`].
    pub fn surrogate(&self, t: f64) -> DefensePipeline<'m> {
        DefensePipeline {
            model: self.model,
            transform: self.transform.surrogate(t),
        }
    }

    pub fn is_stochastic(&self) -> bool {
        self.transform.is_stochastic()
    }

    pub fn is_differentiable(&self) -> bool {
        self.transform.is_differentiable()
    }

    /// Applies the transform. With `tape` set the copy can be
    /// backpropagated; asking for a tape from a non-differentiable
    /// transform is an error.
    pub fn transform_copy(&self, x: &Image, rng: &mut RngStream, tape: bool) -> Result<TransformedCopy> {
        if tape && !self.is_differentiable() {
            return Err(Error::NotDifferentiable(self.transform.name()));
        }
        let shape = self.model.input_shape();
        let copy = match self.transform {
            Transform::Identity => TransformedCopy::finish(x.clone(), Some(Tape::Identity)),
            Transform::Gaussian { sigma } => {
                let noise = gaussian_sample(x.data().len(), sigma, rng)?;
                let data = x.data().iter().zip(&noise).map(|(v, w)| v + w).collect();
                TransformedCopy::finish(x.with_raw_data(data)?, Some(Tape::Identity))
            }
            Transform::RandDisc { config } => {
                let centers = draw_centers(x, &config, rng)?;
                let noise = gaussian_sample(x.data().len(), config.sigma, rng)?;
                TransformedCopy::finish(rand_disc_with_noise(x, &centers, &noise)?, None)
            }
            Transform::RandMix { config } => {
                let centers = draw_centers(x, &config, rng)?;
                let noise = gaussian_sample(x.data().len(), config.sigma, rng)?;
                let out = rand_mix_with_noise(x, &centers, config.alpha, &noise)?;
                let tape = tape.then(|| Tape::RandMix {
                    input: x.clone(),
                    centers,
                    noise,
                    alpha: config.alpha,
                });
                TransformedCopy::finish(out, tape)
            }
            Transform::BitDepth { bits } => TransformedCopy::finish(bit_depth(x, bits)?, None),
            Transform::SmoothBitDepth { bits, alpha } => {
                let out = bit_depth_smooth(x, bits, alpha)?;
                let tape = tape.then(|| Tape::SmoothBitDepth {
                    input: x.clone(),
                    bits,
                    alpha,
                });
                TransformedCopy::finish(out, tape)
            }
            Transform::Tvm { lambda, iters } => {
                let trace = tvm_denoise_trace(x, lambda, iters)?;
                let out = trace.output().clone();
                TransformedCopy::finish(out, tape.then_some(Tape::Tvm(trace)))
            }
            Transform::ResizePadding { min_size, max_size } => {
                if x.width() != x.height() {
                    return Err(invalid("resize", "ResizePadding expects square images"));
                }
                let placement = Placement::sample(min_size, max_size, rng)?;
                let padded = resize_padding_with_placement(x, placement)?;
                let back = if (shape.width, shape.height) == (max_size, max_size) {
                    None
                } else {
                    Some(BilinearMap::new(max_size, max_size, shape.width, shape.height)?)
                };
                let out = match &back {
                    Some(map) => Image::new_raw(
                        shape.width,
                        shape.height,
                        x.channels(),
                        map.apply(padded.data(), x.channels()),
                        x.range(),
                    )?,
                    None => padded,
                };
                let resize = BilinearMap::new(x.width(), x.height(), placement.side, placement.side)?;
                let tape = tape.then_some(Tape::ResizePadding {
                    placement,
                    resize,
                    back,
                });
                TransformedCopy::finish(out, tape)
            }
            Transform::DownsampledRandDisc { config, downsample } => {
                let (pooled, _) = maxpool_with_argmax(x, downsample)?;
                let centers = draw_centers(&pooled, &config, rng)?;
                let noise = gaussian_sample(pooled.data().len(), config.sigma, rng)?;
                let disc = rand_disc_with_noise(&pooled, &centers, &noise)?;
                let up = BilinearMap::new(pooled.width(), pooled.height(), x.width(), x.height())?;
                let out = Image::new_raw(
                    x.width(),
                    x.height(),
                    x.channels(),
                    up.apply(disc.data(), x.channels()),
                    x.range(),
                )?;
                TransformedCopy::finish(out, None)
            }
            Transform::DownsampledRandMix { config, downsample } => {
                let (pooled, argmax) = maxpool_with_argmax(x, downsample)?;
                let centers = draw_centers(&pooled, &config, rng)?;
                let noise = gaussian_sample(pooled.data().len(), config.sigma, rng)?;
                let mix = rand_mix_with_noise(&pooled, &centers, config.alpha, &noise)?;
                let up = BilinearMap::new(pooled.width(), pooled.height(), x.width(), x.height())?;
                let out = Image::new_raw(
                    x.width(),
                    x.height(),
                    x.channels(),
                    up.apply(mix.data(), x.channels()),
                    x.range(),
                )?;
                let tape = tape.then(|| Tape::DownsampledRandMix {
                    argmax,
                    input_len: x.data().len(),
                    pooled,
                    centers,
                    noise,
                    alpha: config.alpha,
                    up,
                });
                TransformedCopy::finish(out, tape)
            }
        };
        Ok(copy)
    }

    /// One stochastic evaluation of the composed classifier.
    pub fn classify(&self, x: &Image, rng: &mut RngStream) -> Result<usize> {
        let copy = self.transform_copy(x, rng, false)?;
        self.model.predict(copy.output())
    }

    /// Label counts over `m` stochastic evaluations; copy `i` uses
    /// substream `i` of a fork of `rng`.
    pub fn vote_counts(&self, x: &Image, m: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
        if m == 0 {
            return Err(invalid("m", "need at least one vote"));
        }
        let root = rng.fork();
        let mut counts = vec![0; self.model.classes()];
        let evaluations = if self.is_stochastic() { m } else { 1 };
        let mut batch = Vec::new();
        let mut start = 0;
        while start < evaluations {
            let end = (start + VOTE_BATCH).min(evaluations);
            batch.clear();
            for i in start..end {
                let copy = self.transform_copy(x, &mut root.substream(i as u64), false)?;
                batch.extend_from_slice(copy.output().data());
            }
            for label in self.model.predict_batch(&batch, end - start)? {
                counts[label] += 1;
            }
            start = end;
        }
        if evaluations == 1 {
            counts.iter_mut().for_each(|c| *c *= m);
        }
        Ok(counts)
    }

    /// Loss gradient with respect to `x`, averaged over `copies` stochastic
    /// copies. Copy `g` uses `rng.substream(g)`, so the result depends
    /// only on `rng`'s key. Deterministic pipelines are evaluated once.
    pub fn averaged_gradient(
        &self,
        x: &Image,
        y: usize,
        loss: LossKind,
        copies: usize,
        rng: &RngStream,
    ) -> Result<Image> {
        if copies == 0 {
            return Err(invalid("grad_copies", "need at least one copy"));
        }
        let copies = if self.is_stochastic() { copies } else { 1 };
        let mut sum = vec![0.0; x.data().len()];
        let mut start = 0;
        while start < copies {
            let end = (start + GRADIENT_BATCH).min(copies);
            let tapes = (start..end)
                .map(|g| self.transform_copy(x, &mut rng.substream(g as u64), true))
                .collect::<Result<Vec<_>>>()?;
            let mut inputs = Vec::with_capacity(tapes.len() * tapes[0].output().data().len());
            for t in &tapes {
                inputs.extend_from_slice(t.output().data());
            }
            let labels = vec![y; tapes.len()];
            let (_, grads) = self.model.input_gradients_batch(&inputs, &labels, loss)?;
            let per = grads.len() / tapes.len();
            for (t, g) in tapes.iter().zip(grads.chunks_exact(per)) {
                for (s, v) in sum.iter_mut().zip(t.vjp(g)?) {
                    *s += v;
                }
            }
            start = end;
        }
        let scale = 1.0 / copies as f64;
        sum.iter_mut().for_each(|v| *v *= scale);
        x.with_raw_data(sum)
    }
}

const VOTE_BATCH: usize = 64;
const GRADIENT_BATCH: usize = 32;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{Architecture, LayerSpec, Shape};

    fn small_model(side: usize, seed: u64) -> Model {
        let arch = Architecture {
            input: Shape {
                height: side,
                width: side,
                channels: 1,
            },
            layers: vec![
                LayerSpec::Conv {
                    filters: 3,
                    kernel: 3,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Dense { width: 3 },
            ],
        };
        Model::init(arch, &mut RngStream::new(seed)).unwrap()
    }

    fn interior_image(side: usize, seed: u64) -> Image {
        let mut rng = RngStream::new(seed);
        Image::new(
            side,
            side,
            1,
            (0..side * side).map(|_| 0.2 + 0.6 * rng.uniform()).collect(),
            1.0,
        )
        .unwrap()
    }

    /// Compares `copy.vjp` against central differences of `f` at `x`.
    fn check_vjp(label: &str, x: &Image, f: impl Fn(&Image) -> Image, copy: &TransformedCopy) {
        let mut u_rng = RngStream::new(99);
        let upstream: Vec<f64> = (0..copy.output().data().len())
            .map(|_| u_rng.standard_normal())
            .collect();
        let analytic = copy.vjp(&upstream).unwrap();
        let h = 1e-5;
        for i in 0..x.data().len() {
            let mut up = x.data().to_vec();
            up[i] += h;
            let mut down = x.data().to_vec();
            down[i] -= h;
            let dot = |img: Image| img.data().iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>();
            let fd = (dot(f(&x.with_raw_data(up).unwrap())) - dot(f(&x.with_raw_data(down).unwrap()))) / (2.0 * h);
            let err = (analytic[i] - fd).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(err <= 1e-4, "{label} pixel {i}: {} vs {fd}", analytic[i]);
        }
    }

    #[test]
    fn deterministic_tapes_match_finite_differences() {
        let model = small_model(6, 1);
        let x = interior_image(6, 2);
        for transform in [
            Transform::Identity,
            Transform::SmoothBitDepth { bits: 2, alpha: 15.0 },
            Transform::Tvm { lambda: 0.05, iters: 3 },
        ] {
            let p = DefensePipeline::new(&model, transform.clone()).unwrap();
            let copy = p.transform_copy(&x, &mut RngStream::new(3), true).unwrap();
            let f = |z: &Image| {
                p.transform_copy(z, &mut RngStream::new(3), false)
                    .unwrap()
                    .output()
                    .clone()
            };
            check_vjp(transform.name(), &x, f, &copy);
        }
    }

    #[test]
    fn resize_padding_tape_matches_finite_differences() {
        let model = small_model(6, 1);
        let x = interior_image(5, 4);
        let p = DefensePipeline::new(
            &model,
            Transform::ResizePadding {
                min_size: 6,
                max_size: 8,
            },
        )
        .unwrap();
        let copy = p.transform_copy(&x, &mut RngStream::new(5), true).unwrap();
        assert_eq!(copy.output().width(), 6);
        let f = |z: &Image| {
            p.transform_copy(z, &mut RngStream::new(5), false)
                .unwrap()
                .output()
                .clone()
        };
        check_vjp("resize_padding", &x, f, &copy);
    }

    #[test]
    fn gaussian_tape_with_fixed_noise() {
        let model = small_model(6, 1);
        let x = interior_image(6, 6);
        let p = DefensePipeline::new(&model, Transform::Gaussian { sigma: 0.05 }).unwrap();
        let copy = p.transform_copy(&x, &mut RngStream::new(7), true).unwrap();
        let f = |z: &Image| {
            p.transform_copy(z, &mut RngStream::new(7), false)
                .unwrap()
                .output()
                .clone()
        };
        check_vjp("gaussian", &x, f, &copy);
    }

    #[test]
    fn downsampled_mix_tape_with_fixed_centers() {
        // Centers drawn from the input would move under the finite
        // difference; the tape holds them fixed, so fix them here too.
        let x = interior_image(8, 8);
        let centers = ClusterSet::scalar(&[0.1, 0.5, 0.9]).unwrap();
        let ds = DownsampleConfig {
            filter_size: 2,
            stride: 2,
        };
        let alpha = 40.0;
        let noise: Vec<f64> = gaussian_sample(16, 0.1, &mut RngStream::new(9)).unwrap();
        let forward = |z: &Image| {
            let (pooled, argmax) = maxpool_with_argmax(z, ds).unwrap();
            let mix = rand_mix_with_noise(&pooled, &centers, alpha, &noise).unwrap();
            let up = BilinearMap::new(4, 4, 8, 8).unwrap();
            let out = Image::new_raw(8, 8, 1, up.apply(mix.data(), 1), 1.0).unwrap();
            (out, pooled, argmax, up)
        };
        let (out, pooled, argmax, up) = forward(&x);
        let copy = TransformedCopy::finish(
            out,
            Some(Tape::DownsampledRandMix {
                argmax,
                input_len: 64,
                pooled,
                centers: centers.clone(),
                noise: noise.clone(),
                alpha,
                up,
            }),
        );
        check_vjp("downsampled_rand_mix", &x, |z| forward(z).0.clamp(), &copy);
    }

    #[test]
    fn surrogates() {
        let cfg = TransformConfig::mnist();
        assert_eq!(
            Transform::RandDisc { config: cfg }.surrogate(1.0),
            Transform::RandMix { config: cfg }
        );
        assert!(matches!(
            Transform::BitDepth { bits: 2 }.surrogate(1.0),
            Transform::SmoothBitDepth { bits: 2, alpha } if alpha == 60.0
        ));
        assert_eq!(Transform::Identity.surrogate(1.0), Transform::Identity);
        for t in [
            Transform::RandDisc { config: cfg },
            Transform::BitDepth { bits: 3 },
            Transform::DownsampledRandDisc {
                config: cfg,
                downsample: DownsampleConfig::IDENTITY,
            },
        ] {
            assert!(!t.is_differentiable());
            assert!(t.surrogate(1.0).is_differentiable());
        }
    }

    #[test]
    fn non_differentiable_tape_is_an_error() {
        let model = small_model(6, 1);
        let p = DefensePipeline::new(
            &model,
            Transform::RandDisc {
                config: TransformConfig::mnist(),
            },
        )
        .unwrap();
        let err = p.transform_copy(&interior_image(6, 1), &mut RngStream::new(1), true);
        assert!(matches!(err, Err(Error::NotDifferentiable(_))));
    }

    #[test]
    fn outputs_fed_to_the_model_are_clamped() {
        let model = small_model(6, 1);
        let p = DefensePipeline::new(&model, Transform::Gaussian { sigma: 0.5 }).unwrap();
        let copy = p
            .transform_copy(&interior_image(6, 1), &mut RngStream::new(1), false)
            .unwrap();
        assert!(copy.output().is_clamped());
        assert!(copy.output().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn deterministic_votes_are_unanimous() {
        let model = small_model(6, 1);
        let p = DefensePipeline::new(&model, Transform::Identity).unwrap();
        let x = interior_image(6, 3);
        let counts = p.vote_counts(&x, 7, &mut RngStream::new(0)).unwrap();
        assert_eq!(counts[model.predict(&x).unwrap()], 7);
        assert_eq!(counts.iter().sum::<usize>(), 7);
    }
}
