use serde::{Deserialize, Serialize};

use super::loss::LossKind;
use super::model::{Architecture, Model};
use crate::error::{invalid, Error, Result};
use crate::image::Dataset;
use crate::rng::RngStream;

/// Minibatch SGD with momentum on cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("train", "epochs and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("train", "need learning rate > 0 and momentum in [0, 1)"));
        }
        Ok(())
    }
}

/// Reported after every minibatch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainProgress {
    pub epoch: usize,
    pub batch: usize,
    pub batches_per_epoch: usize,
    pub loss: f64,
}

pub fn train(dataset: &Dataset, arch: Architecture, cfg: &TrainConfig) -> Result<Model> {
    train_with_observer(dataset, arch, cfg, |_| {})
}

/// Trains from a seeded initialization. Each epoch visits the examples in
/// a fresh permutation drawn from the epoch's substream; the last partial
/// batch is kept.
pub fn train_with_observer(
    dataset: &Dataset,
    arch: Architecture,
    cfg: &TrainConfig,
    mut observe: impl FnMut(TrainProgress),
) -> Result<Model> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if arch.classes() != dataset.classes() {
        return Err(invalid(
            "architecture",
            format!("{} outputs for {} classes", arch.classes(), dataset.classes()),
        ));
    }
    let root = RngStream::new(cfg.seed);
    let mut model = Model::init(arch, &mut root.substream(0))?;
    let input_len = model.input_shape().len();
    let mut velocity: Vec<Vec<f64>> = model
        .params()
        .flat_map(|p| [vec![0.0; p.weights.len()], vec![0.0; p.bias.len()]])
        .collect();

    let n = dataset.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let mut inputs = Vec::with_capacity(cfg.batch_size * input_len);
    let mut labels = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle = root.derive(&[1, epoch as u64]);
        for i in (1..n).rev() {
            order.swap(i, shuffle.below(i + 1));
        }
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            inputs.clear();
            labels.clear();
            for &i in chunk {
                let ex = &dataset.examples()[i];
                if ex.image.data().len() != input_len {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{input_len} values"),
                        got: format!("{}", ex.image.data().len()),
                    });
                }
                inputs.extend_from_slice(ex.image.data());
                labels.push(ex.label);
            }
            let (loss, grads) = model.parameter_gradients(&inputs, &labels, LossKind::CrossEntropy)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("training loss diverged at epoch {epoch}")));
            }
            let mut v = velocity.iter_mut();
            for (p, g) in model.params_mut().zip(&grads.layers) {
                for (values, grad) in [(&mut p.weights, &g.weights), (&mut p.bias, &g.bias)] {
                    let vel = v.next().expect("one velocity buffer per tensor");
                    for ((w, dw), m) in values.iter_mut().zip(grad).zip(vel.iter_mut()) {
                        *m = cfg.momentum * *m - cfg.learning_rate * dw;
                        *w += *m;
                    }
                }
            }
            observe(TrainProgress {
                epoch,
                batch,
                batches_per_epoch,
                loss,
            });
        }
    }
    Ok(model)
}

/// Fraction of `dataset` the model classifies correctly, evaluated in
/// batches of 256.
pub fn accuracy(model: &Model, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut correct = 0;
    let mut inputs = Vec::new();
    for chunk in dataset.examples().chunks(256) {
        inputs.clear();
        for ex in chunk {
            inputs.extend_from_slice(ex.image.data());
        }
        let preds = model.predict_batch(&inputs, chunk.len())?;
        correct += preds.iter().zip(chunk).filter(|(p, ex)| **p == ex.label).count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}
