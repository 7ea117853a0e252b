//! A small CNN with hand-written forward and backward passes.
//!
//! Activations are batched, channel-last (`batch × height × width ×
//! channels`), matching [`Image`](crate::Image)'s layout. Convolutions are
//! lowered to matrix products via im2col.

mod checkpoint;
mod gemm;
mod loss;
mod model;
mod train;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use loss::{loss, loss_gradient, softmax, LossKind};
pub use model::{Architecture, Gradients, LayerSpec, Model, Shape, Trace};
pub use train::{accuracy, train, train_with_observer, TrainConfig, TrainProgress};
