//! Desk-scale models with exact hand-written forward/backward passes, data
//! ingestion, and tape capture for curvature estimation.

mod checkpoint;
mod data;
mod mlp;
mod model;
mod train;
mod transformer;

pub use checkpoint::{load_model, load_tensors, save_model, save_tensors};
pub use data::{Corpus, DataConfig, Split};
pub use model::{
    build_model, evaluate_loss, forward_backward, Architecture, Batch, ForwardBackward, Layer,
    LayerKind, LayerTape, ModelCheckpoint, ModelConfig, ModelMeta,
};
pub use train::{sgd_train, TrainLog};
