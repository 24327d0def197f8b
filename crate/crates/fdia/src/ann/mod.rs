//! Neural state estimation: model, training, metrics and checkpoints.

mod checkpoint;
mod metrics;
mod model;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use metrics::{
    evaluate_model, mare_va, mare_vm, se_metrics_from_predictions, SeMetrics, ANGLE_GUARD,
    VA_ACCURACY_THRESHOLD, VM_ACCURACY_THRESHOLD,
};
pub use model::{AnnModel, ForwardTrace};
pub use train::{
    loss_penalized, loss_wls, train, train_with_normalization, weights_digest, LossKind,
    TrainHistory, TrainingConfig,
};
