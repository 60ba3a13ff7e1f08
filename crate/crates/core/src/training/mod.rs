//! Loss assembly, optimization, checkpoints and the training loop.

pub mod checkpoint;
pub mod loss;
pub mod optim;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use loss::{total_loss, total_loss_graph, LossSpec};
pub use optim::{adamw_apply, lr_at, OptimizerConfig, OptimizerState, Schedule};
pub use train::{checkpoint_path, train_to_dir, MetricsLog, SampleSlot, StepRecord, TrainConfig, Trainer, THREADS_ENV};
