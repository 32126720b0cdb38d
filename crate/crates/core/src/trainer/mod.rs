//! Pre-training, evaluation, ablations and the end-to-end gradient check.

mod ablation;
mod checkpoint;
mod evaluate;
mod gradcheck;
mod objective;
mod optim;
mod pretrain;

pub use ablation::{ablate, run_cell, trend_checks, AblationGrid, AblationTable, CellKey, CellResult, TrendCheck};
pub use checkpoint::{decode_tensor, encode_tensor, Checkpoint, FIRST_MOMENT_PREFIX, SECOND_MOMENT_PREFIX};
pub use evaluate::{evaluate, write_sample_metrics, SampleMetrics};
pub use gradcheck::{end_to_end_gradcheck, parameter_groups, EndToEndReport};
pub use objective::{sample_gradients, sample_loss, Objective};
pub use optim::{adam_step, lr_at, AdamState, BETA1, BETA2, EPSILON};
pub use pretrain::{batch_indices, pretrain, total_steps, worker_pool, worker_threads, PretrainOptions, PretrainOutcome, StepLog};
