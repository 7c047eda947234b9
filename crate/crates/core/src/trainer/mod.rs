//! Model bundle, optimisation, evaluation and persistence.

mod adam;
pub mod checkpoint;
pub mod eval;
mod model;
mod train;

pub use adam::Adam;
pub use eval::{evaluate, EvalSet, Metrics};
pub use model::{generator_forward, Generator, GeneratorInput, ModelBundle, FEATURE_CHANNELS};
pub use train::{
    best_threshold, draw_sync_pair, eval_seed, pretrain_sync, run, sync_accuracy, Event, RunResult, StepStats, SyncPair, SyncReport,
    Trainer, MIN_SYNC_OFFSET,
};
