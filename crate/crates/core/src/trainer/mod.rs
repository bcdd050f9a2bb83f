//! Mini-batch training: batch assembly over mixed paired and unpaired data,
//! the four-stage step (evidence space, lesion evidence, relation inference,
//! alignment), AdamW updates, checkpoints and the metrics stream.

mod batch;
mod checkpoint;
mod config;
mod optim;
mod run;
mod step;

pub use batch::{make_batches, Batch, BatchPlan, BatchView, EvidenceTable};
pub use checkpoint::{
    load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, CHECKPOINT_SCHEMA_VERSION,
};
pub use config::{LossWeights, Mode, Phase, Temperatures, TrainConfig, CONFIG_SCHEMA_VERSION};
pub use optim::{adamw_step, Moments, BETA1, BETA2, EPS};
pub use run::{epoch_seed, train, MetricsWriter, StepRecord};
pub use step::{
    forward, train_step, Detached, Forward, LossBreakdown, RelationStats, StepOutcome, TermVars,
    TrainState,
};
