//! Pretraining and finetuning loops.

mod config;
mod data;
mod finetune;
mod loader;
mod log;
mod pretrain;
mod state;

use std::path::PathBuf;

pub use config::{
    AblationFlags, AblationRow, Budget, LabelTimepoints, TrainConfig, ENC_DEC_TAPS, ENC_TAPS, ORTH_TAPS, VARCOV_TAPS,
};
pub use data::{labelled_batch, longitudinal, pair_batch, stack, LabelledBatch, LabelledItem, PairBatch, PairSpec};
pub use finetune::{
    cs_pass, finetune, labelled_items, labelled_subjects, sup_pass, validate, validation_dice, FinetuneOutcome,
    FINETUNE_LOG, LOG_COLUMNS,
};
pub use loader::{Loader, MakeBatch};
pub use log::{read_log, LossLog};
pub use pretrain::{
    log_header, pretrain, pretrain_pass, validation_loss, PretrainOutcome, StepLosses, BEST, LAST, PRETRAIN_LOG,
};
pub use state::{pretrain_model, segmentation_model, AdamMeta, Checkpoint, CheckpointMeta, Phase, ValPoint};

/// Execution options shared by both phases.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    /// Background batch workers; 0 builds batches inline.
    pub workers: usize,
    /// Ready batches each worker may queue.
    pub queue: usize,
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Stop after this many completed steps without changing the schedule.
    pub stop_at: Option<usize>,
}
