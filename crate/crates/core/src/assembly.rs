//! Position-aware fusion, the toy decoder, loss composition, training and
//! checkpoints.

pub mod checkpoint;
mod decoder;
mod fuse;
mod model;
mod train;

pub use decoder::{answer_loss, generate, lm_loss, Decoder};
pub use fuse::{pos_concat, FusedSequence, InstanceBlock, Segment};
pub use model::{
    prepare, prepare_all, total_loss, AblationTag, InstanceTrace, LossParts, Madi, ModelConfig, PreparedInstance,
    PreparedSample, SampleForward, Toggles, STAGE1_FROZEN,
};
pub use train::{quick_score, train, train_alignment, BestCheckpoint, EvalSet, StepRecord, TrainConfig, TrainOutcome};
