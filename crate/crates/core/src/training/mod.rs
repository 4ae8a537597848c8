//! Tracking losses, target assignment, AdamW and the training loop.

pub mod data;
pub mod loss;
pub mod optim;
pub mod trainer;


pub use data::{make_pair, object_box, sample_pair, Augment, FixedPairs, PairSample, PairSource, SequencePairs};
pub use loss::{
    assign_targets, bce, cls_loss, cross_entropy, reg_loss, reg_terms, total_loss, tracking_loss, LossWeights, RegTerms,
    SampleLoss, Targets, PROB_EPS,
};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use trainer::{probe_iou, train, LogRow, StepStats, TrainConfig, TrainLog, Trainer};
