//! Crowd-aware adaptation: segmentation-gated feature alignment, pseudo-label
//! density alignment, and the training loop that combines them.

mod nets;
mod seg;
mod sppl;
mod train;

pub use nets::{
    cda_loss, crt_loss, CounterConfig, CounterNet, CounterPass, DensityDiscriminator, DomainClassifiers, GatedSample, LEVELS,
};
pub use seg::{harden_seg, normalize_seg, seg_to_level};
pub use sppl::{make_sppl, sample_sppl_points, sppl_distribution, update_count};
pub use train::{
    adapt_train, predict_count, predict_counts, pretrain_source, soft_segmentations, train_supervised, AdaptInputs,
    IterRecord, SegMode, TrainConfig,
};
