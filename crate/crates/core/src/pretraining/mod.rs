//! Proxy tasks: masking, masked word and object prediction, image-text
//! alignment, and the combined training step with intervention heads.

mod losses;
mod masking;
mod presets;
mod trainer;

pub use losses::{alignment_logit, alignment_loss, mlm_logits, mlm_loss, mom_loss, PretrainHeads};
pub use masking::{apply_masking, random_word, MaskingPolicy};
pub use presets::{preset, Preset, PRESETS};
pub use trainer::{
    build_batch, Batch, DesignSpec, Example, LossReport, ObjectiveWeights, Pretrainer, Schedule,
    TrainOptions,
};
