//! Training: loss terms, batch assembly, and the optimization loop with its
//! gt-skeleton / causal / representation variants.

pub mod batch;
pub mod losses;
mod trainer;

pub use batch::{assemble_batch, BatchOptions, TrainingBatch};
pub use losses::{
    loss_contact, loss_contact_velocity, loss_position, loss_root_depth, loss_skeleton,
    loss_tpose_reference, lsgan_d_loss, lsgan_g_loss, ContactLossForm, LossWeights,
};
pub use trainer::{train, train_with_data, TrainConfig, TrainOutcome, Variant};
