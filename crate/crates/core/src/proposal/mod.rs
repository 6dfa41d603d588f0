//! Image-conditioned recurrent proposal: CNN embedding, LSTM decoder over the
//! `1 + K + L` latent components, one softmax head per component kind.

mod arch;
pub mod checkpoint;
mod net;
mod train;

pub use arch::{ArchConfig, HeadDims};
pub use net::{latent_classes, latent_from_classes, ProposalNet, RecurrentState, StepInput};
pub use train::{
    decode_all, heldout_set, recognition_rate, recognized, train, training_batch, BatchSource, MetricsRow, TrainConfig,
    TrainReport,
};

#[cfg(test)]
mod tests;
