//! Small context-conditioned label generator with hand-written backprop.
//!
//! Encoder: every position gets its token embedding plus the mean embedding
//! of the labels in its demonstration segment. Rows of the query segment
//! attend over the whole prompt with a scaled dot-product score plus a
//! learned bonus for exact content-token matches, pass through a residual
//! feed-forward block and are mean-pooled. The decoder adds the embeddings
//! of already emitted labels to the pooled vector and projects onto the
//! label set plus EOS.

pub mod network;
pub mod params;
pub mod train;
pub mod vocab;

pub use network::{accumulate_grad, argmax, forward, generate_greedy, loss_and_grad, softmax_in_place};
pub use params::{Dims, ModelParams, N_TENSORS, TENSOR_NAMES};
pub use train::{
    encode_instance, encode_instances, fit, train, Adam, DevScorer, EncodedInstance, EpochReport,
    FitExtras, Mixture, Relexicalizer, Schedule, TrainConfig, TrainOutcome,
};
pub use vocab::Vocab;
