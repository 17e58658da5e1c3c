//! Semi-supervised text classification with a mixture of expert/imitator
//! networks.
//!
//! The expert is an LSTM classifier trained on labeled data. Imitators are
//! small windowed CNNs trained on unlabeled data to reproduce the expert's
//! label distribution from restricted views of the input. A gated mixture
//! combines expert and imitator logits for the final prediction.
//!
//! Training runs in three consecutive stages: supervised expert training,
//! imitation training against the frozen expert, and fine-tuning of the
//! expert plus mixture gates with the imitators frozen.

pub mod config;
pub mod data;
pub mod expert;
pub mod imitator;
pub mod mixture;
pub mod pipeline;
pub mod plot;
pub mod tensor;
pub mod vocab;
