//! Actor dual-critic caption generation over precomputed image features.
//!
//! * [`nn`]: parameters, a reverse-mode tape, GRU and layer-norm LSTM cells,
//!   Adam, finite-difference checks and the checkpoint format.
//! * [`text`]: tokenization, vocabulary and the JSON Lines dataset.
//! * [`metrics`]: BLEU-1..4, ROUGE-L, CIDEr.
//! * [`actor`]: the GRU -> LN-LSTM policy.
//! * [`value_critic`]: recurrent value baseline with a tanh head.
//! * [`encdec_critic`]: the sentence-to-feature reconstruction critic.
//! * [`trainer`]: pretraining, the episodic training loop, evaluation.
//! * [`synth`]: deterministic synthetic datasets.
//! * [`gradcheck_suite`]: per-component gradient verification.

pub mod actor;
pub mod encdec_critic;
pub mod error;
pub mod gradcheck_suite;
pub mod metrics;
pub mod nn;
pub mod synth;
pub mod text;
pub mod trainer;
pub mod value_critic;

pub use error::{AdcError, Result};
