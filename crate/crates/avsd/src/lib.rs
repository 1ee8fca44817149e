//! Audio-visual self-distillation lipreading toolkit.
//!
//! The library covers the full pipeline: a deterministic synthetic
//! audio-visual corpus, masked self-distillation pretraining of a shared
//! encoder, hybrid attention/CTC fine-tuning, KLD-regularized speaker
//! adaptation, ensemble joint decoding, and character-error-rate scoring
//! with bootstrap confidence intervals. The `avsd` binary exposes each
//! stage as a subcommand.

pub mod adapt;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod ctc;
pub mod decode;
pub mod error;
pub mod finetune;
pub mod metrics;
pub mod frontend;
pub mod model;
pub mod oracle;
pub mod pretrain;
pub mod rng;
pub mod vocab;

pub use error::{Error, Result};
