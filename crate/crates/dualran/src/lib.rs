//! Dual-stream recurrence-attention network for utterance-sequence emotion
//! classification.
//!
//! A conversation is a sequence of utterance feature vectors with speaker ids
//! and per-utterance emotion labels. The model adds a learned speaker
//! embedding to each utterance, then runs two streams over the dialog: a
//! recurrent local-aware stream (bidirectional LSTM/GRU in pre-norm residual
//! blocks) and an attention-based global-aware stream (multi-head
//! self-attention without position encoding, also pre-norm residual). The
//! dual variant fuses both streams by concatenation and a linear projection;
//! two single-stream variants chain the modules sequentially in either order.
//!
//! Everything runs on a small reverse-mode autodiff tape ([`tensor`]), with
//! 32-bit arithmetic for training and 64-bit for gradient verification.
//! [`verify`] holds the finite-difference gradient-check suite, [`train`] the
//! AdamW loop, [`data`] corpus ingestion plus a synthetic context-dependent
//! benchmark generator, and [`metrics`] the classification report.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod rnn;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use rng::SeedRng;
pub use tensor::{Element, Tensor};
