//! Graph neural networks whose propagation parameters are generated from
//! sentence context, applied to multi-hop relation extraction.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors with a reverse-mode tape and a
//!   finite-difference gradient oracle.
//! - [`layers`]: embedding tables, LSTM cells, the bidirectional encoder,
//!   perceptrons and the named parameter store with checkpoint I/O.
//! - [`model`]: entity graphs, transition-matrix generation, flag-initialised
//!   propagation, pair classification and the sentence loss.
//! - [`corpus`]: corpus ingestion, normalisation, dense-subset extraction,
//!   pretrained embeddings and a synthetic multi-hop corpus generator.
//! - [`training`]: mini-batch training with adaptive moments and early stopping.
//! - [`evaluation`]: sentence metrics, bag-level max scoring, P@K% and PR curves.

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
