//! Cross-modal alignment of audio autoencoder embeddings with
//! self-attended tag embeddings.
//!
//! The crate is organised as a pipeline:
//!
//! * [`tensor`]: dense tensors, a reverse-mode tape and SGD.
//! * [`audio`]: log-mel patches and the MFCC baseline.
//! * [`tags`]: tag preprocessing, vocabulary and CBOW word embeddings.
//! * [`model`]: audio encoder/decoder, tag self-attention and projection head.
//! * [`objectives`]: generalized KL reconstruction and NT-Xent alignment losses.
//! * [`corpus`]: manifests turned into prepared patches and word models.
//! * [`train`]: the joint optimisation loop and checkpoints.
//! * [`downstream`]: frozen-embedding MLP probes and retrieval.
//! * [`synth`]: a synthetic tagged dataset for desk-scale runs.

pub mod audio;
pub mod corpus;
pub mod downstream;
pub mod error;
pub mod format;
pub mod manifest;
pub mod model;
pub mod objectives;
pub mod par;
pub mod rng;
pub mod synth;
pub mod tags;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
