//! Latent signature discovery from sparse, irregular, multi-modal event
//! records.
//!
//! The pipeline turns each record into daily curves ([`curves`]), samples
//! cross-sections into a channels x samples matrix ([`sampler`]), puts every
//! data mode on a common scale ([`standardize`]), and separates the matrix
//! into independent sources whose mixing columns are the signatures
//! ([`ica`]). [`synth`] generates records from planted sources and scores
//! recovery; [`eval`] and [`report`] cover supervised evaluation and
//! human-readable output.

pub mod curves;
pub mod error;
pub mod eval;
pub mod ica;
pub mod linalg;
pub mod matrix;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod sampler;
pub mod standardize;
pub mod synth;

pub use error::{Error, Result};
pub use matrix::{read_matrix, write_matrix, Provenance, SampleMatrix};
pub use model::{ChannelDictionary, ChannelSpec, EventRecord, Mode};
