//! Verb attribute induction from word embeddings and dictionary definitions,
//! and zero-shot activity classification that pivots through those
//! attributes or through word embeddings.
//!
//! Module map:
//!
//! * [`numkernel`]: dense math, losses, Adam, gradient checking
//! * [`schema`]: the attribute taxonomy, ±1 class-signature tables, accuracy metrics
//! * [`textattr`]: text encoders (Emb, BoW, NBoW, BGRU and fusions) and attribute heads
//! * [`zeroshot`]: attribute/embedding pivot heads and the DAP, ESZL, DeVISE baselines
//! * [`dataio`]: file formats, splits, seeded synthetic data, model files
//! * [`cli`]: the batch command-line pipeline

pub mod cli;
pub mod dataio;
mod error;
pub mod gradcheck;
pub mod numkernel;
pub mod schema;
pub mod textattr;
pub mod zeroshot;

pub use error::{Error, Result};
