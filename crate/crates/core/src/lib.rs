//! Malware family classification from raw file bytes.
//!
//! The pipeline reads hex-dump or raw binary samples ([`ingest`]), scales each
//! one to a fixed-length byte-intensity sequence ([`resample`]), and classifies
//! it with one of three small networks ([`models`]) built on a self-contained
//! CPU engine ([`nn`]). [`sampling`] and [`train_eval`] implement stratified
//! cross-validation and the default / class-rebalanced batch generators.

pub mod error;
pub mod family;
pub mod ingest;
pub mod models;
pub mod nn;
pub mod resample;
pub mod sampling;
pub mod synthetic;
pub mod train_eval;

pub use error::{Error, Result};
pub use family::{Family, NUM_CLASSES};
pub use ingest::{ByteSequence, LabeledSample};
pub use models::{Architecture, ModelConfig, ModelParams};
pub use resample::{ResampledSequence, INPUT_LEN};
