pub mod archive;
pub mod channel_lab;
pub mod codec;
pub mod decoding;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod seed;
pub mod tensor;
pub mod tokens;
pub mod training;

pub use error::{Error, Result};
pub use tokens::{CodecSpec, Hypothesis, Manifest, ManifestEntry, TokenSequence, WaveformBuffer};
