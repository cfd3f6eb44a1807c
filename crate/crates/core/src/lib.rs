//! Clickstream dropout prediction with pretrained click n-gram and video
//! embeddings.

pub mod clickstream;
pub mod dropout;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod ngram;
pub mod numeric;
pub mod persist;
pub mod synth;
pub mod video;

pub use error::{Error, Result};
