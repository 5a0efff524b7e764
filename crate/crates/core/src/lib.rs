//! Temporal-domain audio watermarking.
//!
//! Embeds an l-bit payload directly into a raw waveform with a
//! content-driven convolutional encoder, recovers it with a gated
//! convolutional decoder trained against a post-processing attack
//! simulator, and verifies ownership with a binomial hypothesis test.

pub mod cli;
pub mod error;
pub mod numerics;

pub use error::{Error, Result};
