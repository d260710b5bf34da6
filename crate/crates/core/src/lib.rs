//! Selective data augmentation for dialogue generation.
//!
//! A selector scores every query/response pair of a corpus; it is trained
//! against two discriminators (quality and representativeness) plus a DPP
//! diversity term, so that high scores land on pairs that are both poorly
//! generated and representative of the corpus. The highest-scored pairs are
//! then augmented and a downstream generator is retrained on the result.

pub mod augment;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod generator;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod quality;
pub mod representativeness;
pub mod selector;
pub mod synth;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
