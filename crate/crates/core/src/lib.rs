//! Question-driven task completion on instructional videos.
//!
//! The crate covers the on-disk task format, feature extraction with
//! a deterministic synthetic backend, the Q2A grounding/decoding model with
//! hand-written backpropagation, training, ranking metrics and a procedural
//! benchmark generator with an exact oracle.

pub mod container;
pub mod dataset;
pub mod decoder;
pub mod embedding;
pub mod evaluation;
pub mod experiment;
pub mod grounding;
pub mod model;
pub mod nn;
pub mod par;
pub mod seed;
pub mod synth;
pub mod training;
pub mod types;

pub use par::Execution;
