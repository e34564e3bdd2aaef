//! Instruction-data factory and evaluation harness for short-video content moderation.
//!
//! The pipeline runs in six steps:
//!
//! 1. [`guideline`]: parse issue guidelines and their hand-authored sub-question decompositions.
//! 2. [`corpus`]: load labelled video records, or synthesize a corpus with known latent truth.
//! 3. [`annotator`]: talk to an annotator model (remote HTTP or a deterministic mock).
//! 4. [`datagen`]: produce Caption / binary-VQA / multi-choice-VQA / CoT samples and drop the
//!    ones that contradict human labels.
//! 5. [`mixture`]: turn kept samples into shuffled, checksummed manifests and stage plans.
//! 6. [`eval`]: score zero-shot and SFT predictions and render metric tables.

pub mod annotator;
pub mod answer;
pub mod corpus;
pub mod datagen;
pub mod eval;
pub mod guideline;
pub mod hashing;
pub mod jsonl;
pub mod label;
pub mod mixture;
#[cfg(test)]
mod testutil;

pub use label::{Answer, Label};

/// Version string stamped into sample provenance.
pub const GENERATOR_VERSION: &str = concat!("modfactory/", env!("CARGO_PKG_VERSION"));
