//! Hierarchical text classification as label-sequence generation.
//!
//! A document is mapped to a breadth-first flattening of its label set
//! (`<root> A B / A1 B2`) by a small encoder-decoder transformer. Training
//! combines token cross-entropy with an output-space hinge over hierarchy
//! edges, a penalty on probability mass outside the taxonomy vocabulary and a
//! per-level margin loss in a joint text/label-name embedding space, after a
//! denoising stage that reconstructs partially masked label sequences.

pub mod config;
pub mod corpus;
pub mod evaluator;
pub mod exec;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod taxonomy;
pub mod tokenizer;
pub mod trainer;
