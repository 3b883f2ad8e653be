//! Dual-path visual question answering.
//!
//! Given an image and a question, the engine answers twice: once from the
//! full image (macro pathway) and once from a model-predicted subregion that
//! is cropped, zoomed and shown alongside the original (micro pathway). The
//! answer with the lower perplexity is returned.
//!
//! Alongside the engine the crate ships the dataset curation used to build
//! two-round training conversations and a benchmark harness.

pub mod backend;
pub mod boxparse;
pub mod curate;
pub mod eval;
pub mod geometry;
pub mod imageops;
pub mod pipeline;
pub mod prompting;
