//! Preference-pair curation and evaluation for vision-language training data.
//!
//! The crate is organized around four areas:
//!
//! - embedding math: unit-norm vectors, cosine scoring on the x100 scale,
//!   batch score matrices, and category prototypes ([`embedding`]);
//! - ingestion: record schemas and JSONL loading, the binary embedding
//!   store, and preference-pair emission ([`records`], [`store`]);
//! - curation: per-image caption ranking, category assignment with text
//!   down-sampling, score/length thresholds, and per-image pair selection
//!   ([`curation`], [`pairs`]);
//! - evaluation: preference-loss kernels with analytic gradients ([`loss`]),
//!   hallucination metrics ([`amber`]), zero-shot classification
//!   ([`zeroshot`]), and the likelihood-inversion probe ([`probe`]).
//!
//! [`pipeline`] ties curation together behind a deterministic sharded
//! runner; [`encoder`] is the sidecar protocol used to obtain embeddings
//! that are not precomputed.

pub mod amber;
pub mod config;
pub mod curation;
pub mod embedding;
pub mod encoder;
pub mod hash;
pub mod loss;
pub mod pairs;
pub mod pipeline;
pub mod probe;
pub mod records;
pub mod store;
pub mod summary;
pub mod zeroshot;
