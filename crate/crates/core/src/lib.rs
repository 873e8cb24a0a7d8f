//! Aspect-aware candidate generation for news recommendation.
//!
//! The pipeline represents every article as a bundle of discrete per-aspect
//! codes (content, sentiment, category, political leaning, frame), learns a
//! next-article code predictor over user histories, and retrieves candidates
//! from an HNSW index of concatenated per-aspect vectors. Diversity is
//! injected at query time by probabilistically inverting aspect sub-vectors
//! of the retrieval query. Candidate sets are scored with traditional
//! diversity metrics, divergence-based normative metrics, and four
//! democratic-model alignment scores, against five baseline generators.
//!
//! Modules map onto the pipeline stages:
//!
//! - [`corpus`]: MIND-format ingestion and seeded synthetic corpora
//! - [`aspect`]: per-aspect embedding spaces (contrastive heads + SVD reducers)
//! - [`quantizer`]: per-aspect VQ-VAE codebooks
//! - [`seqmodel`]: decoder-only transformer over flattened code sequences
//! - [`hnsw`]: approximate nearest-neighbor index
//! - [`retrieval`]: query formulation, diversity injection, candidate assembly
//! - [`baselines`]: comparison candidate generators
//! - [`metrics`]: traditional + divergence metrics and democratic scores
//! - [`harness`]: configuration, stage orchestration, and the (n, p) sweep

pub mod aspect;
pub mod baselines;
pub mod blob;
pub mod corpus;
pub mod error;
pub mod harness;
pub mod hnsw;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod quantizer;
pub mod retrieval;
pub mod rng;
pub mod seqmodel;

pub use error::{Error, Result};
