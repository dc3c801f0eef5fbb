//! Adapts black-box chat models to specialized domains by pairing them with a
//! small knowledge generator: a knowledge-instruction data pipeline
//! (generation + consistency filtering) and derivative-free optimization of
//! the generator's soft prompt against downstream answer accuracy.
//!
//! The search works in a low-dimensional space: a fixed seeded random
//! projection maps a d-dimensional vector to the generator's soft-token
//! embeddings, a Gaussian-process surrogate models the batch accuracy
//! landscape, and expected improvement (maximized with CMA-ES) proposes the
//! next candidate. Everything is runnable against real HTTP endpoints or
//! against the deterministic simulators in [`synthetic`] and [`llm::sim`].
//!
//! Batch-parallel inner loops (objective evaluation, dataset generation,
//! distortion sampling) run on rayon when the default `parallel` feature is
//! enabled and fall back to plain sequential iteration otherwise; results are
//! identical either way.

pub mod acquisition;
pub mod bpo;
pub mod cmaes;
pub mod eval;
pub mod gp;
pub mod kit;
pub mod llm;
pub mod par;
pub mod projection;
pub mod seeds;
pub mod synthetic;
pub mod types;

pub use types::{EmbeddingShape, EvalOutcome, KnowledgeRecord, LowDimPrompt, McqExample, SoftEmbedding};
