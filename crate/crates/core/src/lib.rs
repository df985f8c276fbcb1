//! Few-shot in-context classification with discriminative exemplar coresets
//! and a self-refined experience bank.
//!
//! The crate is organised bottom-up:
//!
//! - [`embedding`]: labeled embedding datasets and their file format.
//! - [`decs`]: coreset sizing, initialization, hardest-positive EMA
//!   optimization and Top-K exemplar retrieval.
//! - [`exemplar`]: the exemplar-selection arms (none, random, raw Top-K, coreset).
//! - [`bank`]: the capacity-bounded heuristic store and its transitions.
//! - [`prompt`]: inference, scoring, summarization and update prompts.
//! - [`model`]: model clients (HTTP and deterministic mocks) and output parsers.
//! - [`sres`]: rollout scoring, contrastive summarization and bank evolution.
//! - [`pipeline`]: configuration and the optimize / evolve / eval / retrieve commands.
//! - [`harness`]: synthetic benchmarks and brute-force oracles.

pub mod bank;
pub mod decs;
pub mod embedding;
pub mod exemplar;
pub mod harness;
pub mod model;
pub mod pipeline;
pub mod prompt;
pub mod rng;
pub mod sres;
