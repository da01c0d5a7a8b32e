//! Ranking of statically derived identifier completions with a language
//! model.
//!
//! Candidates are tokenized with the model's vocabulary and organized into a
//! prefix tree ([`tree::CompletionTree`]). A single greedy decode walks the
//! tree, masking the model to valid continuations, and records the
//! probability of every child edge at every visited node. Candidates are
//! then ordered by how deep their path was scored and by the last recorded
//! probability ([`engine::rank`]).
//!
//! Reference decoders (greedy, beam search, exhaustive tree scoring) live in
//! [`baselines`]; every ranker is reachable by name through
//! [`strategy::StrategyRegistry`], and [`eval`] runs them over datasets.

pub mod backend;
pub mod baselines;
pub mod engine;
pub mod eval;
pub mod strategy;
pub mod subtoken;
pub mod token;
pub mod tree;

pub use backend::{BackendError, Distribution, LogitMask, ModelBackend};
pub use engine::{rank, DecodeConfig, DecodeStats, RankedCompletion};
pub use subtoken::{SubtokenMap, TokenTables};
pub use token::{TokenId, TokenSeq, Vocabulary};
pub use tree::{CandidateId, CompletionTree};
