//! Interactive text-to-video retrieval with question/answer query refinement.
//!
//! A session starts from a text query, ranks the gallery, then repeatedly asks
//! a question about the target video, appends the answer to the query and
//! ranks again. Questions come from a rule-based planner ([`heuristic`]) or a
//! language model ([`parametric`]); answers from a VideoQA model, a
//! caption-then-LM pipeline, ground truth or a person ([`answer`]).
//!
//! Model access goes through [`gateway::ModelGateway`]. The crate ships a
//! deterministic synthetic provider, so the whole loop runs without any
//! neural model.

pub mod answer;
pub mod container;
pub mod corpus;
pub mod eval;
pub mod gateway;
pub mod hashing;
pub mod heuristic;
pub mod lexicon;
pub mod parametric;
pub mod question;
pub mod ranking;
pub mod session;

pub use corpus::{build_index, load_manifest, CorpusManifest, EmbeddingMatrix, Segment};
pub use gateway::{open_provider, ModelGateway};
pub use session::{Session, SessionConfig, SessionContext, SessionRecord};
