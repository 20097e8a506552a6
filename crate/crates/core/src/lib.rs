//! Retrieval-based tool selection over structured tool descriptions.
//!
//! The pipeline: standardized three-field tool descriptions ([`tooldesc`]),
//! corpus ingestion and tool-level splitting ([`corpus`]), embedding providers
//! with a content-addressed cache ([`embed`]), exact inner-product retrieval
//! ([`retrieve`]), description generation via a chat client ([`llmclient`]),
//! preference-pair construction ([`prefgen`]), alignment-loss diagnostics
//! ([`align`]), and a two-level evaluation harness ([`eval`]).
//!
//! The numeric core is generic over the scalar type through [`scalar::Real`];
//! the aliases below fix `f64` for the concrete pipeline.

pub mod align;
pub mod corpus;
pub mod embed;
pub mod eval;
pub mod llmclient;
pub mod prefgen;
pub mod retrieve;
pub mod scalar;
pub mod tooldesc;
pub mod util;

/// Scalar type used by the concrete pipeline and the CLI.
pub type Scalar = f64;

pub type EmbeddingVector = embed::Embedding<Scalar>;
pub type ToolIndex = retrieve::ToolIndex<Scalar>;
pub type RetrievalResult = retrieve::RetrievalResult<Scalar>;
pub type LocalEmbedder = embed::LocalEmbedder<Scalar>;
pub type SequenceLogProb = align::SequenceLogProb<Scalar>;
pub type DpoExample = align::DpoExample<Scalar>;
pub type DpoConfig = align::DpoConfig<Scalar>;
