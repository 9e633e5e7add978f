//! Event schema induction from unlabeled text.
//!
//! The pipeline runs in four stages, each with its own module:
//!
//! 1. [`corpus`] loads and filters expression units;
//! 2. [`conceptualize`] prompts a generation endpoint with in-context
//!    demonstrations and parses `Type: t, Slots: s1; s2` candidates;
//! 3. [`structuralize`] scores slots by salience, reliability and
//!    consistency and keeps the confident ones;
//! 4. [`aggregate`] clusters instances with [`louvain`] and merges every
//!    cluster into one schema.
//!
//! [`eval`] scores a clustering against gold labels and [`pipeline`] chains
//! the stages through line-oriented JSON files.

pub mod aggregate;
pub mod conceptualize;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod louvain;
pub mod pipeline;
pub mod schema;
pub mod similarity;
pub mod structuralize;

pub use aggregate::{AggregatedSchema, EdgePrune, GraphConfig, SchemaGraph, SlotGroup};
pub use conceptualize::{
    ConceptualizedInstance, Demonstration, GenerationClient, GenerationRequest, GenerationResponse,
};
pub use corpus::{CorpusFilterConfig, EventExpression, InputFormat, LanguageMode};
pub use error::{Error, GenerationError, ParseError, Result};
pub use eval::{ClusteringMetrics, LabeledPartition};
pub use louvain::{ClusterAssignment, WeightedGraph};
pub use pipeline::{PipelineConfig, Stage, StageReport};
pub use schema::SchemaCandidate;
pub use similarity::SimilarityEnsemble;
pub use structuralize::{ScoringConfig, SlotRecord, StructuredInstance};
