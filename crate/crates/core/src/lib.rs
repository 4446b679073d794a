//! Engine for generating, evolving and evaluating a dynamic, player-centric
//! RAG benchmark.
//!
//! A benchmark slice pairs a versioned knowledge base with a set of evaluation
//! tuples. Slices are synthesized from community-mined question templates and
//! personas grounded in authority snippets, then moved forward in time by two
//! update pathways: knowledge evolution (announcements invalidate tuples whose
//! entities they touch) and interest drift (a topic-weighted Jensen-Shannon
//! divergence triggers topic resampling).
//!
//! Module map:
//!
//! - [`model`] - snippets, tuples, slices and the derivation rules between them
//! - [`providers`] - completion / embedding backends, including deterministic mocks
//! - [`ingest`] - chunking pre-extracted documents into snippets
//! - [`entity`] - entity normalization, extraction and the inverted entity index
//! - [`community`] - topic classification, template / persona mining, dedup
//! - [`synthesis`] - the hypothetical-Q&A grounded tuple synthesis loop
//! - [`drift`] - windowed topic distributions and weighted JSD drift detection
//! - [`lifecycle`] - knowledge / interest update pathways between slices
//! - [`rag_eval`] - BM25 and dense retrieval plus Recall / F1 / NDCG @K
//! - [`judge`] - LLM-as-judge scoring and agreement statistics
//! - [`store`] - on-disk benchmark store layout
//! - [`cli`] - the `chronoplay` command line

pub mod cli;
pub mod community;
pub mod config;
pub mod drift;
pub mod entity;
pub mod error;
pub mod ingest;
pub mod judge;
pub mod lifecycle;
pub mod model;
pub mod prompts;
pub mod providers;
pub mod rag_eval;
pub mod store;
pub mod synthesis;
pub mod taxonomy;
pub mod util;

pub use error::{Error, Result};
