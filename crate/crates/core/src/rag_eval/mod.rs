//! Retrieval evaluation: BM25 and dense retrievers, Recall / Precision / F1 /
//! NDCG at K, and per-slice runners with a per-topic breakdown.

mod bm25;
mod dense;
mod metrics;

pub use bm25::{Bm25Index, Bm25Params};
pub use dense::DenseRetriever;
pub use metrics::{
    evaluate_phase, mean_metrics, retrieval_metrics, MetricRow, PhaseEval, RetrievalMetrics,
    RetrievalRun, TopicRow,
};

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anything that ranks snippet ids for a text query.
pub trait Retriever: Sync {
    fn name(&self) -> &str;

    /// At most `k` snippet ids, best first.
    fn search(&self, query: &str, k: usize) -> Result<Vec<String>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrieverKind {
    Bm25,
    Dense,
}

impl FromStr for RetrieverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bm25" => Ok(Self::Bm25),
            "dense" => Ok(Self::Dense),
            other => Err(Error::Config(format!("unknown retriever {other:?}"))),
        }
    }
}
