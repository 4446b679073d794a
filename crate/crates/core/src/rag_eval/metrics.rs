use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Retriever;
use crate::error::{Error, Result};
use crate::model::BenchmarkSlice;
use crate::taxonomy::TopicId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalRun {
    pub query_id: String,
    pub ranked_ids: Vec<String>,
    pub gold_ids: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub ndcg: f64,
}

/// Metrics over the first `k` ranks with binary gains.
pub fn retrieval_metrics(
    ranked: &[String],
    gold: &BTreeSet<String>,
    k: usize,
) -> Result<RetrievalMetrics> {
    if gold.is_empty() {
        return Err(Error::Contract("gold set is empty".into()));
    }
    if k == 0 {
        return Err(Error::Contract("K must be at least 1".into()));
    }
    let top = &ranked[..ranked.len().min(k)];
    let mut seen = BTreeSet::new();
    if let Some(d) = top.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::Contract(format!("ranked ids repeat {d}")));
    }
    let gains: Vec<bool> = top.iter().map(|id| gold.contains(id)).collect();
    let hits = gains.iter().filter(|g| **g).count() as f64;
    let recall = hits / gold.len() as f64;
    let precision = hits / k as f64;
    let f1 = if recall + precision == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let dcg: f64 = gains
        .iter()
        .enumerate()
        .filter(|(_, g)| **g)
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..k.min(gold.len()))
        .map(|i| 1.0 / ((i + 2) as f64).log2())
        .sum();
    Ok(RetrievalMetrics {
        recall,
        precision,
        f1,
        ndcg: dcg / idcg,
    })
}

/// Arithmetic mean, summed in input order.
pub fn mean_metrics(items: &[RetrievalMetrics]) -> RetrievalMetrics {
    if items.is_empty() {
        return RetrievalMetrics::default();
    }
    let n = items.len() as f64;
    let mut acc = RetrievalMetrics::default();
    for m in items {
        acc.recall += m.recall;
        acc.precision += m.precision;
        acc.f1 += m.f1;
        acc.ndcg += m.ndcg;
    }
    RetrievalMetrics {
        recall: acc.recall / n,
        precision: acc.precision / n,
        f1: acc.f1 / n,
        ndcg: acc.ndcg / n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub k: usize,
    pub metrics: RetrievalMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicRow {
    pub topic: TopicId,
    pub queries: usize,
    pub rows: Vec<MetricRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseEval {
    pub slice_index: u32,
    pub retriever: String,
    pub queries: usize,
    pub errors: usize,
    pub overall: Vec<MetricRow>,
    pub per_topic: Vec<TopicRow>,
}

/// Query with each tuple's question, score against its `ref_ids` at each K.
/// Tuples whose retrieval fails are counted and left out of the means.
pub fn evaluate_phase(
    slice: &BenchmarkSlice,
    retriever: &dyn Retriever,
    ks: &[usize],
) -> Result<PhaseEval> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config(
            "K values must be positive and non-empty".into(),
        ));
    }
    let kmax = *ks.iter().max().expect("non-empty");
    let runs: Vec<Result<Vec<RetrievalMetrics>>> = slice
        .tuples
        .par_iter()
        .map(|t| {
            let ranked = retriever.search(&t.question, kmax)?;
            let gold: BTreeSet<String> = t.ref_ids.iter().cloned().collect();
            ks.iter()
                .map(|&k| retrieval_metrics(&ranked, &gold, k))
                .collect()
        })
        .collect();
    let mut ok: Vec<(&TopicId, Vec<RetrievalMetrics>)> = Vec::new();
    let mut errors = 0;
    for (t, r) in slice.tuples.iter().zip(runs) {
        match r {
            Ok(m) => ok.push((&t.topic, m)),
            Err(e) => {
                log::warn!("retrieval failed for tuple {}: {e}", t.id);
                errors += 1;
            }
        }
    }
    let rows = |items: &[&Vec<RetrievalMetrics>]| -> Vec<MetricRow> {
        ks.iter()
            .enumerate()
            .map(|(j, &k)| MetricRow {
                k,
                metrics: mean_metrics(&items.iter().map(|m| m[j]).collect::<Vec<_>>()),
            })
            .collect()
    };
    let all: Vec<&Vec<RetrievalMetrics>> = ok.iter().map(|(_, m)| m).collect();
    let mut groups: BTreeMap<&TopicId, Vec<&Vec<RetrievalMetrics>>> = BTreeMap::new();
    for (t, m) in &ok {
        groups.entry(*t).or_default().push(m);
    }
    Ok(PhaseEval {
        slice_index: slice.index,
        retriever: retriever.name().to_string(),
        queries: ok.len(),
        errors,
        overall: rows(&all),
        per_topic: groups
            .into_iter()
            .map(|(t, ms)| TopicRow {
                topic: t.clone(),
                queries: ms.len(),
                rows: rows(&ms),
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EvalTuple, Origin, QuestionType};
    use proptest::prelude::*;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn gold(v: &[&str]) -> BTreeSet<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn worked_example() {
        let m = retrieval_metrics(&ids(&["d1", "d3", "d2"]), &gold(&["d1", "d2"]), 3).unwrap();
        assert_eq!(m.recall, 1.0);
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.f1 - 0.8).abs() < 1e-12);
        // DCG = 1 + 1/log2(4) = 1.5; IDCG = 1 + 1/log2(3).
        let idcg = 1.0 + 1.0 / 3f64.log2();
        assert!((idcg - 1.6309).abs() < 1e-4);
        assert!((m.ndcg - 1.5 / idcg).abs() < 1e-12);
        assert!((m.ndcg - 0.9197).abs() < 1e-4);
    }

    #[test]
    fn perfect_and_empty_runs() {
        let m = retrieval_metrics(&ids(&["a", "b"]), &gold(&["a", "b"]), 2).unwrap();
        assert_eq!((m.recall, m.precision, m.f1, m.ndcg), (1.0, 1.0, 1.0, 1.0));
        let m = retrieval_metrics(&ids(&["x", "y"]), &gold(&["a"]), 2).unwrap();
        assert_eq!((m.recall, m.precision, m.f1, m.ndcg), (0.0, 0.0, 0.0, 0.0));
        assert!(matches!(
            retrieval_metrics(&ids(&["x"]), &BTreeSet::new(), 1),
            Err(Error::Contract(_))
        ));
    }

    struct Fixed(BTreeMap<String, Vec<String>>);

    impl Retriever for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }
        fn search(&self, q: &str, k: usize) -> Result<Vec<String>> {
            match self.0.get(q) {
                Some(v) => Ok(v.iter().take(k).cloned().collect()),
                None => Err(Error::Retrieval("no".into())),
            }
        }
    }

    fn tuple(q: &str, topic: &str, refs: &[&str]) -> EvalTuple {
        EvalTuple {
            id: format!("t-{q}"),
            question: q.into(),
            answer: "a".into(),
            ref_ids: ids(refs),
            topic: TopicId::new("M", topic),
            timestamp: None,
            entities: Default::default(),
            question_type: QuestionType::new("extractive"),
            persona_id: None,
            origin: Origin::Synthesized,
        }
    }

    #[test]
    fn phase_means_and_groups() {
        let r = Fixed(BTreeMap::from([
            ("q1".to_string(), ids(&["a"])),
            ("q2".to_string(), ids(&["x"])),
            ("q3".to_string(), ids(&["c"])),
        ]));
        let slice = BenchmarkSlice {
            index: 2,
            kb_version: "kb".into(),
            tuples: vec![
                tuple("q1", "A", &["a"]),
                tuple("q2", "A", &["b"]),
                tuple("q3", "B", &["c"]),
                tuple("q4", "B", &["d"]),
            ],
            phase_start: 0,
            phase_end: None,
            parent_index: None,
        };
        let e = evaluate_phase(&slice, &r, &[1]).unwrap();
        assert_eq!(e.errors, 1);
        assert_eq!(e.queries, 3);
        assert!((e.overall[0].metrics.recall - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(e.per_topic.len(), 2);
        assert_eq!(e.per_topic[0].rows[0].metrics.recall, 0.5);
        assert_eq!(e.per_topic[1].queries, 1);

        let one = BenchmarkSlice {
            tuples: vec![tuple("q1", "A", &["a"])],
            ..slice
        };
        let e = evaluate_phase(&one, &r, &[1, 3]).unwrap();
        assert_eq!(
            e.overall[0].metrics,
            retrieval_metrics(&ids(&["a"]), &gold(&["a"]), 1).unwrap()
        );
        assert_eq!(
            e.overall[1].metrics,
            retrieval_metrics(&ids(&["a"]), &gold(&["a"]), 3).unwrap()
        );
    }

    proptest! {
        #[test]
        fn bounds_and_monotone_recall(perm in Just((0..12).map(|i| format!("d{i}")).collect::<Vec<_>>()).prop_shuffle(), g in proptest::collection::btree_set(0usize..12, 1..6)) {
            let gold: BTreeSet<String> = g.iter().map(|i| format!("d{i}")).collect();
            let mut last = 0.0;
            for k in 1..=12 {
                let m = retrieval_metrics(&perm, &gold, k).unwrap();
                for v in [m.recall, m.precision, m.f1, m.ndcg] {
                    prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
                }
                prop_assert!(m.recall >= last);
                last = m.recall;
                let top_all_gold = perm.iter().take(k.min(gold.len())).all(|d| gold.contains(d));
                prop_assert_eq!((m.ndcg - 1.0).abs() < 1e-12, top_all_gold);
            }
        }
    }
}
