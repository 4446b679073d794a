use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::Retriever;
use crate::error::{Error, Result};
use crate::model::KnowledgeSnippet;
use crate::util::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if !self.k1.is_finite() || self.k1 <= 0.0 || !(0.0..=1.0).contains(&self.b) {
            return Err(Error::Config(format!(
                "invalid BM25 parameters k1={} b={}",
                self.k1, self.b
            )));
        }
        Ok(())
    }
}

/// Okapi BM25 over an inverted index. Query terms are deduplicated and
/// scored in lexicographic order.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    params: Bm25Params,
    ids: Vec<String>,
    lengths: Vec<usize>,
    avgdl: f64,
    postings: HashMap<String, Vec<(usize, usize)>>,
}

impl Bm25Index {
    pub fn build<'a>(
        docs: impl IntoIterator<Item = (&'a str, &'a str)>,
        params: Bm25Params,
    ) -> Result<Self> {
        params.validate()?;
        let mut ids = Vec::new();
        let mut lengths = Vec::new();
        let mut postings: HashMap<String, Vec<(usize, usize)>> = HashMap::new();
        for (i, (id, text)) in docs.into_iter().enumerate() {
            let toks = tokenize(text);
            let mut tf: HashMap<&str, usize> = HashMap::new();
            for t in &toks {
                *tf.entry(t.as_str()).or_default() += 1;
            }
            for (t, f) in tf {
                postings.entry(t.to_string()).or_default().push((i, f));
            }
            ids.push(id.to_string());
            lengths.push(toks.len());
        }
        let avgdl = if ids.is_empty() {
            0.0
        } else {
            lengths.iter().sum::<usize>() as f64 / ids.len() as f64
        };
        Ok(Self {
            params,
            ids,
            lengths,
            avgdl,
            postings,
        })
    }

    pub fn from_snippets(snippets: &[KnowledgeSnippet], params: Bm25Params) -> Result<Self> {
        Self::build(
            snippets.iter().map(|s| (s.id.as_str(), s.content.as_str())),
            params,
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn idf(&self, df: usize) -> f64 {
        let n = self.ids.len() as f64;
        let df = df as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// All positive-scoring documents as `(id, score)`, best first, ties by id.
    pub fn scores(&self, query: &str) -> Result<Vec<(String, f64)>> {
        if self.ids.is_empty() {
            return Err(Error::Retrieval("BM25 index is empty".into()));
        }
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        let Bm25Params { k1, b } = self.params;
        let mut acc: HashMap<usize, f64> = HashMap::new();
        for t in &terms {
            let Some(post) = self.postings.get(t) else {
                continue;
            };
            let idf = self.idf(post.len());
            for &(d, f) in post {
                let f = f as f64;
                let norm = 1.0 - b + b * self.lengths[d] as f64 / self.avgdl;
                *acc.entry(d).or_insert(0.0) += idf * f * (k1 + 1.0) / (f + k1 * norm);
            }
        }
        let mut out: Vec<(String, f64)> = acc
            .into_iter()
            .filter(|(_, s)| *s > 0.0)
            .map(|(d, s)| (self.ids[d].clone(), s))
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(out)
    }
}

impl Retriever for Bm25Index {
    fn name(&self) -> &str {
        "bm25"
    }

    fn search(&self, query: &str, k: usize) -> Result<Vec<String>> {
        Ok(self
            .scores(query)?
            .into_iter()
            .take(k)
            .map(|(id, _)| id)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct formula evaluation, one document at a time, no index.
    fn brute(docs: &[(String, String)], query: &str, k: usize) -> Vec<String> {
        let (k1, b) = (1.2, 0.75);
        let toks: Vec<Vec<String>> = docs.iter().map(|(_, t)| tokenize(t)).collect();
        let n = docs.len() as f64;
        let avgdl = toks.iter().map(Vec::len).sum::<usize>() as f64 / n;
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        let mut scored: Vec<(String, f64)> = Vec::new();
        for (i, (id, _)) in docs.iter().enumerate() {
            let mut s = 0.0;
            for t in &terms {
                let f = toks[i].iter().filter(|x| *x == t).count() as f64;
                if f == 0.0 {
                    continue;
                }
                let df = toks.iter().filter(|d| d.contains(t)).count() as f64;
                let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                s += idf * f * (k1 + 1.0) / (f + k1 * (1.0 - b + b * toks[i].len() as f64 / avgdl));
            }
            if s > 0.0 {
                scored.push((id.clone(), s));
            }
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.into_iter().take(k).map(|(id, _)| id).collect()
    }

    fn idx(docs: &[(&str, &str)]) -> Bm25Index {
        Bm25Index::build(docs.iter().copied(), Bm25Params::default()).unwrap()
    }

    #[test]
    fn worked_corpus() {
        let i = idx(&[
            ("d1", "apple banana"),
            ("d2", "apple apple"),
            ("d3", "cherry"),
        ]);
        assert_eq!(i.search("apple", 10).unwrap(), vec!["d2", "d1"]);
        assert_eq!(i.search("cherry", 10).unwrap(), vec!["d3"]);
        assert!(i.search("zzz", 10).unwrap().is_empty());
        assert!(i.search("!!!", 10).unwrap().is_empty());
    }

    #[test]
    fn idf_formula() {
        let i = idx(&[
            ("d1", "apple banana"),
            ("d2", "apple apple"),
            ("d3", "cherry"),
        ]);
        assert!((i.idf(2) - (1.5f64 / 2.5 + 1.0).ln()).abs() < 1e-15);
        let s = i.scores("apple").unwrap();
        let idf = (1.5f64 / 2.5 + 1.0).ln();
        // |d| = avgdl = 5/3 for neither; compute directly.
        let avg = 5.0 / 3.0;
        let d2 = idf * 2.0 * 2.2 / (2.0 + 1.2 * (0.25 + 0.75 * 2.0 / avg));
        assert!((s[0].1 - d2).abs() < 1e-12);
    }

    #[test]
    fn empty_index_and_bad_params() {
        let i = Bm25Index::build(std::iter::empty(), Bm25Params::default()).unwrap();
        assert!(matches!(i.search("a", 1), Err(Error::Retrieval(_))));
        assert!(Bm25Params { k1: 0.0, b: 0.5 }.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn index_matches_brute_force(
            docs in proptest::collection::vec(proptest::collection::vec(0u8..30, 0..12), 1..200),
            q in proptest::collection::vec(0u8..35, 1..5),
            k in 1usize..20,
        ) {
            let word = |w: &u8| format!("w{w}");
            let docs: Vec<(String, String)> = docs.iter().enumerate()
                .map(|(i, d)| (format!("d{i:03}"), d.iter().map(word).collect::<Vec<_>>().join(" ")))
                .collect();
            let query = q.iter().map(word).collect::<Vec<_>>().join(" ");
            let index = Bm25Index::build(docs.iter().map(|(a, b)| (a.as_str(), b.as_str())), Bm25Params::default()).unwrap();
            prop_assert_eq!(index.search(&query, k).unwrap(), brute(&docs, &query, k));
        }
    }
}
