use super::Retriever;
use crate::error::Result;
use crate::model::KnowledgeBase;
use crate::providers::EmbeddingProvider;
use crate::synthesis::EmbeddedKb;

/// Exact cosine top-K over an embedded knowledge base.
pub struct DenseRetriever<'a> {
    kb: EmbeddedKb,
    embedder: &'a dyn EmbeddingProvider,
}

impl<'a> DenseRetriever<'a> {
    pub fn build(kb: &KnowledgeBase, embedder: &'a dyn EmbeddingProvider) -> Result<Self> {
        Ok(Self {
            kb: EmbeddedKb::build(kb, embedder)?,
            embedder,
        })
    }
}

impl Retriever for DenseRetriever<'_> {
    fn name(&self) -> &str {
        "dense"
    }

    fn search(&self, query: &str, k: usize) -> Result<Vec<String>> {
        let q = self.embedder.embed(query)?;
        Ok(self
            .kb
            .top_k(&q, k)?
            .into_iter()
            .map(|s| s.id.clone())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{KnowledgeSnippet, SourceKind};
    use crate::providers::{cosine_similarity, MockEmbedder};
    use proptest::prelude::*;

    fn kb(texts: &[String]) -> KnowledgeBase {
        KnowledgeBase::new(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| KnowledgeSnippet {
                    id: format!("s{i:03}"),
                    content: t.clone(),
                    timestamp: None,
                    entities: Default::default(),
                    source_kind: SourceKind::Wiki,
                    game_id: "g".into(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_query_ranks_first() {
        let e = MockEmbedder::default();
        let texts = vec![
            "the crossbow is strong".to_string(),
            "volatiles roam at night".to_string(),
        ];
        let r = DenseRetriever::build(&kb(&texts), &e).unwrap();
        let got = r.search("volatiles roam at night", 10).unwrap();
        assert_eq!(got[0], "s001");
        assert_eq!(got.len(), 2);
        let sim = cosine_similarity(
            &e.embed("volatiles roam at night").unwrap(),
            &e.embed(&texts[1]).unwrap(),
        )
        .unwrap();
        assert!((sim - 1.0).abs() < 1e-12);
        assert_eq!(
            r.search("volatiles", 1).unwrap(),
            r.search("volatiles", 1).unwrap()
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn matches_brute_force(texts in proptest::collection::vec("[a-f]{1,3}( [a-f]{1,3}){0,5}", 1..60), q in "[a-f]{1,3}( [a-f]{1,3}){0,3}", k in 1usize..70) {
            let e = MockEmbedder::new(16).unwrap();
            let r = DenseRetriever::build(&kb(&texts), &e).unwrap();
            let qv = e.embed(&q).unwrap();
            let mut brute: Vec<(f64, String)> = texts.iter().enumerate()
                .map(|(i, t)| (cosine_similarity(&qv, &e.embed(t).unwrap()).unwrap(), format!("s{i:03}")))
                .collect();
            brute.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
            let want: Vec<String> = brute.into_iter().take(k).map(|(_, id)| id).collect();
            prop_assert_eq!(r.search(&q, k).unwrap(), want);
        }
    }
}
