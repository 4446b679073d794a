//! Benchmark data model: knowledge snippets, evaluation tuples, slices, and
//! the rules deriving a tuple's timestamp and entity set from its references.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::entity::EntityId;
use crate::error::{Error, Result};
use crate::taxonomy::Taxonomy;
use crate::util::sha256_hex;

pub use crate::taxonomy::TopicId;

/// UTC seconds.
pub type Timestamp = i64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Wiki,
    OfficialUpdate,
}

/// One retrievable unit of the authority corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeSnippet {
    pub id: String,
    pub content: String,
    pub timestamp: Option<Timestamp>,
    pub entities: BTreeSet<EntityId>,
    pub source_kind: SourceKind,
    pub game_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Synthesized,
    Inherited,
    KnowledgeUpdate,
    InterestUpdate,
}

/// Question type label, drawn from the configured set.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuestionType(pub String);

impl QuestionType {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn defaults() -> Vec<QuestionType> {
        [
            "extractive",
            "multi_hop",
            "comparative",
            "summarization",
            "long_dependency",
        ]
        .into_iter()
        .map(QuestionType::new)
        .collect()
    }

    pub fn description(&self) -> &'static str {
        match self.0.as_str() {
            "extractive" => "the answer is a fact stated directly in one document segment",
            "multi_hop" => {
                "answering requires combining at least two separate pieces of information"
            }
            "comparative" => "the question compares two or more entities, options or versions",
            "summarization" => "the answer condenses several statements into a short summary",
            "long_dependency" => "the answer depends on information spread across a long passage",
            _ => "a question of the configured type",
        }
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One benchmark item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalTuple {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub ref_ids: Vec<String>,
    pub topic: TopicId,
    pub timestamp: Option<Timestamp>,
    pub entities: BTreeSet<EntityId>,
    pub question_type: QuestionType,
    pub persona_id: Option<String>,
    pub origin: Origin,
}

impl EvalTuple {
    /// Content id over (question, answer, sorted ref ids).
    pub fn content_id(question: &str, answer: &str, ref_ids: &[String]) -> String {
        let mut sorted: Vec<&str> = ref_ids.iter().map(String::as_str).collect();
        sorted.sort_unstable();
        let refs = sorted.join("\u{1e}");
        let digest = sha256_hex(&[question, answer, &refs]);
        format!("t-{}", &digest[..16])
    }

    /// Build a tuple whose id, timestamp and entities are derived from `refs`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_refs(
        question: String,
        answer: String,
        refs: &[&KnowledgeSnippet],
        topic: TopicId,
        question_type: QuestionType,
        persona_id: Option<String>,
        origin: Origin,
    ) -> Result<Self> {
        let timestamp = derive_tuple_timestamp(refs)?;
        let entities = derive_tuple_entities(refs)?;
        let ref_ids: Vec<String> = refs.iter().map(|s| s.id.clone()).collect();
        Ok(EvalTuple {
            id: Self::content_id(&question, &answer, &ref_ids),
            question,
            answer,
            ref_ids,
            topic,
            timestamp,
            entities,
            question_type,
            persona_id,
            origin,
        })
    }
}

/// Latest timestamp among `refs`; `None` when no snippet carries one.
pub fn derive_tuple_timestamp(refs: &[&KnowledgeSnippet]) -> Result<Option<Timestamp>> {
    if refs.is_empty() {
        return Err(Error::Precondition("reference list is empty".into()));
    }
    Ok(refs.iter().filter_map(|s| s.timestamp).max())
}

/// Union of the references' entity sets.
pub fn derive_tuple_entities(refs: &[&KnowledgeSnippet]) -> Result<BTreeSet<EntityId>> {
    if refs.is_empty() {
        return Err(Error::Precondition("reference list is empty".into()));
    }
    Ok(refs
        .iter()
        .flat_map(|s| s.entities.iter().cloned())
        .collect())
}

/// Ordering key used for oldest-first eviction: absent timestamps sort first,
/// then by timestamp, then by id.
pub fn age_key(t: &EvalTuple) -> (Option<Timestamp>, &str) {
    (t.timestamp, t.id.as_str())
}

/// A content-addressed knowledge-base version.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    version: String,
    snippets: Vec<KnowledgeSnippet>,
    by_id: HashMap<String, usize>,
}

impl KnowledgeBase {
    pub fn new(snippets: Vec<KnowledgeSnippet>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(snippets.len());
        for (i, s) in snippets.iter().enumerate() {
            if by_id.insert(s.id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate snippet id {}", s.id)));
            }
        }
        let version = Self::compute_version(&snippets);
        Ok(Self {
            version,
            snippets,
            by_id,
        })
    }

    fn compute_version(snippets: &[KnowledgeSnippet]) -> String {
        let lines: Vec<String> = snippets
            .iter()
            .map(|s| serde_json::to_string(s).expect("snippet serializes"))
            .collect();
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        format!("kb-{}", &sha256_hex(&refs)[..16])
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn snippets(&self) -> &[KnowledgeSnippet] {
        &self.snippets
    }

    pub fn len(&self) -> usize {
        self.snippets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snippets.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&KnowledgeSnippet> {
        self.by_id.get(id).map(|&i| &self.snippets[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    /// `K ∪ A`: appends snippets not already present. A new snippet whose id
    /// exists with different content is rejected.
    pub fn union(&self, added: &[KnowledgeSnippet]) -> Result<KnowledgeBase> {
        let mut snippets = self.snippets.clone();
        let mut seen: HashSet<&str> = HashSet::new();
        for s in added {
            match self.get(&s.id) {
                Some(existing) if existing == s => continue,
                Some(_) => {
                    return Err(Error::Validation(format!(
                        "snippet id {} already exists with different content",
                        s.id
                    )))
                }
                None => {
                    if seen.insert(s.id.as_str()) {
                        snippets.push(s.clone());
                    }
                }
            }
        }
        KnowledgeBase::new(snippets)
    }
}

/// `(K_t, D_t)` at lifecycle index `t`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkSlice {
    pub index: u32,
    pub kb_version: String,
    pub tuples: Vec<EvalTuple>,
    pub phase_start: Timestamp,
    pub phase_end: Option<Timestamp>,
    pub parent_index: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    UnresolvedRef,
    EmptyRefs,
    TimestampMismatch,
    EntityMismatch,
    DuplicateId,
    UnknownTopic,
    IndexGap,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rule::UnresolvedRef => "unresolved ref",
            Rule::EmptyRefs => "empty refs",
            Rule::TimestampMismatch => "timestamp mismatch",
            Rule::EntityMismatch => "entity mismatch",
            Rule::DuplicateId => "duplicate id",
            Rule::UnknownTopic => "unknown topic",
            Rule::IndexGap => "index gap",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub tuple_id: String,
    pub rule: Rule,
    pub detail: String,
}

/// Check every tuple invariant of `slice` against `kb`. An empty report means
/// the slice is valid.
pub fn validate_slice(slice: &BenchmarkSlice, kb: &KnowledgeBase) -> Result<Vec<Violation>> {
    if slice.kb_version != kb.version() {
        return Err(Error::Lookup(format!(
            "slice {} references kb version {}, got {}",
            slice.index,
            slice.kb_version,
            kb.version()
        )));
    }
    let mut report = Vec::new();
    if let Some(parent) = slice.parent_index {
        if slice.index != parent + 1 {
            report.push(Violation {
                tuple_id: String::new(),
                rule: Rule::IndexGap,
                detail: format!("index {} does not follow parent {}", slice.index, parent),
            });
        }
    }
    let mut ids = HashSet::new();
    for t in &slice.tuples {
        if !ids.insert(t.id.as_str()) {
            report.push(Violation {
                tuple_id: t.id.clone(),
                rule: Rule::DuplicateId,
                detail: "tuple id occurs more than once".into(),
            });
        }
        if t.ref_ids.is_empty() {
            report.push(Violation {
                tuple_id: t.id.clone(),
                rule: Rule::EmptyRefs,
                detail: "tuple has no references".into(),
            });
            continue;
        }
        let mut refs = Vec::with_capacity(t.ref_ids.len());
        for r in &t.ref_ids {
            match kb.get(r) {
                Some(s) => refs.push(s),
                None => report.push(Violation {
                    tuple_id: t.id.clone(),
                    rule: Rule::UnresolvedRef,
                    detail: format!("snippet {r} not in {}", kb.version()),
                }),
            }
        }
        if refs.len() != t.ref_ids.len() {
            continue;
        }
        let ts = derive_tuple_timestamp(&refs)?;
        if ts != t.timestamp {
            report.push(Violation {
                tuple_id: t.id.clone(),
                rule: Rule::TimestampMismatch,
                detail: format!("stored {:?}, derived {:?}", t.timestamp, ts),
            });
        }
        let ents = derive_tuple_entities(&refs)?;
        if ents != t.entities {
            report.push(Violation {
                tuple_id: t.id.clone(),
                rule: Rule::EntityMismatch,
                detail: "stored entities differ from the union over references".into(),
            });
        }
    }
    Ok(report)
}

/// Topic-leaf check, kept apart from [`validate_slice`] because it needs the
/// taxonomy rather than the knowledge base.
pub fn validate_topics(slice: &BenchmarkSlice, taxonomy: &Taxonomy) -> Vec<Violation> {
    slice
        .tuples
        .iter()
        .filter(|t| !taxonomy.contains(&t.topic))
        .map(|t| Violation {
            tuple_id: t.id.clone(),
            rule: Rule::UnknownTopic,
            detail: format!("{} is not a taxonomy leaf", t.topic),
        })
        .collect()
}
