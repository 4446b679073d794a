//! In-game entities: normalization, extraction (gazetteer or Self-ICL via a
//! completion provider) and an inverted index from entity to item ids used to
//! find the items an update touches.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::prompts;
use crate::providers::{complete_json, CompletionProvider, CompletionRequest};
use crate::util::{collapse_whitespace, render};

/// Normalized entity string: lowercase, trimmed, single-spaced.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct EntityId(String);

impl EntityId {
    pub fn new(raw: &str) -> Result<Self> {
        normalize_entity(raw)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for EntityId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        normalize_entity(&s)
    }
}

impl From<EntityId> for String {
    fn from(e: EntityId) -> String {
        e.0
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn normalize_entity(raw: &str) -> Result<EntityId> {
    let s = collapse_whitespace(&raw.to_lowercase());
    if s.is_empty() {
        return Err(Error::Validation(format!("blank entity {raw:?}")));
    }
    Ok(EntityId(s))
}

/// Gazetteer of known entity names.
#[derive(Debug, Clone, Default)]
pub struct Gazetteer {
    terms: BTreeSet<EntityId>,
}

impl Gazetteer {
    pub fn from_terms<I, S>(terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let terms = terms
            .into_iter()
            .filter(|t| !t.as_ref().trim().is_empty())
            .map(|t| normalize_entity(t.as_ref()))
            .collect::<Result<_>>()?;
        Ok(Self { terms })
    }

    /// One entity per line, UTF-8; blank lines are skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_terms(text.lines())
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Terms occurring in `text` as whole words (case-insensitive).
    pub fn find(&self, text: &str) -> BTreeSet<EntityId> {
        let hay = collapse_whitespace(&text.to_lowercase());
        self.terms
            .iter()
            .filter(|t| contains_whole_word(&hay, t.as_str()))
            .cloned()
            .collect()
    }
}

fn contains_whole_word(hay: &str, needle: &str) -> bool {
    let mut from = 0;
    while let Some(pos) = hay[from..].find(needle) {
        let start = from + pos;
        let end = start + needle.len();
        let before_ok = hay[..start]
            .chars()
            .next_back()
            .is_none_or(|c| !c.is_alphanumeric());
        let after_ok = hay[end..]
            .chars()
            .next()
            .is_none_or(|c| !c.is_alphanumeric());
        if before_ok && after_ok {
            return true;
        }
        from = start + hay[start..].chars().next().map_or(1, char::len_utf8);
    }
    false
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    LlmSelfIcl,
    Dictionary,
}

impl FromStr for ExtractorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "llm_self_icl" | "self-icl" | "self_icl" | "llm" => Ok(Self::LlmSelfIcl),
            "dictionary" | "gazetteer" => Ok(Self::Dictionary),
            other => Err(Error::Config(format!("unknown entity extractor {other:?}"))),
        }
    }
}

/// Three-stage Self-ICL NER: generate pseudo-inputs, label them zero-shot,
/// then annotate the real text with the pairs as demonstrations.
pub struct SelfIclExtractor {
    provider: Arc<dyn CompletionProvider>,
    pub num_pseudo: usize,
    pub entity_desc: String,
    pub json_attempts: u32,
}

impl SelfIclExtractor {
    pub fn new(provider: Arc<dyn CompletionProvider>) -> Self {
        Self {
            provider,
            num_pseudo: 3,
            entity_desc: prompts::ENTITY_TYPES.trim().to_string(),
            json_attempts: 2,
        }
    }

    fn ask(&self, task: &str, user: String) -> Result<Value> {
        let req = CompletionRequest::new(prompts::system(task, ""), user).json();
        complete_json(self.provider.as_ref(), &req, self.json_attempts).map_err(|e| match e {
            Error::MalformedJson { message, .. } => {
                Error::Extraction(format!("{task}: malformed JSON after retries: {message}"))
            }
            other => other,
        })
    }

    fn entity_texts(v: &Value) -> Result<Vec<String>> {
        let arr = v
            .get("entities")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Extraction("response has no \"entities\" array".into()))?;
        Ok(arr
            .iter()
            .filter_map(|e| e.get("text").and_then(Value::as_str))
            .map(str::to_owned)
            .collect())
    }

    pub fn extract(&self, text: &str) -> Result<BTreeSet<EntityId>> {
        let n = self.num_pseudo.to_string();
        let v = self.ask(
            prompts::TASK_NER_PSEUDO_INPUTS,
            render(
                prompts::NER_PSEUDO_INPUTS,
                &[("Num_Pseudo_Examples", &n), ("Question", text)],
            ),
        )?;
        let pseudo: Vec<String> = v
            .get("pseudo_inputs")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Extraction("response has no \"pseudo_inputs\" array".into()))?
            .iter()
            .filter_map(Value::as_str)
            .map(str::to_owned)
            .collect();

        let mut demos = Vec::with_capacity(pseudo.len());
        for p in &pseudo {
            let labels = self.ask(
                prompts::TASK_NER_PSEUDO_LABELS,
                render(
                    prompts::NER_PSEUDO_LABELS,
                    &[("Entity_Desc", &self.entity_desc), ("Pseudo_Text", p)],
                ),
            )?;
            demos.push(format!("Input: {p}\nOutput: {labels}"));
        }
        let demos = demos.join("\n\n");

        let v = self.ask(
            prompts::TASK_NER,
            render(
                prompts::NER_ICL,
                &[
                    ("Entity_Desc", &self.entity_desc),
                    ("Demonstrations_Text", &demos),
                    ("Question", text),
                ],
            ),
        )?;
        Self::entity_texts(&v)?
            .iter()
            .filter(|t| !t.trim().is_empty())
            .map(|t| normalize_entity(t))
            .collect()
    }
}

pub enum Extractor {
    Dictionary(Gazetteer),
    SelfIcl(SelfIclExtractor),
}

impl Extractor {
    pub fn kind(&self) -> ExtractorKind {
        match self {
            Extractor::Dictionary(_) => ExtractorKind::Dictionary,
            Extractor::SelfIcl(_) => ExtractorKind::LlmSelfIcl,
        }
    }
}

/// The NER function applied to snippets and announcements alike.
pub fn extract_entities(text: &str, extractor: &Extractor) -> Result<BTreeSet<EntityId>> {
    match extractor {
        Extractor::Dictionary(g) => Ok(g.find(text)),
        Extractor::SelfIcl(x) => x.extract(text),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    Snippet,
    Tuple,
}

/// Inverted index entity -> item ids, with the forward map kept alongside.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityIndex {
    pub kind: ItemKind,
    by_entity: BTreeMap<EntityId, BTreeSet<String>>,
    by_item: BTreeMap<String, BTreeSet<EntityId>>,
}

impl EntityIndex {
    pub fn entity_count(&self) -> usize {
        self.by_entity.len()
    }

    pub fn item_count(&self) -> usize {
        self.by_item.len()
    }

    pub fn items_for(&self, entity: &EntityId) -> Option<&BTreeSet<String>> {
        self.by_entity.get(entity)
    }

    pub fn entities_of(&self, item: &str) -> Option<&BTreeSet<EntityId>> {
        self.by_item.get(item)
    }

    /// Items whose entity set intersects `update`.
    pub fn lookup_affected(&self, update: &BTreeSet<EntityId>) -> BTreeSet<String> {
        update
            .iter()
            .filter_map(|e| self.by_entity.get(e))
            .flatten()
            .cloned()
            .collect()
    }
}

pub fn build_index<I>(items: I, kind: ItemKind) -> Result<EntityIndex>
where
    I: IntoIterator<Item = (String, BTreeSet<EntityId>)>,
{
    let mut by_entity: BTreeMap<EntityId, BTreeSet<String>> = BTreeMap::new();
    let mut by_item = BTreeMap::new();
    for (id, ents) in items {
        for e in &ents {
            by_entity.entry(e.clone()).or_default().insert(id.clone());
        }
        if by_item.insert(id.clone(), ents).is_some() {
            return Err(Error::Validation(format!("duplicate item id {id}")));
        }
    }
    Ok(EntityIndex {
        kind,
        by_entity,
        by_item,
    })
}

pub fn lookup_affected(index: &EntityIndex, update: &BTreeSet<EntityId>) -> BTreeSet<String> {
    index.lookup_affected(update)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::mock::mock_entities;
    use crate::providers::{MockCompletion, ScriptedCompletion};

    fn set(items: &[&str]) -> BTreeSet<EntityId> {
        items.iter().map(|s| EntityId::new(s).unwrap()).collect()
    }

    #[test]
    fn normalization() {
        assert_eq!(
            normalize_entity("  Harran   City ").unwrap().as_str(),
            "harran city"
        );
        assert_eq!(normalize_entity("RTX 4070").unwrap().as_str(), "rtx 4070");
        assert!(matches!(normalize_entity("   "), Err(Error::Validation(_))));
    }

    #[test]
    fn deserializing_normalizes() {
        let e: EntityId = serde_json::from_str("\"  Night\\tRunner \"").unwrap();
        assert_eq!(e.as_str(), "night runner");
        assert!(serde_json::from_str::<EntityId>("\" \"").is_err());
    }

    #[test]
    fn dictionary_whole_word() {
        let g = Gazetteer::from_terms(["night runner"]).unwrap();
        let ex = Extractor::Dictionary(g);
        assert_eq!(
            extract_entities("The Night Runner outfit", &ex).unwrap(),
            set(&["night runner"])
        );
        let g = Gazetteer::from_terms(["volatile"]).unwrap();
        let ex = Extractor::Dictionary(g);
        assert!(extract_entities("volatiles spawn", &ex).unwrap().is_empty());
        assert_eq!(
            extract_entities("a volatile, spawns", &ex).unwrap(),
            set(&["volatile"])
        );
    }

    #[test]
    fn unknown_extractor_is_config_error() {
        assert!(matches!(
            "regex".parse::<ExtractorKind>(),
            Err(Error::Config(_))
        ));
        assert_eq!(
            "dictionary".parse::<ExtractorKind>().unwrap(),
            ExtractorKind::Dictionary
        );
    }

    #[test]
    fn self_icl_issues_three_stages_in_order() {
        let scripted = Arc::new(ScriptedCompletion::new(Arc::new(MockCompletion::default())));
        let x = SelfIclExtractor::new(scripted.clone());
        let text = "Equipping the Paraglider near Villedor Bridge";
        let got = x.extract(text).unwrap();
        // Oracle: the mock rule table applied to the real text in the final stage.
        let expected: BTreeSet<EntityId> = mock_entities(text)
            .iter()
            .map(|e| EntityId::new(e).unwrap())
            .collect();
        assert_eq!(got, expected);
        assert!(got.contains(&EntityId::new("villedor bridge").unwrap()));

        let tasks: Vec<String> = scripted
            .requests()
            .iter()
            .map(|r| r.task().unwrap().to_string())
            .collect();
        assert_eq!(tasks.len(), 1 + 3 + 1);
        assert_eq!(tasks[0], prompts::TASK_NER_PSEUDO_INPUTS);
        assert!(tasks[1..4]
            .iter()
            .all(|t| t == prompts::TASK_NER_PSEUDO_LABELS));
        assert_eq!(tasks[4], prompts::TASK_NER);
        let last = &scripted.requests()[4];
        assert!(last.user_prompt.contains("Here are some examples: Input: "));
    }

    #[test]
    fn self_icl_malformed_json_is_extraction_error() {
        let scripted = Arc::new(ScriptedCompletion::new(Arc::new(MockCompletion::default())));
        scripted
            .push(prompts::TASK_NER_PSEUDO_INPUTS, "garbage")
            .push(prompts::TASK_NER_PSEUDO_INPUTS, "still garbage");
        let x = SelfIclExtractor::new(scripted);
        assert!(matches!(x.extract("Harran"), Err(Error::Extraction(_))));
    }

    #[test]
    fn index_and_lookup() {
        let idx = build_index(
            vec![
                ("t1".to_string(), set(&["a"])),
                ("t2".to_string(), set(&["a", "b"])),
            ],
            ItemKind::Tuple,
        )
        .unwrap();
        assert_eq!(
            idx.items_for(&EntityId::new("a").unwrap()).unwrap().len(),
            2
        );
        assert_eq!(
            idx.items_for(&EntityId::new("b").unwrap()).unwrap().len(),
            1
        );
        assert_eq!(
            idx.lookup_affected(&set(&["b", "z"])),
            ["t2".to_string()].into_iter().collect()
        );
        assert!(idx.lookup_affected(&set(&["z"])).is_empty());
        assert!(idx.lookup_affected(&BTreeSet::new()).is_empty());

        let empty = build_index(Vec::new(), ItemKind::Snippet).unwrap();
        assert_eq!(empty.entity_count(), 0);

        let dup = build_index(
            vec![
                ("t1".to_string(), set(&["a"])),
                ("t1".to_string(), set(&["b"])),
            ],
            ItemKind::Tuple,
        );
        assert!(dup.is_err());
    }
}
