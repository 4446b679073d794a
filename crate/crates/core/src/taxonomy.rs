//! The hierarchical topic taxonomy (6 main categories, 21 sub-categories) and
//! the `MAIN/SUB` topic identifier.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

const DEFAULT_TAXONOMY: &str = include_str!("../assets/taxonomy.json");

/// A leaf of the taxonomy, rendered as `MAIN/SUB`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TopicId {
    pub main: String,
    pub sub: String,
}

impl TopicId {
    pub fn new(main: impl Into<String>, sub: impl Into<String>) -> Self {
        Self {
            main: main.into(),
            sub: sub.into(),
        }
    }
}

impl fmt::Display for TopicId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.main, self.sub)
    }
}

impl FromStr for TopicId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (main, sub) = s
            .trim()
            .split_once('/')
            .ok_or_else(|| Error::Validation(format!("topic {s:?} is not of the form MAIN/SUB")))?;
        if main.is_empty() || sub.is_empty() || sub.contains('/') {
            return Err(Error::Validation(format!(
                "topic {s:?} is not of the form MAIN/SUB"
            )));
        }
        Ok(TopicId::new(main, sub))
    }
}

impl Serialize for TopicId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TopicId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubCategory {
    pub sub: String,
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainCategory {
    pub main: String,
    pub name: String,
    pub subs: Vec<SubCategory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub categories: Vec<MainCategory>,
}

impl Default for Taxonomy {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_TAXONOMY).expect("bundled taxonomy is valid JSON")
    }
}

impl Taxonomy {
    pub fn from_json(text: &str) -> Result<Self> {
        let t: Taxonomy = serde_json::from_str(text)?;
        t.check()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_json(&text)
    }

    /// The bundled taxonomy as JSON text.
    pub fn bundled_json() -> &'static str {
        DEFAULT_TAXONOMY
    }

    fn check(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for leaf in self.leaves() {
            if !seen.insert(leaf.clone()) {
                return Err(Error::Validation(format!("duplicate taxonomy leaf {leaf}")));
            }
        }
        if seen.is_empty() {
            return Err(Error::Validation("taxonomy has no leaves".into()));
        }
        Ok(())
    }

    pub fn leaves(&self) -> impl Iterator<Item = TopicId> + '_ {
        self.categories
            .iter()
            .flat_map(|c| c.subs.iter().map(move |s| TopicId::new(&c.main, &s.sub)))
    }

    pub fn contains(&self, topic: &TopicId) -> bool {
        self.sub_category(topic).is_some()
    }

    pub fn sub_category(&self, topic: &TopicId) -> Option<&SubCategory> {
        self.categories
            .iter()
            .find(|c| c.main == topic.main)?
            .subs
            .iter()
            .find(|s| s.sub == topic.sub)
    }

    /// "Main Name / Sub Name: description", used in prompts.
    pub fn describe(&self, topic: &TopicId) -> String {
        let main = self.categories.iter().find(|c| c.main == topic.main);
        match (main, self.sub_category(topic)) {
            (Some(m), Some(s)) => format!("{} / {}: {}", m.name, s.name, s.description),
            _ => topic.to_string(),
        }
    }

    /// One `MAIN/SUB - description` line per leaf.
    pub fn listing(&self) -> String {
        let mut lines = Vec::new();
        for c in &self.categories {
            for s in &c.subs {
                lines.push(format!("{}/{} - {}", c.main, s.sub, s.description));
            }
        }
        lines.join("\n")
    }

    pub fn validate(&self, topic: &TopicId) -> Result<()> {
        if self.contains(topic) {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "topic {topic} is not a taxonomy leaf"
            )))
        }
    }

    pub fn counts_by_main(&self) -> BTreeMap<&str, usize> {
        self.categories
            .iter()
            .map(|c| (c.main.as_str(), c.subs.len()))
            .collect()
    }
}
