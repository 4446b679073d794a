//! Community mining: topic classification of player posts, question template
//! and persona extraction, and greedy semantic deduplication.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::Timestamp;
use crate::prompts;
use crate::providers::{
    complete_json, cosine_similarity, CompletionProvider, CompletionRequest, EmbeddingProvider,
};
use crate::taxonomy::{Taxonomy, TopicId};
use crate::util::{read_json, render, sha256_hex};

pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.7;
pub const DEFAULT_PERSONA_FLOOR: f64 = 0.5;
pub const MAX_TEMPLATES_PER_POST: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommunityPost {
    pub post_id: String,
    pub text: String,
    pub created_at: Timestamp,
    pub game_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<TopicId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionTemplate {
    pub template_id: String,
    pub template: String,
    pub placeholders: Vec<String>,
    pub topic: TopicId,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Persona {
    pub persona_id: String,
    pub description: String,
    pub confidence: f64,
}

fn placeholder_re() -> Regex {
    Regex::new(r"\[([A-Za-z_][A-Za-z0-9_]*)\]").expect("static regex")
}

/// Distinct `[NAME]` placeholders in order of first occurrence.
pub fn placeholders_in(template: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    placeholder_re()
        .captures_iter(template)
        .filter_map(|c| {
            let name = c[1].to_string();
            seen.insert(name.clone()).then_some(name)
        })
        .collect()
}

impl QuestionTemplate {
    pub fn new(
        template: String,
        placeholders: Vec<String>,
        topic: TopicId,
        description: String,
    ) -> Result<Self> {
        let t = Self {
            template_id: format!(
                "tpl-{}",
                &sha256_hex(&[&topic.to_string(), &template])[..12]
            ),
            template,
            placeholders,
            topic,
            description,
        };
        t.check_placeholders()?;
        Ok(t)
    }

    /// Every `[NAME]` in the text is declared and every declared name occurs.
    pub fn check_placeholders(&self) -> Result<()> {
        let found: BTreeSet<String> = placeholders_in(&self.template).into_iter().collect();
        let declared: BTreeSet<String> = self.placeholders.iter().cloned().collect();
        if found != declared {
            let missing: Vec<_> = declared.difference(&found).collect();
            let undeclared: Vec<_> = found.difference(&declared).collect();
            return Err(Error::Extraction(format!(
                "placeholder mismatch in {:?}: declared but absent {missing:?}, present but undeclared {undeclared:?}",
                self.template
            )));
        }
        Ok(())
    }
}

fn json_request(task: &str, user: String) -> CompletionRequest {
    CompletionRequest::new(prompts::system(task, ""), user).json()
}

fn as_extraction(e: Error) -> Error {
    match e {
        Error::MalformedJson { message, raw } => {
            Error::Extraction(format!("malformed JSON ({message}): {raw}"))
        }
        other => other,
    }
}

/// Ask for a leaf topic; an invalid answer is retried once.
pub fn classify_topic(
    post: &CommunityPost,
    taxonomy: &Taxonomy,
    provider: &dyn CompletionProvider,
) -> Result<TopicId> {
    let user = render(
        prompts::CLASSIFY,
        &[
            ("Taxonomy", &taxonomy.listing()),
            ("Question_Content", &post.text),
        ],
    );
    let req = json_request(prompts::TASK_CLASSIFY, user);
    let mut last = String::new();
    for _ in 0..2 {
        let outcome = match complete_json(provider, &req, 1) {
            Ok(v) => match v
                .get("topic")
                .and_then(Value::as_str)
                .map(str::parse::<TopicId>)
            {
                Some(Ok(t)) if taxonomy.contains(&t) => return Ok(t),
                Some(Ok(t)) => format!("topic {t} is not in the taxonomy"),
                Some(Err(e)) => e.to_string(),
                None => "no \"topic\" field".to_string(),
            },
            Err(e @ Error::MalformedJson { .. }) => e.to_string(),
            Err(e) => return Err(e),
        };
        last = outcome;
    }
    Err(Error::Classification {
        post_id: post.post_id.clone(),
        message: last,
    })
}

/// 1 to 3 templates tagged with the post's topic.
pub fn extract_templates(
    post: &CommunityPost,
    provider: &dyn CompletionProvider,
) -> Result<Vec<QuestionTemplate>> {
    let topic = post
        .topic
        .clone()
        .ok_or_else(|| Error::Precondition(format!("post {} has no topic", post.post_id)))?;
    let topic_s = topic.to_string();
    let user = render(
        prompts::TEMPLATES,
        &[
            ("Question_Content", &post.text),
            ("Question_Topic", &topic_s),
        ],
    );
    let v = complete_json(provider, &json_request(prompts::TASK_TEMPLATE, user), 1)
        .map_err(as_extraction)?;
    let items = v
        .get("templates")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Extraction("response has no \"templates\" array".into()))?;
    if items.is_empty() {
        return Err(Error::Extraction(format!(
            "no templates for post {}",
            post.post_id
        )));
    }
    items
        .iter()
        .take(MAX_TEMPLATES_PER_POST)
        .map(|it| {
            let template = it.get("template").and_then(Value::as_str).ok_or_else(|| {
                Error::Extraction("template item without \"template\" text".into())
            })?;
            let placeholders = match it.get("placeholders") {
                None | Some(Value::Null) => Vec::new(),
                Some(Value::Array(a)) => a
                    .iter()
                    .map(|p| {
                        p.as_str()
                            .map(|s| s.trim_matches(|c| c == '[' || c == ']').to_string())
                            .ok_or_else(|| Error::Extraction("placeholder is not a string".into()))
                    })
                    .collect::<Result<_>>()?,
                Some(_) => return Err(Error::Extraction("\"placeholders\" is not a list".into())),
            };
            let description = it
                .get("description")
                .and_then(Value::as_str)
                .unwrap_or_default();
            QuestionTemplate::new(
                template.to_string(),
                placeholders,
                topic.clone(),
                description.to_string(),
            )
        })
        .collect()
}

/// A persona when the model finds one with confidence at or above `floor`.
pub fn extract_persona(
    post: &CommunityPost,
    provider: &dyn CompletionProvider,
    floor: f64,
) -> Result<Option<Persona>> {
    let user = render(prompts::PERSONA, &[("Question_Content", &post.text)]);
    let v = complete_json(provider, &json_request(prompts::TASK_PERSONA, user), 1)
        .map_err(as_extraction)?;
    let confidence = match v.get("confidence_score") {
        Some(c) => c
            .as_f64()
            .ok_or_else(|| Error::Extraction("\"confidence_score\" is not a number".into()))?,
        None => 0.0,
    };
    let description = match v.get("player_description") {
        None | Some(Value::Null) => return Ok(None),
        Some(Value::String(s)) if s.trim().is_empty() => return Ok(None),
        Some(Value::String(s)) => s.trim().to_string(),
        Some(_) => {
            return Err(Error::Extraction(
                "\"player_description\" is not a string".into(),
            ))
        }
    };
    if !(0.0..=1.0).contains(&confidence) {
        return Err(Error::Extraction(format!(
            "confidence {confidence} outside [0, 1]"
        )));
    }
    if confidence < floor {
        return Ok(None);
    }
    Ok(Some(Persona {
        persona_id: format!("per-{}", &sha256_hex(&[&description])[..12]),
        description,
        confidence,
    }))
}

/// Greedy scan in input order: drop an item whose cosine similarity to any
/// retained item is strictly above `threshold`.
pub fn dedup(
    items: &[(String, String)],
    threshold: f64,
    embedder: &dyn EmbeddingProvider,
) -> Result<Vec<String>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!(
            "dedup threshold {threshold} outside (0, 1]"
        )));
    }
    let vecs = items
        .par_iter()
        .map(|(_, text)| embedder.embed(text))
        .collect::<Result<Vec<_>>>()?;
    let mut kept: Vec<usize> = Vec::new();
    for (i, v) in vecs.iter().enumerate() {
        let mut dup = false;
        for &k in &kept {
            if cosine_similarity(v, &vecs[k])? > threshold {
                dup = true;
                break;
            }
        }
        if !dup {
            kept.push(i);
        }
    }
    Ok(kept.into_iter().map(|i| items[i].0.clone()).collect())
}

/// Expert review outcome: an optional allow list and a deny list of ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewList {
    #[serde(default)]
    pub allow: Option<BTreeSet<String>>,
    #[serde(default)]
    pub deny: BTreeSet<String>,
}

impl ReviewList {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn admits(&self, id: &str) -> bool {
        !self.deny.contains(id) && self.allow.as_ref().is_none_or(|a| a.contains(id))
    }
}

#[derive(Debug, Clone)]
pub struct MiningConfig {
    pub dedup_threshold: f64,
    pub persona_floor: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            dedup_threshold: DEFAULT_DEDUP_THRESHOLD,
            persona_floor: DEFAULT_PERSONA_FLOOR,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct MinedAssets {
    /// Every input post, sorted and topic-tagged.
    pub posts: Vec<CommunityPost>,
    pub templates: Vec<QuestionTemplate>,
    pub personas: Vec<Persona>,
}

/// Posts in dedup order: `created_at`, then `post_id`.
pub fn sort_posts(posts: &mut [CommunityPost]) {
    posts.sort_by(|a, b| (a.created_at, &a.post_id).cmp(&(b.created_at, &b.post_id)));
}

/// Classify every post, then mine templates and personas from the posts that
/// survive deduplication, deduplicate both bases and apply the review list.
pub fn mine(
    posts: &[CommunityPost],
    taxonomy: &Taxonomy,
    provider: &dyn CompletionProvider,
    embedder: &dyn EmbeddingProvider,
    config: &MiningConfig,
    review: &ReviewList,
) -> Result<MinedAssets> {
    if !(0.0..=1.0).contains(&config.persona_floor) {
        return Err(Error::Config(format!(
            "persona floor {} outside [0, 1]",
            config.persona_floor
        )));
    }
    let mut posts = posts.to_vec();
    sort_posts(&mut posts);
    let mut ids = BTreeSet::new();
    for p in &posts {
        if p.text.trim().is_empty() {
            return Err(Error::Validation(format!(
                "post {} has empty text",
                p.post_id
            )));
        }
        if !ids.insert(p.post_id.as_str()) {
            return Err(Error::Validation(format!(
                "duplicate post id {}",
                p.post_id
            )));
        }
    }
    let topics = posts
        .par_iter()
        .map(|p| match &p.topic {
            Some(t) if taxonomy.contains(t) => Ok(t.clone()),
            _ => classify_topic(p, taxonomy, provider),
        })
        .collect::<Result<Vec<_>>>()?;
    for (p, t) in posts.iter_mut().zip(topics) {
        p.topic = Some(t);
    }

    let texts: Vec<(String, String)> = posts
        .iter()
        .map(|p| (p.post_id.clone(), p.text.clone()))
        .collect();
    let retained: BTreeSet<String> = dedup(&texts, config.dedup_threshold, embedder)?
        .into_iter()
        .collect();
    let unique: Vec<&CommunityPost> = posts
        .iter()
        .filter(|p| retained.contains(&p.post_id))
        .collect();

    let per_post = unique
        .par_iter()
        .map(|p| {
            Ok((
                extract_templates(p, provider)?,
                extract_persona(p, provider, config.persona_floor)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut templates = Vec::new();
    let mut personas = Vec::new();
    for (ts, pe) in per_post {
        templates.extend(ts);
        personas.extend(pe);
    }

    let tpl_items: Vec<(String, String)> = templates
        .iter()
        .enumerate()
        .map(|(i, t)| (i.to_string(), t.template.clone()))
        .collect();
    let keep: BTreeSet<usize> = dedup(&tpl_items, config.dedup_threshold, embedder)?
        .iter()
        .map(|s| s.parse().expect("index id"))
        .collect();
    let mut seen = BTreeSet::new();
    let templates: Vec<QuestionTemplate> = templates
        .into_iter()
        .enumerate()
        .filter(|(i, t)| {
            keep.contains(i) && review.admits(&t.template_id) && seen.insert(t.template_id.clone())
        })
        .map(|(_, t)| t)
        .collect();

    let per_items: Vec<(String, String)> = personas
        .iter()
        .enumerate()
        .map(|(i, p)| (i.to_string(), p.description.clone()))
        .collect();
    let keep: BTreeSet<usize> = dedup(&per_items, config.dedup_threshold, embedder)?
        .iter()
        .map(|s| s.parse().expect("index id"))
        .collect();
    let mut seen = BTreeSet::new();
    let personas: Vec<Persona> = personas
        .into_iter()
        .enumerate()
        .filter(|(i, p)| {
            keep.contains(i) && review.admits(&p.persona_id) && seen.insert(p.persona_id.clone())
        })
        .map(|(_, p)| p)
        .collect();

    Ok(MinedAssets {
        posts,
        templates,
        personas,
    })
}
