//! Deterministic offline backends.
//!
//! [`MockCompletion`] answers from a rule table keyed by the `TASK:` marker in
//! the system prompt. Its output is a pure function of
//! `(system_prompt, user_prompt, seed)`. The rules:
//!
//! | task | output |
//! |------|--------|
//! | `NER_PSEUDO_INPUTS` | `{"pseudo_inputs": [..]}`: the original text with each detected entity swapped for a fixture word, N times |
//! | `NER_PSEUDO_LABELS`, `NER` | `{"entities": [..]}` from [`mock_entities`] over the text |
//! | `CLASSIFY` | `{"topic": ..}` from a keyword table, falling back to `GAME_CONTENT/GAMEPLAY_MECHANICS` |
//! | `TEMPLATE` | two templates: the question with entities replaced by `[ENTITY_n]`, and a `Quick question:` variant |
//! | `PERSONA` | a persona when the question is first-person with at least 6 tokens, else `null` / 0.0 |
//! | `HYPO_QA` | the template filled by [`fill_placeholders`], plus a canned answer |
//! | `SYNTH` | one item: filled template, first sentence of the first document, every document quoted whole |
//! | `QC` | 0 for questions opening with a yes/no auxiliary, else 2 |
//! | `JUDGE` | 0 for an empty predicted answer, else 2 |
//! | `GENERATE` | first sentence of the first retrieved context |
//!
//! [`MockEmbedder`] is a hashed bag of tokens: lowercase, split on
//! non-alphanumerics, FNV-1a 64 of each token modulo the dimension gets +1,
//! then L2 normalization. The all-zero vector maps to the basis vector e0.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use regex::Regex;
use serde_json::{json, Value};

use super::{CompletionProvider, CompletionRequest, Embedding, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::prompts;
use crate::taxonomy::{Taxonomy, TopicId};
use crate::util::{between, collapse_whitespace, fnv1a64, sha256_u64, tokenize};

/// Fixture vocabulary used to fill placeholders.
pub const FIXTURE_WORDS: [&str; 64] = [
    "Harran",
    "Villedor",
    "Arrakis",
    "Erangel",
    "Miramar",
    "Sanhok",
    "Vikendi",
    "Livik",
    "Crossbow",
    "Paraglider",
    "Grappling Hook",
    "Stillsuit",
    "Ornithopter",
    "Sandbike",
    "Kar98k",
    "AKM",
    "Night Runner",
    "Peacekeeper",
    "Survivor",
    "Fremen",
    "Harkonnen",
    "Atreides",
    "Smuggler",
    "Scavenger",
    "Steam",
    "Xbox",
    "PlayStation",
    "Epic",
    "Switch",
    "Android",
    "iOS",
    "Steam Deck",
    "Season 1",
    "Season 2",
    "Patch 1.5",
    "Update 3.2",
    "Version 2.0",
    "Hotfix 7",
    "Chapter 4",
    "Episode 9",
    "Bloody Ties",
    "Deep Desert",
    "Royal Pass",
    "Metro Royale",
    "Payload Mode",
    "Zombie Mode",
    "Arena",
    "Classic",
    "Spice Refinery",
    "Water Cache",
    "Solar Array",
    "Med Kit",
    "Energy Drink",
    "Level 3 Helmet",
    "Ghillie Suit",
    "Silencer",
    "RTX 4070",
    "GTX 1060",
    "Ryzen 5",
    "Core i7",
    "16 GB RAM",
    "SSD",
    "Ultrawide",
    "Controller",
];

const YES_NO_OPENERS: [&str; 17] = [
    "is", "are", "was", "were", "does", "do", "did", "can", "could", "will", "would", "should",
    "has", "have", "had", "am", "shall",
];

const RUN_STOPWORDS: [&str; 36] = [
    "the", "a", "an", "in", "on", "at", "of", "and", "for", "to", "with", "from", "this", "that",
    "these", "those", "i", "my", "we", "you", "it", "is", "are", "what", "how", "why", "when",
    "where", "which", "who", "does", "do", "can", "will", "should", "if",
];

fn placeholder_re() -> Regex {
    Regex::new(r"\[([A-Za-z][A-Za-z0-9_]*)\]").expect("static regex")
}

/// Index into [`FIXTURE_WORDS`] for the `ordinal`-th placeholder named `name`.
pub fn fixture_pick(seed: u64, name: &str, ordinal: usize) -> &'static str {
    let h = sha256_u64(&[&seed.to_string(), name, &ordinal.to_string()]);
    FIXTURE_WORDS[(h % FIXTURE_WORDS.len() as u64) as usize]
}

/// Replace every `[NAME]` in `template`. `[GAME_NAME]` takes `game_name`
/// (or "the game"); any other placeholder takes
/// `fixture_pick(seed, NAME, ordinal)` where `ordinal` counts placeholder
/// occurrences from 0.
pub fn fill_placeholders(template: &str, game_name: Option<&str>, seed: u64) -> String {
    let re = placeholder_re();
    let mut ordinal = 0usize;
    re.replace_all(template, |caps: &regex::Captures<'_>| {
        let name = &caps[1];
        let i = ordinal;
        ordinal += 1;
        if name == "GAME_NAME" {
            game_name.unwrap_or("the game").to_string()
        } else {
            fixture_pick(seed, name, i).to_string()
        }
    })
    .into_owned()
}

fn trim_punct(token: &str) -> &str {
    token.trim_matches(|c: char| !c.is_alphanumeric())
}

/// Entity rule of the mock NER: maximal runs of capitalized tokens (digits
/// may continue a run), cut at sentence punctuation, with leading stopwords
/// dropped. Returned in order of first appearance, without duplicates.
pub fn mock_entities(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut run: Vec<&str> = Vec::new();
    let flush = |run: &mut Vec<&str>, out: &mut Vec<String>| {
        while let Some(first) = run.first() {
            if RUN_STOPWORDS.contains(&first.to_lowercase().as_str()) {
                run.remove(0);
            } else {
                break;
            }
        }
        if !run.is_empty() {
            let e = run.join(" ");
            if !out.contains(&e) {
                out.push(e);
            }
        }
        run.clear();
    };
    for raw in text.split_whitespace() {
        let tok = trim_punct(raw);
        if tok.is_empty() {
            flush(&mut run, &mut out);
            continue;
        }
        let first = tok.chars().next().expect("non-empty");
        let capitalized = first.is_uppercase();
        let numeric = tok.chars().any(|c| c.is_ascii_digit());
        if capitalized || (numeric && !run.is_empty()) {
            run.push(tok);
        } else {
            flush(&mut run, &mut out);
        }
        let ends_clause = raw
            .chars()
            .last()
            .map(|c| matches!(c, '.' | ',' | ';' | ':' | '!' | '?' | ')'))
            .unwrap_or(false);
        if ends_clause {
            flush(&mut run, &mut out);
        }
    }
    flush(&mut run, &mut out);
    out
}

fn first_sentence(text: &str) -> String {
    let text = collapse_whitespace(text);
    let bytes: Vec<(usize, char)> = text.char_indices().collect();
    for (k, &(i, c)) in bytes.iter().enumerate() {
        if matches!(c, '.' | '!' | '?') {
            let next_is_space = bytes.get(k + 1).map(|&(_, n)| n == ' ').unwrap_or(true);
            if next_is_space {
                return text[..i + c.len_utf8()].to_string();
            }
        }
    }
    text
}

fn is_yes_no(question: &str) -> bool {
    question
        .split_whitespace()
        .next()
        .map(|w| YES_NO_OPENERS.contains(&trim_punct(w).to_lowercase().as_str()))
        .unwrap_or(false)
}

/// Keyword rules for the mock classifier, first match wins. Keywords are
/// matched against the token stream, so "pre-order" is written "pre order".
const CLASSIFY_RULES: &[(&str, &str, &[&str])] = &[
    (
        "AFTER_SALES_SERVICE",
        "REFUND_POLICY",
        &["refund", "refunded"],
    ),
    (
        "PURCHASE_RELATED",
        "PREORDER_REWARDS",
        &[
            "pre order",
            "preorder",
            "preordering",
            "pre ordering",
            "bonus",
        ],
    ),
    (
        "TECHNICAL_SUPPORT",
        "SYSTEM_REQUIREMENTS",
        &[
            "gtx",
            "rtx",
            "run this",
            "requirements",
            "specs",
            "vram",
            "gpu",
            "cpu",
        ],
    ),
    (
        "TECHNICAL_SUPPORT",
        "CRASH_ERRORS",
        &[
            "crash",
            "crashes",
            "crashing",
            "freeze",
            "freezes",
            "black screen",
            "error",
        ],
    ),
    (
        "TECHNICAL_SUPPORT",
        "PERFORMANCE_ISSUES",
        &[
            "fps",
            "framerate",
            "lag",
            "stutter",
            "stuttering",
            "performance",
        ],
    ),
    (
        "TECHNICAL_SUPPORT",
        "NETWORK_CONNECTION",
        &[
            "server",
            "servers",
            "connection",
            "disconnect",
            "disconnected",
            "ping",
            "latency",
        ],
    ),
    (
        "AFTER_SALES_SERVICE",
        "ACCOUNT_ISSUES",
        &["account", "login", "log in", "activation"],
    ),
    (
        "AFTER_SALES_SERVICE",
        "CUSTOMER_SUPPORT",
        &["customer service", "support ticket", "contact support"],
    ),
    (
        "PURCHASE_RELATED",
        "VERSION_COMPARISON",
        &["edition", "deluxe", "ultimate"],
    ),
    (
        "PURCHASE_RELATED",
        "PLATFORM_SELECTION",
        &[
            "which platform",
            "ps5",
            "xbox",
            "steam deck",
            "console or pc",
        ],
    ),
    (
        "PURCHASE_RELATED",
        "PURCHASE_CONSULTATION",
        &["worth", "buy", "price", "sale"],
    ),
    (
        "SOCIAL_INTERACTION",
        "FRIEND_SYSTEM",
        &["friend", "friends", "friend list"],
    ),
    (
        "SOCIAL_INTERACTION",
        "TEAM_COOPERATION",
        &["co op", "coop", "teammate", "teammates", "squad", "party"],
    ),
    (
        "SOCIAL_INTERACTION",
        "COMMUNITY_EVENTS",
        &["event", "events", "tournament", "competition"],
    ),
    (
        "GAME_CONTENT",
        "VERSION_UPDATES",
        &[
            "patch", "update", "updates", "hotfix", "season", "nerf", "buff", "nerfed", "buffed",
        ],
    ),
    (
        "GAME_CONTENT",
        "PROGRESS_GUIDE",
        &[
            "guide",
            "tips",
            "unlock",
            "level up",
            "where do i find",
            "how do i get",
            "farm",
        ],
    ),
    (
        "GAME_CONTENT",
        "CONTENT_FEATURES",
        &["story", "map size", "mode", "modes", "ending", "dlc"],
    ),
    (
        "REVIEW_DISCUSSION",
        "COMPARISON_DISCUSSION",
        &["compared to", "vs", "better than"],
    ),
    (
        "REVIEW_DISCUSSION",
        "REVIEW_QUESTIONS",
        &["review", "reviews", "rating"],
    ),
    (
        "REVIEW_DISCUSSION",
        "EXPECTATION_CONCERN",
        &["worried", "hope", "future", "concern", "concerned"],
    ),
    (
        "GAME_CONTENT",
        "GAMEPLAY_MECHANICS",
        &[
            "how does",
            "mechanic",
            "mechanics",
            "controls",
            "crafting",
            "parkour",
            "combat",
        ],
    ),
];

/// Topic the mock classifier assigns to `question`.
pub fn mock_topic(question: &str) -> TopicId {
    let stream = format!(" {} ", tokenize(question).join(" "));
    for (main, sub, kws) in CLASSIFY_RULES {
        if kws.iter().any(|kw| stream.contains(&format!(" {kw} "))) {
            return TopicId::new(*main, *sub);
        }
    }
    TopicId::new("GAME_CONTENT", "GAMEPLAY_MECHANICS")
}

/// Rule-table completion backend.
#[derive(Debug, Clone, Default)]
pub struct MockCompletion {
    taxonomy: Taxonomy,
}

impl MockCompletion {
    pub fn new(taxonomy: Taxonomy) -> Self {
        Self { taxonomy }
    }

    fn field<'a>(user: &'a str, start: &str, end: &str) -> Result<&'a str> {
        between(user, start, end).ok_or_else(|| Error::Provider {
            message: format!("mock could not locate {start:?} in prompt"),
            attempts: 1,
            retryable: false,
        })
    }

    fn entities_json(text: &str) -> Value {
        let ents: Vec<Value> = mock_entities(text)
            .into_iter()
            .map(|e| json!({"text": e, "type": "ENTITY", "context": "mock"}))
            .collect();
        json!({ "entities": ents })
    }

    fn respond(&self, req: &CompletionRequest, seed: u64) -> Result<String> {
        let user = req.user_prompt.as_str();
        let task = req.task().unwrap_or("");
        let value = match task {
            prompts::TASK_NER_PSEUDO_INPUTS => {
                let text = Self::field(user, "Original text: ", "\n\nReturn the result")?;
                let n: usize = Self::field(user, "text, generate ", " similar but different")?
                    .trim()
                    .parse()
                    .unwrap_or(3);
                let ents = mock_entities(text);
                let variants: Vec<String> = (0..n)
                    .map(|i| {
                        let mut v = text.to_string();
                        for (k, e) in ents.iter().enumerate() {
                            v = v.replacen(e.as_str(), fixture_pick(seed, e, i * 31 + k), 1);
                        }
                        v
                    })
                    .collect();
                json!({ "pseudo_inputs": variants })
            }
            prompts::TASK_NER_PSEUDO_LABELS => {
                Self::entities_json(Self::field(user, "\n\nText: ", "\n\nReturn the result")?)
            }
            prompts::TASK_NER => {
                Self::entities_json(Self::field(user, "Test Input: ", "\n\nReturn the result")?)
            }
            prompts::TASK_CLASSIFY => {
                let q = Self::field(user, "\n\nQuestion: ", "\n\nReturn JSON only")?;
                let topic = mock_topic(q);
                let topic = if self.taxonomy.contains(&topic) {
                    topic
                } else {
                    self.taxonomy.leaves().next().expect("taxonomy has leaves")
                };
                json!({ "topic": topic.to_string() })
            }
            prompts::TASK_TEMPLATE => {
                let q = Self::field(user, "- Question: ", "\n- Question Topic: ")?.trim();
                let topic =
                    Self::field(user, "\n- Question Topic: ", "\n\nGeneration Requirements")?;
                let mut template = q.to_string();
                let mut names = Vec::new();
                for (k, e) in mock_entities(q).iter().enumerate() {
                    let name = format!("ENTITY_{}", k + 1);
                    if template.contains(e.as_str()) {
                        template = template.replacen(e.as_str(), &format!("[{name}]"), 1);
                        names.push(name);
                    }
                }
                json!({ "templates": [
                    {
                        "template": template,
                        "placeholders": names,
                        "description": format!("Template derived from a {} question", topic.trim()),
                    },
                    {
                        "template": format!("Quick question: {template}"),
                        "placeholders": names,
                        "description": format!("Prefixed variant of a {} question", topic.trim()),
                    }
                ]})
            }
            prompts::TASK_PERSONA => {
                let q = Self::field(user, "\n\nQuestion: ", "\n\nBased on the question content")?
                    .trim();
                let toks = tokenize(q);
                let first_person = toks
                    .iter()
                    .any(|t| matches!(t.as_str(), "i" | "my" | "me" | "im"));
                if first_person && toks.len() >= 6 {
                    let conf = (0.4 + 0.05 * toks.len() as f64).min(0.95);
                    let conf = (conf * 100.0).round() / 100.0;
                    json!({
                        "player_description": format!("You are a player who asked: \"{}\"", collapse_whitespace(q)),
                        "confidence_score": conf,
                    })
                } else {
                    json!({ "player_description": null, "confidence_score": 0.0 })
                }
            }
            prompts::TASK_HYPO_QA => {
                let game = Self::field(
                    user,
                    "use the correct game name ",
                    ".\n\nQuestion Template: ",
                )?;
                let template =
                    Self::field(user, "\n\nQuestion Template: ", "\n\nQuestion Topic: ")?;
                let question = fill_placeholders(template.trim(), Some(game), seed);
                json!({
                    "question": question,
                    "answer": format!("A likely answer: {question} depends on the current in-game rules."),
                })
            }
            prompts::TASK_SYNTH => {
                let template = Self::field(
                    user,
                    "\n\nQuestion Template: ",
                    "\n\nQuestion Generation Specificity",
                )?;
                let docs = prompts::parse_documents(user);
                if docs.is_empty() {
                    return Ok("###THOUGHT_PROCESS###\nNo documents.\n<json>[]</json>".into());
                }
                let question = fill_placeholders(template.trim(), None, seed);
                let refs: Vec<String> = docs.iter().map(|d| collapse_whitespace(d)).collect();
                let item = json!([{
                    "question": question,
                    "answer": first_sentence(&docs[0]),
                    "references": refs,
                }]);
                return Ok(format!(
                    "###THOUGHT_PROCESS###\nThe documents are relevant.\n<json>\n{}\n</json>",
                    serde_json::to_string_pretty(&item)?
                ));
            }
            prompts::TASK_QC => {
                let data = user
                    .find("to be Assessed: ")
                    .map(|i| &user[i + "to be Assessed: ".len()..])
                    .unwrap_or("");
                let question = serde_json::from_str::<Value>(data.trim())
                    .ok()
                    .and_then(|v| v.get("question").and_then(Value::as_str).map(str::to_owned))
                    .unwrap_or_default();
                json!({ "evaluation": if is_yes_no(&question) { 0 } else { 2 } })
            }
            prompts::TASK_JUDGE => {
                let answer =
                    Self::field(user, "\nPredicted Answer: ", "\n\nReturn your evaluation")?;
                let score = if answer.trim().is_empty() { 0 } else { 2 };
                if req.system_prompt.contains("faithfulness") {
                    json!({ "faithfulness": score })
                } else {
                    json!({ "accuracy": score })
                }
            }
            prompts::TASK_GENERATE => {
                let docs = prompts::parse_documents(user);
                return Ok(docs
                    .first()
                    .map(|d| first_sentence(d))
                    .unwrap_or_else(|| "I don't know.".into()));
            }
            other => {
                return Err(Error::Provider {
                    message: format!("mock has no rule for task {other:?}"),
                    attempts: 1,
                    retryable: false,
                })
            }
        };
        Ok(serde_json::to_string(&value)?)
    }
}

impl CompletionProvider for MockCompletion {
    fn generate(&self, request: &CompletionRequest) -> Result<String> {
        let seed = sha256_u64(&[
            &request.system_prompt,
            &request.user_prompt,
            &request.seed.unwrap_or(0).to_string(),
        ]);
        self.respond(request, seed)
    }
}

/// Queued canned answers per task in front of another backend. Once a task's
/// queue is drained, requests fall through to the inner provider.
pub struct ScriptedCompletion {
    inner: Arc<dyn CompletionProvider>,
    scripts: Mutex<HashMap<String, VecDeque<String>>>,
    log: Mutex<Vec<CompletionRequest>>,
}

impl ScriptedCompletion {
    pub fn new(inner: Arc<dyn CompletionProvider>) -> Self {
        Self {
            inner,
            scripts: Mutex::new(HashMap::new()),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn push(&self, task: &str, response: impl Into<String>) -> &Self {
        self.scripts
            .lock()
            .expect("script lock")
            .entry(task.to_string())
            .or_default()
            .push_back(response.into());
        self
    }

    /// Every request seen so far, in order.
    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.log.lock().expect("log lock").clone()
    }

    pub fn calls_for(&self, task: &str) -> usize {
        self.requests()
            .iter()
            .filter(|r| r.task() == Some(task))
            .count()
    }
}

impl CompletionProvider for ScriptedCompletion {
    fn generate(&self, request: &CompletionRequest) -> Result<String> {
        self.log.lock().expect("log lock").push(request.clone());
        let scripted = request.task().and_then(|t| {
            self.scripts
                .lock()
                .expect("script lock")
                .get_mut(t)
                .and_then(VecDeque::pop_front)
        });
        match scripted {
            Some(s) => Ok(s),
            None => self.inner.generate(request),
        }
    }
}

/// Hashed bag-of-tokens embedder.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dim: usize,
}

impl MockEmbedder {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(Self { dim })
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.dim as u64) as usize
    }
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self {
            dim: Self::DEFAULT_DIM,
        }
    }
}

impl EmbeddingProvider for MockEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, text: &str) -> Result<Embedding> {
        let mut v = vec![0.0f64; self.dim];
        for tok in tokenize(text) {
            v[self.bucket(&tok)] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            v[0] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(Embedding::new(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::cosine_similarity;
    use crate::util::render;

    #[test]
    fn same_request_same_output() {
        let m = MockCompletion::default();
        let user = render(
            prompts::HYPO_QA,
            &[
                ("Game_Name", "Dying Light 2"),
                ("Question_Template", "Where is [ITEM] in [GAME_NAME]?"),
                ("Question_Topic", "GAME_CONTENT/PROGRESS_GUIDE"),
            ],
        );
        let req =
            CompletionRequest::new(prompts::system(prompts::TASK_HYPO_QA, ""), user).with_seed(7);
        assert_eq!(m.complete(&req).unwrap(), m.complete(&req).unwrap());
    }

    #[test]
    fn entity_rule() {
        assert_eq!(
            mock_entities("The Night Runner outfit"),
            vec!["Night Runner"]
        );
        assert_eq!(
            mock_entities("will my gtx 1060 run this"),
            Vec::<String>::new()
        );
        assert_eq!(
            mock_entities("you need the RTX 4070 in Harran, then go."),
            vec!["RTX 4070", "Harran"]
        );
    }

    #[test]
    fn classify_fixture() {
        assert_eq!(
            mock_topic("will my gtx 1060 run this").to_string(),
            "TECHNICAL_SUPPORT/SYSTEM_REQUIREMENTS"
        );
        assert_eq!(mock_topic("can I get a refund").sub, "REFUND_POLICY");
    }

    #[test]
    fn embedder_normalizes_and_handles_empty_token_set() {
        let e = MockEmbedder::default();
        let a = e.embed("a a").unwrap();
        let b = e.embed("a").unwrap();
        assert!((cosine_similarity(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert!((a.norm() - 1.0).abs() < 1e-12);
        let punct = e.embed("!!!").unwrap();
        assert_eq!(punct.values[0], 1.0);
        assert!(e.embed("   ").is_err());
    }

    #[test]
    fn scripted_queue_then_fallthrough() {
        let s = ScriptedCompletion::new(Arc::new(MockCompletion::default()));
        s.push(prompts::TASK_QC, "{\"evaluation\": 0}");
        let req = CompletionRequest::new(
            prompts::system(prompts::TASK_QC, ""),
            "to be Assessed: {\"question\":\"Where?\"}",
        );
        assert_eq!(s.complete(&req).unwrap(), "{\"evaluation\": 0}");
        assert_eq!(s.complete(&req).unwrap(), "{\"evaluation\":2}");
        assert_eq!(s.calls_for(prompts::TASK_QC), 2);
    }

    #[test]
    fn unknown_task_is_an_error() {
        let m = MockCompletion::default();
        assert!(m
            .complete(&CompletionRequest::new("TASK:NOPE", "x"))
            .is_err());
    }
}
