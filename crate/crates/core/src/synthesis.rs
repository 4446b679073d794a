//! Grounded tuple synthesis: template sampling, hypothetical Q&A, reference
//! retrieval, persona matching, agent generation and the quality gate, with a
//! bounded same-topic retry loop.

use std::collections::BTreeSet;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::community::{placeholders_in, Persona, QuestionTemplate};
use crate::error::{Error, Result};
use crate::model::{EvalTuple, KnowledgeBase, KnowledgeSnippet, Origin, QuestionType};
use crate::prompts;
use crate::providers::{
    complete_json, cosine_similarity, CompletionProvider, CompletionRequest, Embedding,
    EmbeddingProvider,
};
use crate::taxonomy::{Taxonomy, TopicId};
use crate::util::{collapse_whitespace, render, sha256_u64, substream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub use_hypothetical: bool,
    pub use_persona: bool,
    pub use_template: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_hypothetical: true,
            use_persona: true,
            use_template: true,
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    /// Comma-separated switches: `no-hypo`, `no-persona`, `no-template`, or `full`.
    fn from_str(s: &str) -> Result<Self> {
        let mut a = Ablation::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "full" | "none" => {}
                "no-hypo" | "no-hypothetical" | "no_hypo" => a.use_hypothetical = false,
                "no-persona" | "no_persona" => a.use_persona = false,
                "no-template" | "no_template" => a.use_template = false,
                other => return Err(Error::Config(format!("unknown ablation switch {other:?}"))),
            }
        }
        Ok(a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub question_types: Vec<QuestionType>,
    pub persona_threshold: f64,
    pub top_k_refs: usize,
    pub max_retries: usize,
    pub ablation: Ablation,
    pub seed: u64,
    pub game_name: String,
    /// Attempts per JSON request before a malformed answer is an error.
    pub json_attempts: u32,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            question_types: QuestionType::defaults(),
            persona_threshold: 0.6,
            top_k_refs: 3,
            max_retries: 3,
            ablation: Ablation::default(),
            seed: 0,
            game_name: "the game".into(),
            json_attempts: 2,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_retries < 1 {
            return Err(Error::Config("max_retries must be at least 1".into()));
        }
        if self.top_k_refs < 1 {
            return Err(Error::Config("top_k_refs must be at least 1".into()));
        }
        if self.question_types.is_empty() {
            return Err(Error::Config("question_types must not be empty".into()));
        }
        if !(0.0..=1.0).contains(&self.persona_threshold) {
            return Err(Error::Config(format!(
                "persona threshold {} outside [0, 1]",
                self.persona_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypotheticalQA {
    pub question: String,
    pub answer: String,
    pub source_template_id: String,
}

impl HypotheticalQA {
    pub fn query_text(&self) -> String {
        format!("{}\n{}", self.question, self.answer)
    }
}

/// Uniform seeded draw among the templates of `topic` (all templates when
/// `None`), skipping `exclude` while any other candidate remains.
pub fn sample_template<'a>(
    base: &'a [QuestionTemplate],
    topic: Option<&TopicId>,
    exclude: &BTreeSet<String>,
    rng: &mut ChaCha8Rng,
) -> Result<&'a QuestionTemplate> {
    if base.is_empty() {
        return Err(Error::Sampling("template base is empty".into()));
    }
    let pool: Vec<&QuestionTemplate> = base
        .iter()
        .filter(|t| topic.is_none_or(|x| &t.topic == x))
        .collect();
    if pool.is_empty() {
        let t = topic.map(ToString::to_string).unwrap_or_default();
        return Err(Error::Sampling(format!("no templates for topic {t}")));
    }
    let fresh: Vec<&QuestionTemplate> = pool
        .iter()
        .copied()
        .filter(|t| !exclude.contains(&t.template_id))
        .collect();
    let pool = if fresh.is_empty() { pool } else { fresh };
    Ok(pool[rng.gen_range(0..pool.len())])
}

/// Stand-in for a mined template under the no-template ablation.
pub fn generic_template(topic: &TopicId, taxonomy: &Taxonomy) -> QuestionTemplate {
    let name = taxonomy
        .sub_category(topic)
        .map(|s| s.name.clone())
        .unwrap_or_else(|| topic.sub.to_lowercase().replace('_', " "));
    QuestionTemplate {
        template_id: format!("generic-{}", topic.sub.to_lowercase()),
        template: format!("What should I know about {name} in [GAME_NAME]?"),
        placeholders: vec!["GAME_NAME".into()],
        topic: topic.clone(),
        description: "Topic-only instruction".into(),
    }
}

fn as_synthesis(e: Error) -> Error {
    match e {
        Error::MalformedJson { message, raw } => {
            Error::Synthesis(format!("malformed JSON ({message}): {raw}"))
        }
        other => other,
    }
}

pub fn generate_hypothetical_qa(
    template: &QuestionTemplate,
    game_name: &str,
    provider: &dyn CompletionProvider,
    seed: u64,
    json_attempts: u32,
) -> Result<HypotheticalQA> {
    let topic = template.topic.to_string();
    let user = render(
        prompts::HYPO_QA,
        &[
            ("Game_Name", game_name),
            ("Question_Template", &template.template),
            ("Question_Topic", &topic),
        ],
    );
    let req = CompletionRequest::new(prompts::system(prompts::TASK_HYPO_QA, ""), user)
        .json()
        .with_seed(seed);
    let v = complete_json(provider, &req, json_attempts).map_err(as_synthesis)?;
    let field = |k: &str| -> Result<String> {
        v.get(k)
            .and_then(Value::as_str)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_owned)
            .ok_or_else(|| Error::Synthesis(format!("hypothetical Q&A lacks a non-empty \"{k}\"")))
    };
    let question = field("question")?;
    let answer = field("answer")?;
    let left = placeholders_in(&question);
    if !left.is_empty() {
        return Err(Error::Validation(format!(
            "unresolved placeholders {left:?} in {question:?}"
        )));
    }
    Ok(HypotheticalQA {
        question,
        answer,
        source_template_id: template.template_id.clone(),
    })
}

/// Snippets with their embeddings, for exact cosine retrieval.
pub struct EmbeddedKb {
    pub version: String,
    snippets: Vec<KnowledgeSnippet>,
    vectors: Vec<Embedding>,
}

impl EmbeddedKb {
    pub fn build(kb: &KnowledgeBase, embedder: &dyn EmbeddingProvider) -> Result<Self> {
        let vectors = kb
            .snippets()
            .par_iter()
            .map(|s| embedder.embed(&s.content))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            version: kb.version().to_string(),
            snippets: kb.snippets().to_vec(),
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.snippets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snippets.is_empty()
    }

    /// Top-`k` snippets by cosine similarity to `query`, ties by id ascending.
    pub fn top_k(&self, query: &Embedding, k: usize) -> Result<Vec<&KnowledgeSnippet>> {
        if self.snippets.is_empty() {
            return Err(Error::Retrieval("knowledge base is empty".into()));
        }
        let mut scored = self
            .vectors
            .iter()
            .zip(&self.snippets)
            .map(|(v, s)| Ok((cosine_similarity(query, v)?, s)))
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
        Ok(scored.into_iter().take(k).map(|(_, s)| s).collect())
    }
}

pub fn retrieve_reference_snippets<'a>(
    query_text: &str,
    kb: &'a EmbeddedKb,
    embedder: &dyn EmbeddingProvider,
    k: usize,
) -> Result<Vec<&'a KnowledgeSnippet>> {
    if kb.is_empty() {
        return Err(Error::Retrieval("knowledge base is empty".into()));
    }
    kb.top_k(&embedder.embed(query_text)?, k)
}

pub struct PersonaIndex {
    personas: Vec<Persona>,
    vectors: Vec<Embedding>,
}

impl PersonaIndex {
    pub fn build(personas: &[Persona], embedder: &dyn EmbeddingProvider) -> Result<Self> {
        let vectors = personas
            .par_iter()
            .map(|p| embedder.embed(&p.description))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            personas: personas.to_vec(),
            vectors,
        })
    }

    pub fn empty() -> Self {
        Self {
            personas: Vec::new(),
            vectors: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.personas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.personas.is_empty()
    }
}

/// Most similar persona when its similarity is strictly above `threshold`.
pub fn match_persona<'a>(
    query: &Embedding,
    index: &'a PersonaIndex,
    threshold: f64,
) -> Result<Option<&'a Persona>> {
    let mut best: Option<(f64, &Persona)> = None;
    for (v, p) in index.vectors.iter().zip(&index.personas) {
        let s = cosine_similarity(query, v)?;
        let better = match best {
            None => true,
            Some((bs, bp)) => s > bs || (s == bs && p.persona_id < bp.persona_id),
        };
        if better {
            best = Some((s, p));
        }
    }
    Ok(best.filter(|(s, _)| *s > threshold).map(|(_, p)| p))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CandidateOutcome {
    Tuple(Box<EvalTuple>),
    /// The agent judged the documents unsuitable and returned an empty list.
    Unsuitable,
}

pub struct CandidateInput<'a> {
    pub template_text: &'a str,
    pub topic: &'a TopicId,
    pub refs: &'a [&'a KnowledgeSnippet],
    pub persona: Option<&'a Persona>,
    pub question_type: &'a QuestionType,
}

fn topic_description(topic: &TopicId, taxonomy: &Taxonomy) -> String {
    taxonomy.describe(topic)
}

/// Items of the `<json>[...]</json>` envelope.
pub fn parse_envelope(text: &str) -> Result<Vec<Value>> {
    let start = text
        .find("<json>")
        .ok_or_else(|| Error::Synthesis("response lacks a <json> envelope".into()))?
        + "<json>".len();
    let end = text[start..]
        .rfind("</json>")
        .ok_or_else(|| Error::Synthesis("response lacks a closing </json>".into()))?;
    match serde_json::from_str::<Value>(text[start..start + end].trim()) {
        Ok(Value::Array(items)) => Ok(items),
        Ok(_) => Err(Error::Synthesis(
            "<json> envelope does not hold a list".into(),
        )),
        Err(e) => Err(Error::Synthesis(format!(
            "<json> envelope is not valid JSON: {e}"
        ))),
    }
}

/// Map each quoted reference to the first snippet whose whitespace-normalized
/// content contains it; ids are returned in first-use order.
pub fn ground_references<'a>(
    references: &[String],
    refs: &[&'a KnowledgeSnippet],
) -> Result<Vec<&'a KnowledgeSnippet>> {
    if references.is_empty() {
        return Err(Error::Grounding("candidate quotes no references".into()));
    }
    let normalized: Vec<String> = refs
        .iter()
        .map(|s| collapse_whitespace(&s.content))
        .collect();
    let mut out: Vec<&KnowledgeSnippet> = Vec::new();
    for r in references {
        let needle = collapse_whitespace(r);
        if needle.is_empty() {
            return Err(Error::Grounding("empty reference".into()));
        }
        let hit = normalized
            .iter()
            .position(|c| c.contains(&needle))
            .ok_or_else(|| {
                Error::Grounding(format!(
                    "reference not found in any provided snippet: {needle:?}"
                ))
            })?;
        if !out.iter().any(|s| s.id == refs[hit].id) {
            out.push(refs[hit]);
        }
    }
    Ok(out)
}

pub fn synthesize_candidate(
    input: &CandidateInput<'_>,
    taxonomy: &Taxonomy,
    provider: &dyn CompletionProvider,
    seed: u64,
) -> Result<CandidateOutcome> {
    if input.refs.is_empty() {
        return Err(Error::Precondition(
            "synthesis needs at least one reference snippet".into(),
        ));
    }
    let docs = prompts::render_documents(
        input
            .refs
            .iter()
            .map(|s| (s.id.as_str(), s.content.as_str())),
    );
    let role = input.persona.map_or("None", |p| p.description.as_str());
    let user = render(
        prompts::AGENT_USER,
        &[
            (
                "Topic_Description",
                &topic_description(input.topic, taxonomy),
            ),
            ("Query_Type", input.question_type.as_str()),
            ("Query_Type_Description", input.question_type.description()),
            ("Role_Context", role),
            ("Question_Template", input.template_text),
            ("Documents", &docs),
        ],
    );
    let req = CompletionRequest::new(
        prompts::system(prompts::TASK_SYNTH, prompts::AGENT_SYSTEM),
        user,
    )
    .with_seed(seed);
    let text = provider.complete(&req)?;
    let items = parse_envelope(&text)?;
    let Some(item) = items.first() else {
        return Ok(CandidateOutcome::Unsuitable);
    };
    let field = |k: &str| -> Result<String> {
        item.get(k)
            .and_then(Value::as_str)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_owned)
            .ok_or_else(|| Error::Synthesis(format!("generated item lacks a non-empty \"{k}\"")))
    };
    let question = field("question")?;
    let answer = field("answer")?;
    let references: Vec<String> = match item.get("references") {
        Some(Value::Array(a)) => a
            .iter()
            .filter_map(Value::as_str)
            .map(str::to_owned)
            .collect(),
        Some(Value::String(s)) => vec![s.clone()],
        _ => Vec::new(),
    };
    let grounded = ground_references(&references, input.refs)?;
    Ok(CandidateOutcome::Tuple(Box::new(EvalTuple::from_refs(
        question,
        answer,
        &grounded,
        input.topic.clone(),
        input.question_type.clone(),
        input.persona.map(|p| p.persona_id.clone()),
        Origin::Synthesized,
    )?)))
}

/// QC score in {0, 1, 2}.
pub fn quality_gate(
    candidate: &EvalTuple,
    topic: &TopicId,
    question_type: &QuestionType,
    refs: &[&KnowledgeSnippet],
    taxonomy: &Taxonomy,
    provider: &dyn CompletionProvider,
    seed: u64,
) -> Result<u8> {
    let docs = prompts::render_documents(refs.iter().map(|s| (s.id.as_str(), s.content.as_str())));
    let query_type = format!("{}: {}", question_type, question_type.description());
    let data = json!({ "question": candidate.question, "answer": candidate.answer }).to_string();
    let user = render(
        prompts::QC_USER,
        &[
            ("Documents", &docs),
            ("Topic_Description", &topic_description(topic, taxonomy)),
            ("Query_Type", &query_type),
            ("Generated_Data", &data),
        ],
    );
    let req = CompletionRequest::new(prompts::system(prompts::TASK_QC, prompts::QC_SYSTEM), user)
        .json()
        .with_seed(seed);
    let v = complete_json(provider, &req, 1).map_err(|e| match e {
        Error::MalformedJson { message, .. } => Error::Judge(format!("quality gate: {message}")),
        other => other,
    })?;
    match v.get("evaluation").and_then(Value::as_u64) {
        Some(s @ 0..=2) => Ok(s as u8),
        _ => Err(Error::Judge(format!(
            "quality gate score out of range: {}",
            v["evaluation"]
        ))),
    }
}

/// Everything the synthesis loop draws from.
pub struct Synthesizer<'a> {
    pub provider: &'a dyn CompletionProvider,
    pub embedder: &'a dyn EmbeddingProvider,
    pub taxonomy: &'a Taxonomy,
    pub templates: &'a [QuestionTemplate],
    pub personas: &'a PersonaIndex,
    pub kb: &'a EmbeddedKb,
    pub config: &'a SynthesisConfig,
}

#[derive(Debug)]
pub struct SynthesisBatch {
    pub tuples: Vec<EvalTuple>,
    pub failures: Vec<(TopicId, Error)>,
}

impl Synthesizer<'_> {
    /// Full loop for one tuple of `topic`. `ordinal` keys the RNG substream so
    /// that independent tuples draw independently.
    pub fn synthesize_tuple(
        &self,
        topic: &TopicId,
        ordinal: u64,
        existing_ids: &BTreeSet<String>,
    ) -> Result<EvalTuple> {
        let cfg = self.config;
        cfg.validate()?;
        let mut rng = substream(cfg.seed, &format!("synth/{topic}/{ordinal}"));
        let mut tried = BTreeSet::new();
        let mut transcript = Vec::new();
        for attempt in 0..cfg.max_retries {
            let call_seed = sha256_u64(&[
                &cfg.seed.to_string(),
                &topic.to_string(),
                &ordinal.to_string(),
                &attempt.to_string(),
            ]);
            let template = if cfg.ablation.use_template {
                sample_template(self.templates, Some(topic), &tried, &mut rng)?.clone()
            } else {
                generic_template(topic, self.taxonomy)
            };
            tried.insert(template.template_id.clone());
            match self.attempt(topic, &template, &mut rng, call_seed, existing_ids) {
                Ok(Ok(t)) => return Ok(t),
                Ok(Err(reason)) => transcript.push(format!(
                    "attempt {} [{}]: {reason}",
                    attempt + 1,
                    template.template_id
                )),
                Err(e) => return Err(e),
            }
        }
        Err(Error::SynthesisExhausted {
            topic: topic.to_string(),
            transcript,
        })
    }

    /// `Ok(Err(reason))` is a rejected attempt; `Err` aborts the loop.
    fn attempt(
        &self,
        topic: &TopicId,
        template: &QuestionTemplate,
        rng: &mut ChaCha8Rng,
        seed: u64,
        existing_ids: &BTreeSet<String>,
    ) -> Result<std::result::Result<EvalTuple, String>> {
        let cfg = self.config;
        let query = if cfg.ablation.use_hypothetical {
            match generate_hypothetical_qa(
                template,
                &cfg.game_name,
                self.provider,
                seed,
                cfg.json_attempts,
            ) {
                Ok(h) => h.query_text(),
                Err(e @ (Error::Synthesis(_) | Error::Validation(_))) => {
                    return Ok(Err(e.to_string()))
                }
                Err(e) => return Err(e),
            }
        } else {
            render(&template.template, &[("GAME_NAME", &cfg.game_name)])
        };
        let query_vec = self.embedder.embed(&query)?;
        let refs = self.kb.top_k(&query_vec, cfg.top_k_refs)?;
        let persona = if cfg.ablation.use_persona {
            match_persona(&query_vec, self.personas, cfg.persona_threshold)?
        } else {
            None
        };
        let question_type = &cfg.question_types[rng.gen_range(0..cfg.question_types.len())];
        let input = CandidateInput {
            template_text: &template.template,
            topic,
            refs: &refs,
            persona,
            question_type,
        };
        let tuple = match synthesize_candidate(&input, self.taxonomy, self.provider, seed) {
            Ok(CandidateOutcome::Tuple(t)) => *t,
            Ok(CandidateOutcome::Unsuitable) => return Ok(Err("documents unsuitable".into())),
            Err(e @ (Error::Synthesis(_) | Error::Grounding(_))) => return Ok(Err(e.to_string())),
            Err(e) => return Err(e),
        };
        if existing_ids.contains(&tuple.id) {
            return Ok(Err(format!("duplicate tuple {}", tuple.id)));
        }
        let grounded: Vec<&KnowledgeSnippet> = refs
            .iter()
            .copied()
            .filter(|s| tuple.ref_ids.contains(&s.id))
            .collect();
        match quality_gate(
            &tuple,
            topic,
            question_type,
            &grounded,
            self.taxonomy,
            self.provider,
            seed,
        ) {
            Ok(2) => Ok(Ok(tuple)),
            Ok(s) => Ok(Err(format!("quality score {s}"))),
            Err(e @ Error::Judge(_)) => Ok(Err(e.to_string())),
            Err(e) => Err(e),
        }
    }

    /// One tuple per entry of `plan`, synthesized in parallel and merged in
    /// plan order. A tuple colliding with an earlier one is re-drawn with a
    /// fresh ordinal; exhausted topics are reported, not fatal.
    pub fn synthesize_many(
        &self,
        plan: &[TopicId],
        existing_ids: &BTreeSet<String>,
        ordinal_base: u64,
    ) -> SynthesisBatch {
        let results: Vec<Result<EvalTuple>> = plan
            .par_iter()
            .enumerate()
            .map(|(i, topic)| self.synthesize_tuple(topic, ordinal_base + i as u64, existing_ids))
            .collect();
        let mut seen = existing_ids.clone();
        let mut tuples = Vec::new();
        let mut failures = Vec::new();
        let stride = plan.len().max(1) as u64;
        for (i, (topic, res)) in plan.iter().zip(results).enumerate() {
            let mut res = res;
            let mut redraw = 1u64;
            loop {
                match res {
                    Ok(t) if seen.contains(&t.id) && redraw <= self.config.max_retries as u64 => {
                        res = self.synthesize_tuple(
                            topic,
                            ordinal_base + i as u64 + redraw * stride,
                            &seen,
                        );
                        redraw += 1;
                    }
                    Ok(t) if seen.contains(&t.id) => {
                        failures.push((
                            topic.clone(),
                            Error::Synthesis(format!("duplicate tuple {}", t.id)),
                        ));
                        break;
                    }
                    Ok(t) => {
                        seen.insert(t.id.clone());
                        tuples.push(t);
                        break;
                    }
                    Err(e) => {
                        failures.push((topic.clone(), e));
                        break;
                    }
                }
            }
        }
        SynthesisBatch { tuples, failures }
    }
}
