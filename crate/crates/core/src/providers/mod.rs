//! Completion and embedding backends.
//!
//! Everything that talks to a language or embedding model goes through the
//! [`CompletionProvider`] and [`EmbeddingProvider`] traits. Two families of
//! implementation exist: [`remote`] clients speaking a generic
//! chat-completions / embeddings HTTP contract, and the deterministic
//! [`mock`] backends that make every pipeline runnable offline.

pub mod mock;
pub mod remote;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub use mock::{MockCompletion, MockEmbedder, ScriptedCompletion};
pub use remote::{RemoteCompletion, RemoteEmbedder, RetryPolicy};

pub const ENV_LLM_ENDPOINT: &str = "CHRONO_LLM_ENDPOINT";
pub const ENV_LLM_KEY: &str = "CHRONO_LLM_KEY";
pub const ENV_EMBED_ENDPOINT: &str = "CHRONO_EMBED_ENDPOINT";
pub const ENV_EMBED_KEY: &str = "CHRONO_EMBED_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expect {
    #[default]
    FreeText,
    JsonObject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub expect: Expect,
}

impl CompletionRequest {
    pub fn new(system_prompt: impl Into<String>, user_prompt: impl Into<String>) -> Self {
        Self {
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            temperature: 0.0,
            seed: None,
            expect: Expect::FreeText,
        }
    }

    pub fn json(mut self) -> Self {
        self.expect = Expect::JsonObject;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    /// The `TASK:<NAME>` marker carried in the system prompt, if any.
    pub fn task(&self) -> Option<&str> {
        let start = self.system_prompt.find("TASK:")? + "TASK:".len();
        let rest = &self.system_prompt[start..];
        let end = rest.find(char::is_whitespace).unwrap_or(rest.len());
        Some(&rest[..end])
    }
}

pub trait CompletionProvider: Send + Sync {
    /// Raw model output for `request`.
    fn generate(&self, request: &CompletionRequest) -> Result<String>;

    /// [`generate`](Self::generate) plus enforcement of the request's
    /// expectation: with `Expect::JsonObject` the text must hold a single
    /// top-level JSON object.
    fn complete(&self, request: &CompletionRequest) -> Result<String> {
        let text = self.generate(request)?;
        if request.expect == Expect::JsonObject {
            parse_json_object(&text)?;
        }
        Ok(text)
    }
}

impl<T: CompletionProvider + ?Sized> CompletionProvider for Arc<T> {
    fn generate(&self, request: &CompletionRequest) -> Result<String> {
        (**self).generate(request)
    }
}

/// Issue a JSON request, retrying malformed answers up to `attempts` times in
/// total. Transport errors are not retried here (the provider already did).
pub fn complete_json(
    provider: &dyn CompletionProvider,
    request: &CompletionRequest,
    attempts: u32,
) -> Result<Value> {
    let request = if request.expect == Expect::JsonObject {
        request.clone()
    } else {
        request.clone().json()
    };
    let mut last = None;
    for _ in 0..attempts.max(1) {
        let text = provider.generate(&request)?;
        match parse_json_object(&text) {
            Ok(v) => return Ok(v),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Parse `text` as a single JSON object, tolerating surrounding code fences or
/// prose around the outermost braces.
pub fn parse_json_object(text: &str) -> Result<Value> {
    let trimmed = text.trim();
    let candidate = match serde_json::from_str::<Value>(trimmed) {
        Ok(v) => Some(v),
        Err(_) => match (trimmed.find('{'), trimmed.rfind('}')) {
            (Some(s), Some(e)) if s < e => serde_json::from_str::<Value>(&trimmed[s..=e]).ok(),
            _ => None,
        },
    };
    match candidate {
        Some(v @ Value::Object(_)) => Ok(v),
        Some(_) => Err(Error::MalformedJson {
            message: "top-level value is not an object".into(),
            raw: text.to_string(),
        }),
        None => Err(Error::MalformedJson {
            message: "no JSON object found".into(),
            raw: text.to_string(),
        }),
    }
}

/// A dense vector produced by an [`EmbeddingProvider`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub trait EmbeddingProvider: Send + Sync {
    /// Declared output dimension.
    fn dim(&self) -> usize;

    fn embed_raw(&self, text: &str) -> Result<Embedding>;

    fn embed(&self, text: &str) -> Result<Embedding> {
        if text.trim().is_empty() {
            return Err(Error::Precondition("cannot embed empty text".into()));
        }
        let e = self.embed_raw(text)?;
        if e.dim() != self.dim() {
            return Err(Error::Contract(format!(
                "provider declared dimension {} but returned {}",
                self.dim(),
                e.dim()
            )));
        }
        Ok(e)
    }
}

impl<T: EmbeddingProvider + ?Sized> EmbeddingProvider for Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn embed_raw(&self, text: &str) -> Result<Embedding> {
        (**self).embed_raw(text)
    }
}

/// `dot(a,b) / (|a||b|)`, or 0 when either norm is 0.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Contract(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Mock,
    Remote,
}

/// Build the completion backend for `kind`. Remote backends read endpoint and
/// key from the environment.
pub fn completion_from_env(
    kind: ProviderKind,
    model: &str,
    retry: RetryPolicy,
) -> Result<Arc<dyn CompletionProvider>> {
    match kind {
        ProviderKind::Mock => Ok(Arc::new(MockCompletion::default())),
        ProviderKind::Remote => {
            let endpoint = std::env::var(ENV_LLM_ENDPOINT)
                .map_err(|_| Error::Config(format!("{ENV_LLM_ENDPOINT} is not set")))?;
            let key = std::env::var(ENV_LLM_KEY).ok();
            Ok(Arc::new(RemoteCompletion::new(
                endpoint, key, model, retry,
            )?))
        }
    }
}

pub fn embedding_from_env(
    kind: ProviderKind,
    model: &str,
    dim: usize,
    retry: RetryPolicy,
) -> Result<Arc<dyn EmbeddingProvider>> {
    match kind {
        ProviderKind::Mock => Ok(Arc::new(MockEmbedder::new(dim)?)),
        ProviderKind::Remote => {
            let endpoint = std::env::var(ENV_EMBED_ENDPOINT)
                .map_err(|_| Error::Config(format!("{ENV_EMBED_ENDPOINT} is not set")))?;
            let key = std::env::var(ENV_EMBED_KEY).ok();
            Ok(Arc::new(RemoteEmbedder::new(
                endpoint, key, model, dim, retry,
            )?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_basics() {
        let v = Embedding::new(vec![0.3, -1.2, 2.0]);
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let x = Embedding::new(vec![1.0, 0.0]);
        let y = Embedding::new(vec![0.0, 1.0]);
        assert_eq!(cosine_similarity(&x, &y).unwrap(), 0.0);
        let nx = Embedding::new(vec![-1.0, 0.0]);
        assert_eq!(cosine_similarity(&x, &nx).unwrap(), -1.0);
        let zero = Embedding::new(vec![0.0, 0.0]);
        assert_eq!(cosine_similarity(&x, &zero).unwrap(), 0.0);
        let short = Embedding::new(vec![1.0]);
        assert!(matches!(
            cosine_similarity(&x, &short),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn json_object_parsing() {
        assert!(parse_json_object("```json\n{\"a\": 1}\n```").is_ok());
        assert!(parse_json_object("noise {\"a\": 1} trailing").is_ok());
        match parse_json_object("[1, 2]") {
            Err(Error::MalformedJson { raw, .. }) => assert_eq!(raw, "[1, 2]"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_json_object("not json").is_err());
    }

    #[test]
    fn task_marker_is_read_from_system_prompt() {
        let r = CompletionRequest::new("TASK:QC\nBackground...", "u");
        assert_eq!(r.task(), Some("QC"));
        assert_eq!(CompletionRequest::new("none", "u").task(), None);
    }
}
