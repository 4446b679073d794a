//! Run configuration, read from a TOML file.
//!
//! ```toml
//! game_id = "dying-light-2"
//! seed = 7
//! deterministic = true
//!
//! [providers]
//! completion = "mock"
//! embedding = "mock"
//!
//! [drift]
//! window = "5d"
//! step = "1d"
//! gamma = 1.5
//! lambda = 0.001
//!
//! [paths]
//! store = "store"
//! assets = "assets"
//! ```
//!
//! Every key is optional. Command-line flags override file values.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::drift::{parse_duration, DriftConfig};
use crate::entity::{Extractor, ExtractorKind, Gazetteer, SelfIclExtractor};
use crate::error::{Error, Result};
use crate::ingest::ChunkPolicy;
use crate::providers::{
    completion_from_env, embedding_from_env, CompletionProvider, EmbeddingProvider, MockCompletion,
    MockEmbedder, ProviderKind, RetryPolicy,
};
use crate::rag_eval::Bm25Params;
use crate::synthesis::SynthesisConfig;
use crate::taxonomy::Taxonomy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    pub completion: ProviderKind,
    pub embedding: ProviderKind,
    pub completion_model: String,
    pub embedding_model: String,
    pub embedding_dim: usize,
    pub retry_attempts: u32,
    pub retry_backoff_ms: u64,
}

impl Default for ProviderSection {
    fn default() -> Self {
        Self {
            completion: ProviderKind::Mock,
            embedding: ProviderKind::Mock,
            completion_model: String::new(),
            embedding_model: String::new(),
            embedding_dim: MockEmbedder::DEFAULT_DIM,
            retry_attempts: 3,
            retry_backoff_ms: 500,
        }
    }
}

/// Drift settings with human-readable durations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftSection {
    pub window: String,
    pub step: String,
    pub gamma: f64,
    pub lambda: f64,
    pub min_posts: usize,
}

impl Default for DriftSection {
    fn default() -> Self {
        let d = DriftConfig::default();
        Self {
            window: "5d".into(),
            step: "1d".into(),
            gamma: d.gamma,
            lambda: d.threshold,
            min_posts: d.min_posts,
        }
    }
}

impl DriftSection {
    pub fn resolve(&self) -> Result<DriftConfig> {
        let cfg = DriftConfig {
            window: parse_duration(&self.window)?,
            gamma: self.gamma,
            threshold: self.lambda,
            step: parse_duration(&self.step)?,
            min_posts: self.min_posts,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntitySection {
    pub extractor: String,
    pub gazetteer: Option<PathBuf>,
}

impl Default for EntitySection {
    fn default() -> Self {
        Self {
            extractor: "llm_self_icl".into(),
            gazetteer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChunkSection {
    pub max_chars: usize,
    pub overlap_chars: usize,
}

impl Default for ChunkSection {
    fn default() -> Self {
        let p = ChunkPolicy::default();
        Self {
            max_chars: p.max_chars,
            overlap_chars: p.overlap_chars,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSection {
    pub store: PathBuf,
    /// Mined assets: posts.jsonl, templates.jsonl, personas.jsonl.
    pub assets: PathBuf,
    /// Taxonomy JSON; the bundled taxonomy when unset.
    pub taxonomy: Option<PathBuf>,
    pub review: Option<PathBuf>,
}

impl Default for PathSection {
    fn default() -> Self {
        Self {
            store: "store".into(),
            assets: "assets".into(),
            taxonomy: None,
            review: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningSection {
    pub dedup_threshold: f64,
    pub persona_floor: f64,
}

impl Default for MiningSection {
    fn default() -> Self {
        Self {
            dedup_threshold: crate::community::DEFAULT_DEDUP_THRESHOLD,
            persona_floor: crate::community::DEFAULT_PERSONA_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub game_id: String,
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub providers: ProviderSection,
    pub drift: DriftSection,
    pub synthesis: SynthesisConfig,
    pub bm25: Bm25Params,
    pub chunk: ChunkSection,
    pub entity: EntitySection,
    pub mining: MiningSection,
    pub paths: PathSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            game_id: "game".into(),
            seed: None,
            deterministic: false,
            providers: ProviderSection::default(),
            drift: DriftSection::default(),
            synthesis: SynthesisConfig::default(),
            bm25: Bm25Params::default(),
            chunk: ChunkSection::default(),
            entity: EntitySection::default(),
            mining: MiningSection::default(),
            paths: PathSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_toml(&text)
    }

    /// Check cross-field rules and that referenced files exist.
    pub fn validate(&self) -> Result<()> {
        if self.deterministic && self.seed.is_none() {
            return Err(Error::Config("deterministic runs need a seed".into()));
        }
        self.drift.resolve()?;
        self.synthesis.validate()?;
        self.bm25.validate()?;
        self.chunk_policy()?;
        self.entity.extractor.parse::<ExtractorKind>()?;
        for p in [
            &self.paths.taxonomy,
            &self.entity.gazetteer,
            &self.paths.review,
        ]
        .into_iter()
        .flatten()
        {
            if !p.exists() {
                return Err(Error::MissingFile(p.clone()));
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn chunk_policy(&self) -> Result<ChunkPolicy> {
        ChunkPolicy::new(self.chunk.max_chars, self.chunk.overlap_chars)
    }

    pub fn taxonomy(&self) -> Result<Taxonomy> {
        match &self.paths.taxonomy {
            Some(p) => Taxonomy::load(p),
            None => Ok(Taxonomy::default()),
        }
    }

    fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            attempts: self.providers.retry_attempts,
            initial_backoff: Duration::from_millis(self.providers.retry_backoff_ms),
        }
    }

    pub fn completion(&self, taxonomy: &Taxonomy) -> Result<Arc<dyn CompletionProvider>> {
        match self.providers.completion {
            ProviderKind::Mock => Ok(Arc::new(MockCompletion::new(taxonomy.clone()))),
            kind => completion_from_env(kind, &self.providers.completion_model, self.retry()),
        }
    }

    pub fn embedder(&self) -> Result<Arc<dyn EmbeddingProvider>> {
        embedding_from_env(
            self.providers.embedding,
            &self.providers.embedding_model,
            self.providers.embedding_dim,
            self.retry(),
        )
    }

    pub fn extractor(&self, provider: Arc<dyn CompletionProvider>) -> Result<Extractor> {
        match self.entity.extractor.parse::<ExtractorKind>()? {
            ExtractorKind::Dictionary => {
                let path = self.entity.gazetteer.as_ref().ok_or_else(|| {
                    Error::Config("the dictionary extractor needs entity.gazetteer".into())
                })?;
                Ok(Extractor::Dictionary(Gazetteer::load(path)?))
            }
            ExtractorKind::LlmSelfIcl => Ok(Extractor::SelfIcl(SelfIclExtractor::new(provider))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
        let d = c.drift.resolve().unwrap();
        assert_eq!(d, DriftConfig::default());

        let c = RunConfig::from_toml(
            "game_id = \"g\"\nseed = 7\ndeterministic = true\n[drift]\nwindow = \"2w\"\nlambda = 0.01\n[synthesis]\ngame_name = \"Dying Light 2\"\n",
        )
        .unwrap();
        c.validate().unwrap();
        assert_eq!(c.drift.resolve().unwrap().window, 14 * 86_400);
        assert_eq!(c.synthesis.game_name, "Dying Light 2");
        assert_eq!(c.synthesis.persona_threshold, 0.6);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(
            RunConfig::from_toml("nope = 1"),
            Err(Error::Config(_))
        ));
        let c = RunConfig::from_toml("deterministic = true").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = RunConfig::from_toml("[paths]\ntaxonomy = \"/no/such/taxonomy.json\"").unwrap();
        match c.validate() {
            Err(Error::MissingFile(p)) => assert!(p.ends_with("taxonomy.json")),
            other => panic!("unexpected {other:?}"),
        }
        let c = RunConfig::from_toml("[drift]\nlambda = 0.0").unwrap();
        assert!(c.validate().is_err());
    }
}
