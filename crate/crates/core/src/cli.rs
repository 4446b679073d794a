//! The `chronoplay` command line.
//!
//! Every subcommand reads files and writes files. Exit status is 0 on
//! success, 1 for bad input or configuration, 2 for provider failures and 64
//! for usage errors.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, NaiveDate};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::community::{
    classify_topic, mine, CommunityPost, MiningConfig, Persona, QuestionTemplate, ReviewList,
};
use crate::config::RunConfig;
use crate::drift::{parse_duration, partition_phases, DriftConfig, DriftReport, TopicDistribution};
use crate::entity::{extract_entities, Extractor};
use crate::error::{Error, Result};
use crate::ingest::{ingest, list_jsonl};
use crate::judge::{
    agreement, krippendorff_alpha, lenient_map, majority_vote, parse_criteria, AgreementTable,
    GenerationEval,
};
use crate::lifecycle::{
    step, target_counts, Announcement, CompositionReport, StepConfig, SynthContext, UpdateMode,
};
use crate::model::{BenchmarkSlice, KnowledgeBase, KnowledgeSnippet, Timestamp};
use crate::providers::{CompletionProvider, EmbeddingProvider};
use crate::rag_eval::{
    evaluate_phase, Bm25Index, DenseRetriever, PhaseEval, Retriever, RetrieverKind,
};
use crate::store::{load_slice_dir, Store};
use crate::synthesis::{Ablation, EmbeddedKb, PersonaIndex, Synthesizer};
use crate::taxonomy::{Taxonomy, TopicId};
use crate::util::{read_json, read_jsonl, sha256_hex, write_json, write_jsonl};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_PROVIDER: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(
    name = "chronoplay",
    version,
    about = "Build, evolve and evaluate a dynamic game RAG benchmark"
)]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Benchmark store directory.
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    /// Taxonomy JSON; the bundled taxonomy when unset.
    #[arg(long, global = true)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Recompute outputs that already exist.
    #[arg(long, global = true)]
    pub force: bool,
    /// Require a seed and fix all randomness to it.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Chunk JSON-lines documents into entity-tagged snippets.
    Ingest {
        /// File or directory of *.jsonl documents.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_chars: Option<usize>,
        #[arg(long)]
        overlap: Option<usize>,
    },
    /// Classify posts and mine question templates and personas.
    Mine {
        #[arg(long)]
        posts: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// JSON review list with `allow` / `deny` ids.
        #[arg(long)]
        review: Option<PathBuf>,
    },
    /// Synthesize the initial slice into the store.
    Synth {
        #[arg(long)]
        snippets: PathBuf,
        #[arg(long, default_value_t = 50)]
        n: usize,
        /// Restrict to one topic, `MAIN/SUB`.
        #[arg(long)]
        topic: Option<String>,
        /// `full`, or any of `no-hypo,no-persona,no-template`.
        #[arg(long)]
        ablation: Option<String>,
        /// Directory holding mined templates.jsonl, personas.jsonl and posts.jsonl.
        #[arg(long)]
        assets: Option<PathBuf>,
        /// Phase start; defaults to the earliest mined post.
        #[arg(long)]
        start: Option<String>,
    },
    /// Drift report per step over a post stream.
    Drift(DriftArgs),
    /// Phase manifest from drift boundaries.
    Phases(DriftArgs),
    /// Apply one lifecycle step from an event file.
    Update {
        #[arg(long, default_value = "dual")]
        mode: String,
        /// JSON lines tagged `"kind": "announcement"` or `"kind": "post"`.
        #[arg(long)]
        events: PathBuf,
        /// Step time; defaults to the latest event.
        #[arg(long)]
        now: Option<String>,
        #[arg(long)]
        target_size: Option<usize>,
        #[arg(long)]
        assets: Option<PathBuf>,
    },
    /// Retrieval metrics for a slice.
    Eval {
        /// Slice directory; the latest slice of the store when unset.
        #[arg(long)]
        slice: Option<PathBuf>,
        #[arg(long, default_value = "bm25")]
        retriever: String,
        #[arg(long, default_value = "1,3,5")]
        k: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate answers from retrieved context and judge them.
    Judge {
        #[arg(long)]
        slice: Option<PathBuf>,
        #[arg(long, default_value = "bm25")]
        retriever: String,
        #[arg(long, default_value_t = crate::judge::DEFAULT_GENERATION_K)]
        k: usize,
        #[arg(long, default_value = "correctness,faithfulness")]
        criteria: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Agreement between judge scores and human labels.
    Agreement {
        /// JSON lines `{"id": .., "score": 0|1|2}`.
        #[arg(long)]
        llm: PathBuf,
        /// JSON lines `{"id": .., "votes": [true, false, ..]}`.
        #[arg(long)]
        human: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Consolidated report over every slice of the store.
    Report {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct DriftArgs {
    #[arg(long)]
    pub posts: PathBuf,
    #[arg(long)]
    pub from: String,
    #[arg(long)]
    pub to: String,
    #[arg(long)]
    pub window: Option<String>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub step: Option<String>,
    #[arg(long)]
    pub min_posts: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parse argv, run, and map the outcome to an exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    EXIT_OK
                }
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_provider() {
        EXIT_PROVIDER
    } else {
        EXIT_INVALID
    }
}

/// Seconds since the epoch, `YYYY-MM-DD` (UTC midnight) or RFC 3339.
pub fn parse_time(s: &str) -> Result<Timestamp> {
    let s = s.trim();
    if let Ok(n) = s.parse::<i64>() {
        return Ok(n);
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Ok(d
            .and_hms_opt(0, 0, 0)
            .expect("midnight")
            .and_utc()
            .timestamp());
    }
    DateTime::parse_from_rfc3339(s)
        .map(|d| d.timestamp())
        .map_err(|_| Error::Validation(format!("cannot parse time {s:?}")))
}

struct Env {
    cfg: RunConfig,
    taxonomy: Taxonomy,
    force: bool,
}

impl Env {
    fn store(&self) -> Store {
        Store::new(&self.cfg.paths.store)
    }

    fn completion(&self) -> Result<Arc<dyn CompletionProvider>> {
        self.cfg.completion(&self.taxonomy)
    }

    fn embedder(&self) -> Result<Arc<dyn EmbeddingProvider>> {
        self.cfg.embedder()
    }

    /// True when `path` exists and the run should leave it alone.
    fn keep(&self, path: &Path) -> bool {
        if path.exists() && !self.force {
            log::info!("{} exists; pass --force to recompute", path.display());
            return true;
        }
        false
    }
}

fn load_env(cli: &Cli) -> Result<Env> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = &cli.store {
        cfg.paths.store = s.clone();
    }
    if let Some(t) = &cli.taxonomy {
        cfg.paths.taxonomy = Some(t.clone());
    }
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
    }
    cfg.deterministic |= cli.deterministic;
    cfg.synthesis.seed = cfg.seed();
    cfg.validate()?;
    let taxonomy = cfg.taxonomy()?;
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
        {
            log::debug!("thread pool already configured: {e}");
        }
    }
    Ok(Env {
        cfg,
        taxonomy,
        force: cli.force,
    })
}

fn execute(cli: &Cli) -> Result<()> {
    let env = load_env(cli)?;
    match &cli.command {
        Command::Ingest {
            input,
            out,
            max_chars,
            overlap,
        } => cmd_ingest(&env, input, out, *max_chars, *overlap),
        Command::Mine {
            posts,
            out_dir,
            review,
        } => cmd_mine(&env, posts, out_dir.as_deref(), review.as_deref()),
        Command::Synth {
            snippets,
            n,
            topic,
            ablation,
            assets,
            start,
        } => cmd_synth(
            &env,
            snippets,
            *n,
            topic.as_deref(),
            ablation.as_deref(),
            assets.as_deref(),
            start.as_deref(),
        ),
        Command::Drift(a) => cmd_drift(&env, a, false),
        Command::Phases(a) => cmd_drift(&env, a, true),
        Command::Update {
            mode,
            events,
            now,
            target_size,
            assets,
        } => cmd_update(
            &env,
            mode,
            events,
            now.as_deref(),
            *target_size,
            assets.as_deref(),
        ),
        Command::Eval {
            slice,
            retriever,
            k,
            out,
        } => cmd_eval(&env, slice.as_deref(), retriever, k, out.as_deref()),
        Command::Judge {
            slice,
            retriever,
            k,
            criteria,
            out,
        } => cmd_judge(
            &env,
            slice.as_deref(),
            retriever,
            *k,
            criteria,
            out.as_deref(),
        ),
        Command::Agreement { llm, human, out } => cmd_agreement(&env, llm, human, out),
        Command::Report { out, csv } => cmd_report(&env, out.as_deref(), csv.as_deref()),
    }
}

fn cmd_ingest(
    env: &Env,
    input: &Path,
    out: &Path,
    max_chars: Option<usize>,
    overlap: Option<usize>,
) -> Result<()> {
    if env.keep(out) {
        return Ok(());
    }
    let mut policy = env.cfg.chunk_policy()?;
    if let Some(m) = max_chars {
        policy.max_chars = m;
    }
    if let Some(o) = overlap {
        policy.overlap_chars = o;
    }
    let mut snippets = ingest(&list_jsonl(input)?, &policy)?;
    let extractor = env.cfg.extractor(env.completion()?)?;
    tag_entities(&mut snippets, &extractor)?;
    KnowledgeBase::new(snippets.clone())?;
    write_jsonl(out, &snippets)?;
    log::info!("wrote {} snippets to {}", snippets.len(), out.display());
    Ok(())
}

fn tag_entities(snippets: &mut [KnowledgeSnippet], extractor: &Extractor) -> Result<()> {
    let sets = snippets
        .par_iter()
        .map(|s| extract_entities(&s.content, extractor))
        .collect::<Result<Vec<_>>>()?;
    for (s, e) in snippets.iter_mut().zip(sets) {
        s.entities = e;
    }
    Ok(())
}

fn cmd_mine(env: &Env, posts: &Path, out_dir: Option<&Path>, review: Option<&Path>) -> Result<()> {
    let dir = out_dir.unwrap_or(&env.cfg.paths.assets);
    if env.keep(&dir.join("templates.jsonl")) {
        return Ok(());
    }
    let input: Vec<CommunityPost> = read_jsonl(posts)?;
    let review = match review.or(env.cfg.paths.review.as_deref()) {
        Some(p) => ReviewList::load(p)?,
        None => ReviewList::default(),
    };
    let config = MiningConfig {
        dedup_threshold: env.cfg.mining.dedup_threshold,
        persona_floor: env.cfg.mining.persona_floor,
    };
    let provider = env.completion()?;
    let embedder = env.embedder()?;
    let mined = mine(
        &input,
        &env.taxonomy,
        &*provider,
        &*embedder,
        &config,
        &review,
    )?;
    write_jsonl(&dir.join("posts.jsonl"), &mined.posts)?;
    write_jsonl(&dir.join("personas.jsonl"), &mined.personas)?;
    write_jsonl(&dir.join("templates.jsonl"), &mined.templates)?;
    log::info!(
        "mined {} templates and {} personas from {} posts",
        mined.templates.len(),
        mined.personas.len(),
        mined.posts.len()
    );
    Ok(())
}

struct Assets {
    posts: Vec<CommunityPost>,
    templates: Vec<QuestionTemplate>,
    personas: Vec<Persona>,
}

fn load_assets(env: &Env, dir: Option<&Path>) -> Result<Assets> {
    let dir = dir.unwrap_or(&env.cfg.paths.assets);
    let optional = |name: &str| -> Result<Option<PathBuf>> {
        let p = dir.join(name);
        Ok(p.exists().then_some(p))
    };
    let templates = read_jsonl(&dir.join("templates.jsonl"))?;
    let personas = match optional("personas.jsonl")? {
        Some(p) => read_jsonl(&p)?,
        None => Vec::new(),
    };
    let posts = match optional("posts.jsonl")? {
        Some(p) => read_jsonl(&p)?,
        None => Vec::new(),
    };
    Ok(Assets {
        posts,
        templates,
        personas,
    })
}

/// Topic plan of `n` tuples following the mined post distribution, or spread
/// evenly over template topics when no tagged posts exist.
fn synthesis_plan(n: usize, assets: &Assets) -> Result<Vec<TopicId>> {
    let tagged: Vec<&TopicId> = assets
        .posts
        .iter()
        .filter_map(|p| p.topic.as_ref())
        .collect();
    let dist = if tagged.is_empty() {
        let topics: BTreeSet<&TopicId> = assets.templates.iter().map(|t| &t.topic).collect();
        TopicDistribution::from_topics(topics)
    } else {
        TopicDistribution::from_topics(tagged)
    };
    if dist.is_zero_count() {
        return Err(Error::Validation("no topics to synthesize for".into()));
    }
    Ok(target_counts(&dist, n)
        .into_iter()
        .flat_map(|(t, c)| std::iter::repeat_n(t, c))
        .collect())
}

fn cmd_synth(
    env: &Env,
    snippets: &Path,
    n: usize,
    topic: Option<&str>,
    ablation: Option<&str>,
    assets_dir: Option<&Path>,
    start: Option<&str>,
) -> Result<()> {
    let store = env.store();
    if env.keep(&store.slice_dir(0)) {
        return Ok(());
    }
    let mut config = env.cfg.synthesis.clone();
    if let Some(a) = ablation {
        config.ablation = a.parse::<Ablation>()?;
    }
    config.validate()?;
    let assets = load_assets(env, assets_dir)?;
    let kb = KnowledgeBase::new(read_jsonl(snippets)?)?;
    let plan = match topic {
        Some(t) => {
            let t: TopicId = t.parse()?;
            env.taxonomy.validate(&t)?;
            vec![t; n]
        }
        None => synthesis_plan(n, &assets)?,
    };
    let provider = env.completion()?;
    let embedder = env.embedder()?;
    let ekb = EmbeddedKb::build(&kb, &*embedder)?;
    let personas = PersonaIndex::build(&assets.personas, &*embedder)?;
    let synth = Synthesizer {
        provider: &*provider,
        embedder: &*embedder,
        taxonomy: &env.taxonomy,
        templates: &assets.templates,
        personas: &personas,
        kb: &ekb,
        config: &config,
    };
    let batch = synth.synthesize_many(&plan, &BTreeSet::new(), 0);
    for (t, e) in &batch.failures {
        log::warn!("synthesis failed for {t}: {e}");
    }
    let phase_start = match start {
        Some(s) => parse_time(s)?,
        None => assets.posts.iter().map(|p| p.created_at).min().unwrap_or(0),
    };
    let slice = BenchmarkSlice {
        index: 0,
        kb_version: kb.version().to_string(),
        tuples: batch.tuples,
        phase_start,
        phase_end: None,
        parent_index: None,
    };
    store.append_posts(&assets.posts)?;
    store.commit(&slice, &kb, None, None, env.force)?;
    log::info!(
        "slice 000: {} tuples, {} failures",
        slice.tuples.len(),
        batch.failures.len()
    );
    Ok(())
}

/// Tag posts that lack a known topic.
fn classify_posts(
    posts: &mut [CommunityPost],
    taxonomy: &Taxonomy,
    provider: &dyn CompletionProvider,
) -> Result<()> {
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
    Ok(())
}

fn drift_config(env: &Env, a: &DriftArgs) -> Result<DriftConfig> {
    let mut d = env.cfg.drift.resolve()?;
    if let Some(w) = &a.window {
        d.window = parse_duration(w)?;
    }
    if let Some(s) = &a.step {
        d.step = parse_duration(s)?;
    }
    if let Some(g) = a.gamma {
        d.gamma = g;
    }
    if let Some(l) = a.lambda {
        d.threshold = l;
    }
    if let Some(m) = a.min_posts {
        d.min_posts = m;
    }
    d.validate()?;
    Ok(d)
}

#[derive(Serialize)]
struct DriftOutput {
    config: DriftConfig,
    boundaries: Vec<Timestamp>,
    reports: Vec<DriftReport>,
}

#[derive(Serialize)]
struct PhaseManifest {
    start: Timestamp,
    end: Timestamp,
    boundaries: Vec<Timestamp>,
    phases: Vec<PhaseEntry>,
}

#[derive(Serialize)]
struct PhaseEntry {
    index: usize,
    start: Timestamp,
    end: Timestamp,
}

fn cmd_drift(env: &Env, a: &DriftArgs, phases: bool) -> Result<()> {
    if env.keep(&a.out) {
        return Ok(());
    }
    let config = drift_config(env, a)?;
    let (from, to) = (parse_time(&a.from)?, parse_time(&a.to)?);
    let mut posts: Vec<CommunityPost> = read_jsonl(&a.posts)?;
    classify_posts(&mut posts, &env.taxonomy, &*env.completion()?)?;
    let part = partition_phases(&posts, from, to, &config)?;
    if phases {
        let manifest = PhaseManifest {
            start: part.start,
            end: part.end,
            boundaries: part.boundaries.clone(),
            phases: part
                .phases()
                .into_iter()
                .enumerate()
                .map(|(index, (start, end))| PhaseEntry { index, start, end })
                .collect(),
        };
        write_json(&a.out, &manifest)
    } else {
        write_json(
            &a.out,
            &DriftOutput {
                config,
                boundaries: part.boundaries,
                reports: part.reports,
            },
        )
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Event {
    Announcement {
        id: String,
        text: String,
        timestamp: Timestamp,
    },
    Post(CommunityPost),
}

fn cmd_update(
    env: &Env,
    mode: &str,
    events_path: &Path,
    now: Option<&str>,
    target_size: Option<usize>,
    assets_dir: Option<&Path>,
) -> Result<()> {
    let mode: UpdateMode = mode.parse()?;
    let store = env.store();
    let latest = store.latest_index()?.ok_or_else(|| {
        Error::Validation(format!("store {} has no slices", store.root().display()))
    })?;
    let raw = std::fs::read_to_string(events_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(events_path.to_path_buf())
        } else {
            Error::io(events_path, e)
        }
    })?;
    let events: Vec<Event> = read_jsonl(events_path)?;
    let now = match now {
        Some(s) => parse_time(s)?,
        None => events
            .iter()
            .map(|e| match e {
                Event::Announcement { timestamp, .. } => *timestamp,
                Event::Post(p) => p.created_at,
            })
            .max()
            .ok_or_else(|| Error::Validation("no events and no --now given".into()))?,
    };
    let digest = sha256_hex(&[
        &raw,
        &mode.to_string(),
        &now.to_string(),
        &format!("{target_size:?}"),
        &env.cfg.seed().to_string(),
    ]);
    let base = if store.provenance(latest)?.as_deref() == Some(digest.as_str()) {
        if !env.force {
            log::info!("slice {latest:03} already holds these events; pass --force to recompute");
            return Ok(());
        }
        store
            .load_manifest(latest)?
            .parent_index
            .ok_or_else(|| Error::Validation(format!("slice {latest:03} has no parent")))?
    } else {
        latest
    };
    let (slice, kb) = store.load_slice(base)?;

    let provider = env.completion()?;
    let embedder = env.embedder()?;
    let extractor = env.cfg.extractor(provider.clone())?;
    let policy = env.cfg.chunk_policy()?;
    let mut announcements = Vec::new();
    let mut new_posts = Vec::new();
    for e in events {
        match e {
            Event::Announcement {
                id,
                text,
                timestamp,
            } => announcements.push(Announcement::prepare(
                &id,
                &text,
                timestamp,
                &env.cfg.game_id,
                &extractor,
                &policy,
            )?),
            Event::Post(p) => new_posts.push(p),
        }
    }
    classify_posts(&mut new_posts, &env.taxonomy, &*provider)?;
    let posts = store.append_posts(&new_posts)?;

    let assets = load_assets(env, assets_dir)?;
    let personas = PersonaIndex::build(&assets.personas, &*embedder)?;
    let ctx = SynthContext {
        provider: &*provider,
        embedder: &*embedder,
        taxonomy: &env.taxonomy,
        templates: &assets.templates,
        personas: &personas,
        config: &env.cfg.synthesis,
    };
    let cfg = StepConfig {
        mode,
        drift: env.cfg.drift.resolve()?,
        now,
        target_size,
    };
    let out = step(&slice, &kb, &announcements, &posts, &cfg, &ctx)?;
    store.commit(
        &out.slice,
        &out.kb,
        Some(&out.report),
        Some(&digest),
        env.force,
    )?;
    log::info!(
        "slice {:03}: {} tuples, {} stale, {} regenerated, resampled: {}",
        out.slice.index,
        out.slice.tuples.len(),
        out.report.stale_ids.len(),
        out.report.regenerated,
        out.report.resampled
    );
    Ok(())
}

fn load_target(env: &Env, slice: Option<&Path>) -> Result<(BenchmarkSlice, KnowledgeBase)> {
    match slice {
        Some(dir) => load_slice_dir(dir, None),
        None => env.store().load_latest(),
    }
}

fn with_retriever<T>(
    env: &Env,
    kind: &str,
    kb: &KnowledgeBase,
    f: impl FnOnce(&dyn Retriever) -> Result<T>,
) -> Result<T> {
    match kind.parse::<RetrieverKind>()? {
        RetrieverKind::Bm25 => f(&Bm25Index::from_snippets(kb.snippets(), env.cfg.bm25)?),
        RetrieverKind::Dense => {
            let embedder = env.embedder()?;
            f(&DenseRetriever::build(kb, &*embedder)?)
        }
    }
}

fn parse_ks(s: &str) -> Result<Vec<usize>> {
    let ks = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad K value {p:?}")))
        })
        .collect::<Result<BTreeSet<_>>>()?;
    Ok(ks.into_iter().collect())
}

fn cmd_eval(
    env: &Env,
    slice: Option<&Path>,
    retriever: &str,
    k: &str,
    out: Option<&Path>,
) -> Result<()> {
    let ks = parse_ks(k)?;
    let (slice, kb) = load_target(env, slice)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| {
        env.store()
            .root()
            .join("evals")
            .join(format!("{:03}-{retriever}.json", slice.index))
    });
    if env.keep(&out) {
        return Ok(());
    }
    let result = with_retriever(env, retriever, &kb, |r| evaluate_phase(&slice, r, &ks))?;
    write_json(&out, &result)
}

fn cmd_judge(
    env: &Env,
    slice: Option<&Path>,
    retriever: &str,
    k: usize,
    criteria: &str,
    out: Option<&Path>,
) -> Result<()> {
    let criteria = parse_criteria(criteria)?;
    let (slice, kb) = load_target(env, slice)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| {
        env.store()
            .root()
            .join("judge")
            .join(format!("{:03}-{retriever}.json", slice.index))
    });
    if env.keep(&out) {
        return Ok(());
    }
    let provider = env.completion()?;
    let result = with_retriever(env, retriever, &kb, |r| {
        crate::judge::generation_eval(&slice, &kb, r, &*provider, &*provider, k, &criteria)
    })?;
    write_json(&out, &result)
}

#[derive(Deserialize)]
struct LlmLabel {
    id: String,
    score: u8,
}

#[derive(Deserialize)]
struct HumanLabel {
    id: String,
    votes: Vec<bool>,
}

#[derive(Serialize)]
struct AgreementOutput {
    items: usize,
    agreement: AgreementTable,
    /// Inter-rater alpha among the human raters, when defined.
    human_alpha: Option<f64>,
}

fn cmd_agreement(env: &Env, llm: &Path, human: &Path, out: &Path) -> Result<()> {
    if env.keep(out) {
        return Ok(());
    }
    let llm: Vec<LlmLabel> = read_jsonl(llm)?;
    let human: BTreeMap<String, Vec<bool>> = read_jsonl::<HumanLabel>(human)?
        .into_iter()
        .map(|h| (h.id, h.votes))
        .collect();
    let mut predicted = Vec::new();
    let mut gold = Vec::new();
    let mut matrix: Vec<Vec<Option<u32>>> = Vec::new();
    for (i, l) in llm.iter().enumerate() {
        let votes = human
            .get(&l.id)
            .ok_or_else(|| Error::Validation(format!("no human labels for {}", l.id)))?;
        predicted.push(lenient_map(l.score)?);
        gold.push(majority_vote(votes)?);
        if matrix.len() < votes.len() {
            matrix.resize(votes.len(), vec![None; llm.len()]);
        }
        for (r, v) in votes.iter().enumerate() {
            matrix[r][i] = Some(u32::from(*v));
        }
    }
    let human_alpha = if matrix.len() >= 2 {
        match krippendorff_alpha(&matrix) {
            Ok(a) => Some(a),
            Err(Error::UndefinedAlpha(m)) => {
                log::warn!("human alpha undefined: {m}");
                None
            }
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    write_json(
        out,
        &AgreementOutput {
            items: llm.len(),
            agreement: agreement(&predicted, &gold)?,
            human_alpha,
        },
    )
}

#[derive(Debug, Serialize)]
struct DriftTrace {
    wjsd: f64,
    flagged: bool,
    low_sample: bool,
    current_window: (Timestamp, Timestamp),
    reference_window: (Timestamp, Timestamp),
}

#[derive(Debug, Serialize)]
struct SliceEntry {
    index: u32,
    parent_index: Option<u32>,
    mode: Option<UpdateMode>,
    kb_version: String,
    kb_size: usize,
    phase_start: Timestamp,
    tuples: usize,
    composition: CompositionReport,
    topics: BTreeMap<TopicId, usize>,
    drift: Option<DriftTrace>,
    stale: usize,
    regenerated: usize,
    evicted: usize,
    added: usize,
    failures: usize,
    retrieval: BTreeMap<String, PhaseEval>,
    generation: BTreeMap<String, GenerationEval>,
}

#[derive(Debug, Serialize)]
struct Report {
    slices: Vec<SliceEntry>,
}

/// `<dir>/<NNN>-<name>.json` files of one slice, keyed by name.
fn slice_outputs<T: serde::de::DeserializeOwned>(
    dir: &Path,
    index: u32,
) -> Result<BTreeMap<String, T>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    let prefix = format!("{index:03}-");
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .collect();
    names.sort();
    for name in names {
        if let Some(rest) = name
            .strip_prefix(&prefix)
            .and_then(|r| r.strip_suffix(".json"))
        {
            out.insert(rest.to_string(), read_json(&dir.join(&name))?);
        }
    }
    Ok(out)
}

fn cmd_report(env: &Env, out: Option<&Path>, csv_path: Option<&Path>) -> Result<()> {
    let store = env.store();
    let indices = store.slice_indices()?;
    if indices.is_empty() {
        return Err(Error::Validation(format!(
            "store {} has no slices",
            store.root().display()
        )));
    }
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| store.root().join("report.json"));
    if env.keep(&out) {
        return Ok(());
    }
    let mut slices = Vec::new();
    for i in indices {
        let (slice, kb) = store.load_slice(i)?;
        let step = store.load_report(i)?;
        let mut topics = BTreeMap::new();
        for t in &slice.tuples {
            *topics.entry(t.topic.clone()).or_insert(0) += 1;
        }
        slices.push(SliceEntry {
            index: i,
            parent_index: slice.parent_index,
            mode: step.as_ref().map(|r| r.mode),
            kb_version: slice.kb_version.clone(),
            kb_size: kb.len(),
            phase_start: slice.phase_start,
            tuples: slice.tuples.len(),
            composition: CompositionReport::of(&slice.tuples),
            topics,
            drift: step
                .as_ref()
                .and_then(|r| r.drift.as_ref())
                .map(|d| DriftTrace {
                    wjsd: d.wjsd,
                    flagged: d.flagged,
                    low_sample: d.low_sample,
                    current_window: d.current_window,
                    reference_window: d.reference_window,
                }),
            stale: step.as_ref().map_or(0, |r| r.stale_ids.len()),
            regenerated: step.as_ref().map_or(0, |r| r.regenerated),
            evicted: step.as_ref().map_or(0, |r| r.evicted.len()),
            added: step.as_ref().map_or(0, |r| r.added),
            failures: step.as_ref().map_or(0, |r| r.failures.len()),
            retrieval: slice_outputs(&store.root().join("evals"), i)?,
            generation: slice_outputs(&store.root().join("judge"), i)?,
        });
    }
    let report = Report { slices };
    write_json(&out, &report)?;
    if let Some(p) = csv_path {
        write_csv(p, &report)?;
    }
    Ok(())
}

/// One row per slice and retrieval setting; slices without evaluations get
/// one row with empty metric columns.
fn write_csv(path: &Path, report: &Report) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    let wrap = |e: csv::Error| Error::Validation(format!("{}: {e}", path.display()));
    w.write_record([
        "slice",
        "mode",
        "tuples",
        "inherited",
        "knowledge_update",
        "interest_update",
        "wjsd",
        "flagged",
        "retriever",
        "k",
        "recall",
        "precision",
        "f1",
        "ndcg",
    ])
    .map_err(wrap)?;
    for s in &report.slices {
        let base = vec![
            s.index.to_string(),
            s.mode.map(|m| m.to_string()).unwrap_or_default(),
            s.tuples.to_string(),
            s.composition.inherited.fraction.to_string(),
            s.composition.knowledge.fraction.to_string(),
            s.composition.interest.fraction.to_string(),
            s.drift
                .as_ref()
                .map(|d| d.wjsd.to_string())
                .unwrap_or_default(),
            s.drift
                .as_ref()
                .map(|d| d.flagged.to_string())
                .unwrap_or_default(),
        ];
        let mut wrote = false;
        for (name, eval) in &s.retrieval {
            for row in &eval.overall {
                let m = row.metrics;
                let mut rec = base.clone();
                rec.extend([
                    name.clone(),
                    row.k.to_string(),
                    m.recall.to_string(),
                    m.precision.to_string(),
                    m.f1.to_string(),
                    m.ndcg.to_string(),
                ]);
                w.write_record(&rec).map_err(wrap)?;
                wrote = true;
            }
        }
        if !wrote {
            let mut rec = base;
            rec.extend(std::iter::repeat_n(String::new(), 6));
            w.write_record(&rec).map_err(wrap)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_formats() {
        assert_eq!(parse_time("86400").unwrap(), 86_400);
        assert_eq!(parse_time("1970-01-02").unwrap(), 86_400);
        assert_eq!(parse_time("1970-01-02T00:00:00Z").unwrap(), 86_400);
        assert!(parse_time("yesterday").is_err());
    }

    #[test]
    fn usage_errors_exit_64() {
        assert_eq!(run(["chronoplay", "drift", "--help"]), EXIT_OK);
        assert_eq!(run(["chronoplay", "drift", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["chronoplay", "frobnicate"]), EXIT_USAGE);
    }

    #[test]
    fn k_lists() {
        assert_eq!(parse_ks("5,1,3,1").unwrap(), vec![1, 3, 5]);
        assert!(parse_ks("1,x").is_err());
    }

    #[test]
    fn events_parse() {
        let a: Event = serde_json::from_str(
            r#"{"kind":"announcement","id":"a1","text":"Patch 1.2","timestamp":5}"#,
        )
        .unwrap();
        assert!(matches!(a, Event::Announcement { timestamp: 5, .. }));
        let p: Event = serde_json::from_str(
            r#"{"kind":"post","post_id":"p","text":"hi","created_at":3,"game_id":"g"}"#,
        )
        .unwrap();
        assert!(matches!(
            p,
            Event::Post(CommunityPost { created_at: 3, .. })
        ));
    }
}
