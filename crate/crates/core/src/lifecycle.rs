//! Moving a slice forward: knowledge-evolution invalidation and regeneration,
//! interest-drift resampling, and the composition report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::community::{CommunityPost, QuestionTemplate};
use crate::drift::{detect_drift, DriftConfig, DriftReport, TopicDistribution};
use crate::entity::{extract_entities, EntityId, Extractor};
use crate::error::{Error, Result};
use crate::ingest::{chunk_document, ChunkPolicy, RawDocument};
use crate::model::{
    age_key, BenchmarkSlice, EvalTuple, KnowledgeBase, KnowledgeSnippet, Origin, SourceKind,
    Timestamp,
};
use crate::providers::{CompletionProvider, EmbeddingProvider};
use crate::synthesis::{EmbeddedKb, PersonaIndex, SynthesisBatch, SynthesisConfig, Synthesizer};
use crate::taxonomy::{Taxonomy, TopicId};
use crate::util::sha256_u64;

/// A new official announcement, chunked and entity-tagged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Announcement {
    pub id: String,
    pub text: String,
    pub timestamp: Timestamp,
    pub snippets: Vec<KnowledgeSnippet>,
    pub entities: BTreeSet<EntityId>,
}

impl Announcement {
    pub fn prepare(
        id: &str,
        text: &str,
        timestamp: Timestamp,
        game_id: &str,
        extractor: &Extractor,
        policy: &ChunkPolicy,
    ) -> Result<Self> {
        let doc = RawDocument {
            doc_id: format!("ann-{id}"),
            title: String::new(),
            body: text.to_string(),
            published_at: Some(timestamp),
            source_kind: SourceKind::OfficialUpdate,
            game_id: game_id.to_string(),
        };
        let mut snippets = chunk_document(&doc, policy)?;
        for s in &mut snippets {
            s.entities = extract_entities(&s.content, extractor)?;
        }
        Ok(Self {
            id: id.to_string(),
            text: text.to_string(),
            timestamp,
            snippets,
            entities: extract_entities(text, extractor)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    Dual,
    KnowledgeOnly,
    InterestOnly,
}

impl FromStr for UpdateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(Self::Dual),
            "knowledge-only" | "knowledge_only" => Ok(Self::KnowledgeOnly),
            "interest-only" | "interest_only" => Ok(Self::InterestOnly),
            other => Err(Error::Config(format!("unknown update mode {other:?}"))),
        }
    }
}

impl fmt::Display for UpdateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dual => "dual",
            Self::KnowledgeOnly => "knowledge-only",
            Self::InterestOnly => "interest-only",
        })
    }
}

/// `(stale, valid)`: tuples whose entity set meets `update`, and the rest.
pub fn find_stale(
    tuples: &[EvalTuple],
    update: &BTreeSet<EntityId>,
) -> (Vec<EvalTuple>, Vec<EvalTuple>) {
    tuples
        .iter()
        .cloned()
        .partition(|t| !t.entities.is_disjoint(update))
}

/// Providers and bases shared by every regeneration.
pub struct SynthContext<'a> {
    pub provider: &'a dyn CompletionProvider,
    pub embedder: &'a dyn EmbeddingProvider,
    pub taxonomy: &'a Taxonomy,
    pub templates: &'a [QuestionTemplate],
    pub personas: &'a PersonaIndex,
    pub config: &'a SynthesisConfig,
}

impl SynthContext<'_> {
    pub fn synthesize(
        &self,
        kb: &KnowledgeBase,
        plan: &[TopicId],
        existing: &BTreeSet<String>,
        ordinal_base: u64,
    ) -> Result<SynthesisBatch> {
        if plan.is_empty() {
            return Ok(SynthesisBatch {
                tuples: Vec::new(),
                failures: Vec::new(),
            });
        }
        let ekb = EmbeddedKb::build(kb, self.embedder)?;
        let s = Synthesizer {
            provider: self.provider,
            embedder: self.embedder,
            taxonomy: self.taxonomy,
            templates: self.templates,
            personas: self.personas,
            kb: &ekb,
            config: self.config,
        };
        Ok(s.synthesize_many(plan, existing, ordinal_base))
    }
}

fn ordinal_base(parts: &[&str]) -> u64 {
    sha256_u64(parts) >> 16
}

/// A synthesis failure recorded against its topic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub topic: TopicId,
    pub message: String,
}

fn failures(batch: &SynthesisBatch) -> Vec<Failure> {
    batch
        .failures
        .iter()
        .map(|(t, e)| Failure {
            topic: t.clone(),
            message: match e {
                Error::SynthesisExhausted { transcript, .. } => {
                    format!("{e}: {}", transcript.join("; "))
                }
                other => other.to_string(),
            },
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct KnowledgeUpdateOutcome {
    pub slice: BenchmarkSlice,
    pub kb: KnowledgeBase,
    pub stale_ids: Vec<String>,
    pub regenerated: usize,
    pub failures: Vec<Failure>,
}

fn check_slice_kb(slice: &BenchmarkSlice, kb: &KnowledgeBase) -> Result<()> {
    if slice.kb_version != kb.version() {
        return Err(Error::Lookup(format!(
            "slice {} expects kb {} but got {}",
            slice.index,
            slice.kb_version,
            kb.version()
        )));
    }
    Ok(())
}

fn regenerate(
    valid: Vec<EvalTuple>,
    stale: &[EvalTuple],
    kb: &KnowledgeBase,
    ctx: &SynthContext<'_>,
    salt: &[&str],
) -> Result<(Vec<EvalTuple>, usize, Vec<Failure>)> {
    let plan: Vec<TopicId> = stale.iter().map(|t| t.topic.clone()).collect();
    let existing: BTreeSet<String> = valid.iter().chain(stale).map(|t| t.id.clone()).collect();
    let batch = ctx.synthesize(kb, &plan, &existing, ordinal_base(salt))?;
    let fails = failures(&batch);
    let n = batch.tuples.len();
    let mut out = valid;
    out.extend(batch.tuples.into_iter().map(|mut t| {
        t.origin = Origin::KnowledgeUpdate;
        t
    }));
    Ok((out, n, fails))
}

/// `D' = D_valid + regenerated`, `K' = K + announcement snippets`. Origins
/// of valid tuples are left as they are.
pub fn apply_knowledge_update(
    slice: &BenchmarkSlice,
    kb: &KnowledgeBase,
    announcement: &Announcement,
    ctx: &SynthContext<'_>,
) -> Result<KnowledgeUpdateOutcome> {
    check_slice_kb(slice, kb)?;
    let new_kb = kb.union(&announcement.snippets)?;
    let (stale, valid) = find_stale(&slice.tuples, &announcement.entities);
    let index = slice.index + 1;
    let (tuples, regenerated, failures) = regenerate(
        valid,
        &stale,
        &new_kb,
        ctx,
        &["knowledge", &index.to_string(), &announcement.id],
    )?;
    Ok(KnowledgeUpdateOutcome {
        slice: BenchmarkSlice {
            index,
            kb_version: new_kb.version().to_string(),
            tuples,
            phase_start: slice.phase_start,
            phase_end: None,
            parent_index: Some(slice.index),
        },
        kb: new_kb,
        stale_ids: stale.iter().map(|t| t.id.clone()).collect(),
        regenerated,
        failures,
    })
}

/// Largest-remainder apportionment of `n` over `target`. Remainder ties go
/// to the larger mass, then the smaller topic id.
pub fn target_counts(target: &TopicDistribution, n: usize) -> BTreeMap<TopicId, usize> {
    let mut counts: BTreeMap<TopicId, usize> = target.mass.keys().map(|k| (k.clone(), 0)).collect();
    if n == 0 || target.is_zero_count() {
        return counts;
    }
    let mut rema = Vec::with_capacity(target.mass.len());
    let mut assigned = 0usize;
    for (k, &m) in &target.mass {
        let quota = n as f64 * m;
        let floor = (quota + 1e-9).floor();
        let c = (floor as usize).min(n);
        counts.insert(k.clone(), c);
        assigned += c;
        rema.push(((quota - floor).max(0.0), m, k.clone()));
    }
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-9;
    rema.sort_by(|a, b| {
        let by_rem = if close(a.0, b.0) {
            std::cmp::Ordering::Equal
        } else {
            b.0.total_cmp(&a.0)
        };
        let by_mass = if close(a.1, b.1) {
            std::cmp::Ordering::Equal
        } else {
            b.1.total_cmp(&a.1)
        };
        by_rem.then(by_mass).then_with(|| a.2.cmp(&b.2))
    });
    for (_, _, k) in rema.iter().cycle().take(n.saturating_sub(assigned)) {
        *counts.get_mut(k).expect("present") += 1;
    }
    counts
}

#[derive(Debug, Clone)]
pub struct InterestOutcome {
    pub slice: BenchmarkSlice,
    pub targets: BTreeMap<TopicId, usize>,
    pub evicted: Vec<String>,
    pub added: usize,
    /// Topics left short of target after synthesis failures.
    pub shortfall: BTreeMap<TopicId, usize>,
    pub failures: Vec<Failure>,
}

struct Resampled {
    tuples: Vec<EvalTuple>,
    targets: BTreeMap<TopicId, usize>,
    evicted: Vec<String>,
    added: usize,
    shortfall: BTreeMap<TopicId, usize>,
    failures: Vec<Failure>,
}

fn resample(
    tuples: Vec<EvalTuple>,
    kb: &KnowledgeBase,
    pc: &TopicDistribution,
    n: usize,
    ctx: &SynthContext<'_>,
    salt: &[&str],
) -> Result<Resampled> {
    pc.check()?;
    let targets = target_counts(pc, n);
    let mut by_topic: BTreeMap<TopicId, Vec<&EvalTuple>> = BTreeMap::new();
    for t in &tuples {
        by_topic.entry(t.topic.clone()).or_default().push(t);
    }
    let mut evict = BTreeSet::new();
    let mut plan = Vec::new();
    let topics: BTreeSet<TopicId> = by_topic.keys().chain(targets.keys()).cloned().collect();
    for topic in &topics {
        let have = by_topic.get(topic).map_or(0, Vec::len);
        let want = targets.get(topic).copied().unwrap_or(0);
        if have > want {
            let mut group = by_topic[topic].clone();
            group.sort_by(|a, b| age_key(a).cmp(&age_key(b)));
            evict.extend(group.iter().take(have - want).map(|t| t.id.clone()));
        } else {
            plan.extend(std::iter::repeat_n(topic.clone(), want - have));
        }
    }
    let existing: BTreeSet<String> = tuples.iter().map(|t| t.id.clone()).collect();
    let evicted: Vec<String> = tuples
        .iter()
        .filter(|t| evict.contains(&t.id))
        .map(|t| t.id.clone())
        .collect();
    let mut kept: Vec<EvalTuple> = tuples
        .into_iter()
        .filter(|t| !evict.contains(&t.id))
        .collect();
    let batch = ctx.synthesize(kb, &plan, &existing, ordinal_base(salt))?;
    let fails = failures(&batch);
    let added = batch.tuples.len();
    let mut shortfall: BTreeMap<TopicId, usize> = BTreeMap::new();
    for t in &plan {
        *shortfall.entry(t.clone()).or_default() += 1;
    }
    for t in &batch.tuples {
        if let Some(c) = shortfall.get_mut(&t.topic) {
            *c -= 1;
        }
    }
    shortfall.retain(|_, c| *c > 0);
    kept.extend(batch.tuples.into_iter().map(|mut t| {
        t.origin = Origin::InterestUpdate;
        t
    }));
    Ok(Resampled {
        tuples: kept,
        targets,
        evicted,
        added,
        shortfall,
        failures: fails,
    })
}

/// Align the slice's topic counts with `pc` at size `n` (default `|D|`):
/// evict oldest tuples of surplus topics, synthesize for deficits. Retained
/// tuples become inherited; the kb is unchanged.
pub fn resample_for_interest(
    slice: &BenchmarkSlice,
    kb: &KnowledgeBase,
    pc: &TopicDistribution,
    n: Option<usize>,
    ctx: &SynthContext<'_>,
) -> Result<InterestOutcome> {
    check_slice_kb(slice, kb)?;
    let tuples: Vec<EvalTuple> = slice
        .tuples
        .iter()
        .cloned()
        .map(|mut t| {
            t.origin = Origin::Inherited;
            t
        })
        .collect();
    let n = n.unwrap_or(tuples.len());
    let index = slice.index + 1;
    let Resampled {
        tuples,
        targets,
        evicted,
        added,
        shortfall,
        failures,
    } = resample(tuples, kb, pc, n, ctx, &["interest", &index.to_string()])?;
    Ok(InterestOutcome {
        slice: BenchmarkSlice {
            index,
            kb_version: slice.kb_version.clone(),
            tuples,
            phase_start: slice.phase_start,
            phase_end: None,
            parent_index: Some(slice.index),
        },
        targets,
        evicted,
        added,
        shortfall,
        failures,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OriginShare {
    pub count: usize,
    pub fraction: f64,
}

/// Partition of a slice by origin; synthesized tuples count as inherited.
/// An empty slice reports zero fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositionReport {
    pub total: usize,
    pub inherited: OriginShare,
    pub knowledge: OriginShare,
    pub interest: OriginShare,
}

impl CompositionReport {
    pub fn of(tuples: &[EvalTuple]) -> Self {
        let total = tuples.len();
        let count = |f: fn(Origin) -> bool| tuples.iter().filter(|t| f(t.origin)).count();
        let share = |c: usize| OriginShare {
            count: c,
            fraction: if total == 0 {
                0.0
            } else {
                c as f64 / total as f64
            },
        };
        Self {
            total,
            inherited: share(count(|o| {
                matches!(o, Origin::Inherited | Origin::Synthesized)
            })),
            knowledge: share(count(|o| o == Origin::KnowledgeUpdate)),
            interest: share(count(|o| o == Origin::InterestUpdate)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepConfig {
    pub mode: UpdateMode,
    pub drift: DriftConfig,
    /// Current time `c`; announcements after it are rejected.
    pub now: Timestamp,
    /// Slice size after resampling; defaults to the size before it.
    pub target_size: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    pub mode: UpdateMode,
    pub index: u32,
    pub parent_index: u32,
    pub now: Timestamp,
    pub announcements_applied: Vec<String>,
    pub stale_ids: Vec<String>,
    pub regenerated: usize,
    pub drift: Option<DriftReport>,
    pub resampled: bool,
    pub evicted: Vec<String>,
    pub added: usize,
    pub shortfall: BTreeMap<TopicId, usize>,
    pub failures: Vec<Failure>,
    pub composition: CompositionReport,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub slice: BenchmarkSlice,
    pub kb: KnowledgeBase,
    pub report: StepReport,
}

/// One lifecycle step. Carried tuples start as inherited; knowledge updates
/// run in timestamp order, then drift resampling when the detector flags.
pub fn step(
    slice: &BenchmarkSlice,
    kb: &KnowledgeBase,
    announcements: &[Announcement],
    posts: &[CommunityPost],
    config: &StepConfig,
    ctx: &SynthContext<'_>,
) -> Result<StepOutcome> {
    check_slice_kb(slice, kb)?;
    if let Some(a) = announcements.iter().find(|a| a.timestamp > config.now) {
        return Err(Error::Validation(format!(
            "announcement {} at {} is after the step time {}",
            a.id, a.timestamp, config.now
        )));
    }
    let index = slice.index + 1;
    let mut tuples: Vec<EvalTuple> = slice
        .tuples
        .iter()
        .cloned()
        .map(|mut t| {
            t.origin = Origin::Inherited;
            t
        })
        .collect();
    let mut kb = kb.clone();
    let mut applied = Vec::new();
    let mut stale_ids = Vec::new();
    let mut regenerated = 0;
    let mut fails = Vec::new();

    if config.mode != UpdateMode::InterestOnly {
        let mut ordered: Vec<&Announcement> = announcements.iter().collect();
        ordered.sort_by(|a, b| (a.timestamp, &a.id).cmp(&(b.timestamp, &b.id)));
        for a in ordered {
            kb = kb.union(&a.snippets)?;
            let (stale, valid) = find_stale(&tuples, &a.entities);
            let (next, n, f) = regenerate(
                valid,
                &stale,
                &kb,
                ctx,
                &["knowledge", &index.to_string(), &a.id],
            )?;
            tuples = next;
            regenerated += n;
            fails.extend(f);
            stale_ids.extend(stale.into_iter().map(|t| t.id));
            applied.push(a.id.clone());
        }
    }

    let mut drift = None;
    let mut resampled = false;
    let mut evicted = Vec::new();
    let mut added = 0;
    let mut shortfall = BTreeMap::new();
    let mut phase_start = slice.phase_start;
    if config.mode != UpdateMode::KnowledgeOnly {
        let p = slice.phase_start.min(config.now);
        let report = detect_drift(posts, p, config.now, &config.drift)?;
        if report.flagged {
            let n = config.target_size.unwrap_or(tuples.len());
            let r = resample(
                tuples,
                &kb,
                &report.current,
                n,
                ctx,
                &["interest", &index.to_string()],
            )?;
            tuples = r.tuples;
            evicted = r.evicted;
            added = r.added;
            shortfall = r.shortfall;
            fails.extend(r.failures);
            resampled = true;
            phase_start = config.now;
        }
        drift = Some(report);
    }

    let composition = CompositionReport::of(&tuples);
    let new_slice = BenchmarkSlice {
        index,
        kb_version: kb.version().to_string(),
        tuples,
        phase_start,
        phase_end: None,
        parent_index: Some(slice.index),
    };
    Ok(StepOutcome {
        report: StepReport {
            mode: config.mode,
            index,
            parent_index: slice.index,
            now: config.now,
            announcements_applied: applied,
            stale_ids,
            regenerated,
            drift,
            resampled,
            evicted,
            added,
            shortfall,
            failures: fails,
            composition,
        },
        slice: new_slice,
        kb,
    })
}
