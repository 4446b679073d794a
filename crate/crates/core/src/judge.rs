//! LLM-as-judge scoring and agreement statistics.
//!
//! Answers are scored 0/1/2 on correctness and faithfulness with the rubric
//! prompts in `assets/prompts/judge/`. Scores are normalized by halving. For
//! comparison against binary human labels the lenient mapping treats 1 and 2
//! as a pass.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{BenchmarkSlice, KnowledgeBase};
use crate::prompts;
use crate::providers::{parse_json_object, CompletionProvider, CompletionRequest};
use crate::rag_eval::Retriever;
use crate::util::render;

pub const DEFAULT_GENERATION_K: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Correctness,
    Faithfulness,
}

impl Criterion {
    pub const ALL: [Criterion; 2] = [Criterion::Correctness, Criterion::Faithfulness];

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::Correctness => "correctness",
            Criterion::Faithfulness => "faithfulness",
        }
    }

    /// Key of the score field in the judge's JSON answer.
    pub fn field(self) -> &'static str {
        match self {
            Criterion::Correctness => "accuracy",
            Criterion::Faithfulness => "faithfulness",
        }
    }

    fn prompt(self) -> &'static str {
        match self {
            Criterion::Correctness => prompts::JUDGE_CORRECTNESS,
            Criterion::Faithfulness => prompts::JUDGE_FAITHFULNESS,
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "correctness" => Ok(Criterion::Correctness),
            "faithfulness" => Ok(Criterion::Faithfulness),
            other => Err(Error::Config(format!("unknown criterion {other:?}"))),
        }
    }
}

/// Comma-separated criteria, deduplicated, in canonical order.
pub fn parse_criteria(s: &str) -> Result<Vec<Criterion>> {
    let set = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(Criterion::from_str)
        .collect::<Result<BTreeSet<_>>>()?;
    if set.is_empty() {
        return Err(Error::Config("no criteria given".into()));
    }
    Ok(set.into_iter().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub criterion: Criterion,
    pub raw: u8,
    pub normalized: f64,
}

impl JudgeVerdict {
    pub fn new(criterion: Criterion, raw: u8) -> Result<Self> {
        Ok(Self {
            criterion,
            raw,
            normalized: normalize(raw)?,
        })
    }
}

pub fn normalize(raw: u8) -> Result<f64> {
    match raw {
        0 => Ok(0.0),
        1 => Ok(0.5),
        2 => Ok(1.0),
        _ => Err(Error::Contract(format!("judge score {raw} outside 0..=2"))),
    }
}

/// `{1, 2}` pass, `0` fails.
pub fn lenient_map(raw: u8) -> Result<bool> {
    match raw {
        0 => Ok(false),
        1 | 2 => Ok(true),
        _ => Err(Error::Contract(format!("judge score {raw} outside 0..=2"))),
    }
}

fn parse_score(text: &str, criterion: Criterion) -> Result<u8> {
    let v = parse_json_object(text)?;
    let field = criterion.field();
    match v.get(field) {
        Some(Value::Number(n)) => match n.as_u64() {
            Some(s) if s <= 2 => Ok(s as u8),
            _ => Err(Error::Judge(format!("{field} score {n} outside 0..=2"))),
        },
        Some(Value::String(s)) => match s.trim().parse::<u8>() {
            Ok(s) if s <= 2 => Ok(s),
            _ => Err(Error::Judge(format!("{field} score {s:?} outside 0..=2"))),
        },
        _ => Err(Error::Judge(format!(
            "response lacks a {field} score: {text}"
        ))),
    }
}

/// Score one answer. A malformed or out-of-range response is retried once.
pub fn judge_answer(
    question: &str,
    contexts: &[(&str, &str)],
    answer: &str,
    criterion: Criterion,
    provider: &dyn CompletionProvider,
) -> Result<JudgeVerdict> {
    if criterion == Criterion::Faithfulness && contexts.is_empty() {
        return Err(Error::Precondition(
            "faithfulness needs at least one context".into(),
        ));
    }
    let docs = prompts::render_documents(contexts.iter().copied());
    let user = render(
        criterion.prompt(),
        &[
            ("Question", question),
            ("Documents", &docs),
            ("Answer", answer),
        ],
    );
    let req = CompletionRequest::new(
        prompts::system(prompts::TASK_JUDGE, criterion.as_str()),
        user,
    )
    .json();
    let mut last = None;
    for _ in 0..2 {
        let text = provider.generate(&req)?;
        match parse_score(&text, criterion) {
            Ok(raw) => return JudgeVerdict::new(criterion, raw),
            Err(e) => last = Some(e),
        }
    }
    let e = last.expect("two attempts");
    Err(match e {
        Error::Judge(_) => e,
        other => Error::Judge(other.to_string()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementTable {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
}

impl AgreementTable {
    /// Metrics from counts; precision and recall are 0 on an empty denominator.
    pub fn from_confusion(c: Confusion) -> Result<Self> {
        if c.total() == 0 {
            return Err(Error::Contract("empty confusion matrix".into()));
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Ok(Self {
            accuracy: ratio(c.tp + c.tn, c.total()),
            precision,
            recall,
            f1,
            confusion: c,
        })
    }
}

/// Pass is the positive class.
pub fn agreement(llm: &[bool], human: &[bool]) -> Result<AgreementTable> {
    if llm.len() != human.len() {
        return Err(Error::Contract(format!(
            "label lists differ in length: {} vs {}",
            llm.len(),
            human.len()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &h) in llm.iter().zip(human) {
        match (p, h) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    AgreementTable::from_confusion(c)
}

/// Strict majority of passes; a tie is a fail.
pub fn majority_vote(votes: &[bool]) -> Result<bool> {
    if votes.is_empty() {
        return Err(Error::Contract("no votes".into()));
    }
    let pass = votes.iter().filter(|v| **v).count();
    Ok(2 * pass > votes.len())
}

/// Nominal Krippendorff's alpha. `ratings[r][u]` is rater `r`'s value for
/// item `u`, `None` when missing. Items with fewer than two values are not
/// pairable and are dropped.
pub fn krippendorff_alpha(ratings: &[Vec<Option<u32>>]) -> Result<f64> {
    let items = ratings.iter().map(Vec::len).max().unwrap_or(0);
    if ratings.iter().any(|r| r.len() != items) {
        return Err(Error::Contract("ragged rating matrix".into()));
    }
    let mut coincidence: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    for u in 0..items {
        let vals: Vec<u32> = ratings.iter().filter_map(|r| r[u]).collect();
        let m = vals.len();
        if m < 2 {
            continue;
        }
        let w = 1.0 / (m - 1) as f64;
        for (i, &a) in vals.iter().enumerate() {
            for (j, &b) in vals.iter().enumerate() {
                if i != j {
                    *coincidence.entry((a, b)).or_default() += w;
                }
            }
        }
    }
    let mut marginal: BTreeMap<u32, f64> = BTreeMap::new();
    for (&(c, _), &o) in &coincidence {
        *marginal.entry(c).or_default() += o;
    }
    let n: f64 = marginal.values().sum();
    if n < 2.0 - 1e-9 {
        return Err(Error::UndefinedAlpha(format!("only {n} pairable values")));
    }
    let d_o: f64 = coincidence
        .iter()
        .filter(|((c, k), _)| c != k)
        .map(|(_, o)| o)
        .sum::<f64>()
        / n;
    let mut d_e = 0.0;
    for (c, nc) in &marginal {
        for (k, nk) in &marginal {
            if c != k {
                d_e += nc * nk;
            }
        }
    }
    d_e /= n * (n - 1.0);
    if d_e == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - d_o / d_e)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoHypo,
    NoPersona,
    NoTemplate,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoHypo,
        Variant::NoPersona,
        Variant::NoTemplate,
    ];
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().replace('-', "_").as_str() {
            "full" => Ok(Variant::Full),
            "no_hypo" => Ok(Variant::NoHypo),
            "no_persona" => Ok(Variant::NoPersona),
            "no_template" => Ok(Variant::NoTemplate),
            other => Err(Error::Validation(format!("unknown variant {other:?}"))),
        }
    }
}

/// Share of selections won by each variant. Every variant gets an entry.
pub fn forced_choice_win_rates<S: AsRef<str>>(
    selections: &[(S, S)],
) -> Result<BTreeMap<Variant, f64>> {
    if selections.is_empty() {
        return Err(Error::Validation("no selections".into()));
    }
    let mut wins: BTreeMap<Variant, usize> = Variant::ALL.iter().map(|v| (*v, 0)).collect();
    for (_, label) in selections {
        *wins
            .get_mut(&label.as_ref().parse::<Variant>()?)
            .expect("all variants") += 1;
    }
    let n = selections.len() as f64;
    Ok(wins.into_iter().map(|(v, w)| (v, w as f64 / n)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgedTuple {
    pub tuple_id: String,
    pub answer: String,
    pub verdicts: Vec<JudgeVerdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionMean {
    pub criterion: Criterion,
    pub mean: Option<f64>,
    pub judged: usize,
    pub errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationEval {
    pub slice_index: u32,
    pub retriever: String,
    pub k: usize,
    pub tuples: usize,
    pub generation_errors: usize,
    pub means: Vec<CriterionMean>,
    pub rows: Vec<JudgedTuple>,
}

fn generate_answer(
    question: &str,
    contexts: &[(&str, &str)],
    generator: &dyn CompletionProvider,
) -> Result<String> {
    let docs = prompts::render_documents(contexts.iter().copied());
    let user = render(
        prompts::GENERATE_ANSWER,
        &[("Question", question), ("Documents", &docs)],
    );
    let req = CompletionRequest::new(prompts::system(prompts::TASK_GENERATE, ""), user);
    Ok(generator.complete(&req)?.trim().to_string())
}

/// Retrieve, answer and judge every tuple. Per-tuple failures are counted and
/// left out of the means.
pub fn generation_eval(
    slice: &BenchmarkSlice,
    kb: &KnowledgeBase,
    retriever: &dyn Retriever,
    generator: &dyn CompletionProvider,
    judge: &dyn CompletionProvider,
    k: usize,
    criteria: &[Criterion],
) -> Result<GenerationEval> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    type Row = std::result::Result<(String, Vec<Result<JudgeVerdict>>), Error>;
    let rows: Vec<Row> = slice
        .tuples
        .par_iter()
        .map(|t| {
            let ids = retriever.search(&t.question, k)?;
            let contexts: Vec<(&str, &str)> = ids
                .iter()
                .filter_map(|id| kb.get(id).map(|s| (s.id.as_str(), s.content.as_str())))
                .collect();
            let answer = generate_answer(&t.question, &contexts, generator)?;
            let verdicts = criteria
                .iter()
                .map(|&c| judge_answer(&t.question, &contexts, &answer, c, judge))
                .collect();
            Ok((answer, verdicts))
        })
        .collect();

    let mut generation_errors = 0;
    let mut sums: BTreeMap<Criterion, (f64, usize, usize)> =
        criteria.iter().map(|c| (*c, (0.0, 0, 0))).collect();
    let mut out = Vec::new();
    for (t, row) in slice.tuples.iter().zip(rows) {
        match row {
            Err(e) => {
                log::warn!("generation failed for tuple {}: {e}", t.id);
                generation_errors += 1;
            }
            Ok((answer, verdicts)) => {
                let mut kept = Vec::new();
                for (c, v) in criteria.iter().zip(verdicts) {
                    let s = sums.get_mut(c).expect("criterion");
                    match v {
                        Ok(v) => {
                            s.0 += v.normalized;
                            s.1 += 1;
                            kept.push(v);
                        }
                        Err(e) => {
                            log::warn!("{c} judging failed for tuple {}: {e}", t.id);
                            s.2 += 1;
                        }
                    }
                }
                out.push(JudgedTuple {
                    tuple_id: t.id.clone(),
                    answer,
                    verdicts: kept,
                });
            }
        }
    }
    Ok(GenerationEval {
        slice_index: slice.index,
        retriever: retriever.name().to_string(),
        k,
        tuples: slice.tuples.len(),
        generation_errors,
        means: sums
            .into_iter()
            .map(|(criterion, (sum, judged, errors))| CriterionMean {
                criterion,
                mean: (judged > 0).then(|| sum / judged as f64),
                judged,
                errors,
            })
            .collect(),
        rows: out,
    })
}
