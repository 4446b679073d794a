//! Interest drift: windowed topic distributions, the topic-weighted
//! Jensen-Shannon divergence and offline phase partitioning.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::community::CommunityPost;
use crate::error::{Error, Result};
use crate::model::Timestamp;
use crate::taxonomy::TopicId;
use crate::util::{SECONDS_PER_DAY, SECONDS_PER_MONTH};

const MASS_TOLERANCE: f64 = 1e-9;

/// Empirical topic frequencies. A distribution built from zero posts is the
/// zero-count marker: it has no mass and is not a probability distribution.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TopicDistribution {
    pub mass: BTreeMap<TopicId, f64>,
    pub count: usize,
}

impl TopicDistribution {
    pub fn zero_count() -> Self {
        Self::default()
    }

    pub fn is_zero_count(&self) -> bool {
        self.mass.is_empty()
    }

    pub fn from_topics<'a>(topics: impl IntoIterator<Item = &'a TopicId>) -> Self {
        let mut counts: BTreeMap<TopicId, usize> = BTreeMap::new();
        let mut n = 0usize;
        for t in topics {
            *counts.entry(t.clone()).or_default() += 1;
            n += 1;
        }
        Self {
            mass: counts
                .into_iter()
                .map(|(t, c)| (t, c as f64 / n as f64))
                .collect(),
            count: n,
        }
    }

    /// Explicit masses; zero entries are dropped.
    pub fn from_masses(masses: impl IntoIterator<Item = (TopicId, f64)>) -> Result<Self> {
        let d = Self {
            mass: masses.into_iter().filter(|(_, m)| *m != 0.0).collect(),
            count: 0,
        };
        d.check()?;
        Ok(d)
    }

    pub fn get(&self, topic: &TopicId) -> f64 {
        self.mass.get(topic).copied().unwrap_or(0.0)
    }

    pub fn check(&self) -> Result<()> {
        if self.is_zero_count() {
            return Err(Error::Contract(
                "zero-count marker is not a distribution".into(),
            ));
        }
        if let Some((t, m)) = self.mass.iter().find(|(_, m)| !m.is_finite() || **m < 0.0) {
            return Err(Error::Contract(format!("invalid mass {m} for {t}")));
        }
        let total: f64 = self.mass.values().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::Contract(format!("masses sum to {total}, not 1")));
        }
        Ok(())
    }

    /// L1 distance on the union support.
    pub fn l1(&self, other: &TopicDistribution) -> f64 {
        let keys: BTreeSet<&TopicId> = self.mass.keys().chain(other.mass.keys()).collect();
        keys.into_iter()
            .map(|k| (self.get(k) - other.get(k)).abs())
            .sum()
    }
}

/// Frequencies of topics among classified posts with `a <= created_at <= b`.
/// Unclassified posts are ignored.
pub fn topic_distribution(
    posts: &[CommunityPost],
    window: (Timestamp, Timestamp),
) -> TopicDistribution {
    let (a, b) = window;
    TopicDistribution::from_topics(
        posts
            .iter()
            .filter(|p| p.created_at >= a && p.created_at <= b)
            .filter_map(|p| p.topic.as_ref()),
    )
}

fn mixture(pc: &TopicDistribution, pr: &TopicDistribution) -> BTreeMap<TopicId, f64> {
    let keys: BTreeSet<&TopicId> = pc.mass.keys().chain(pr.mass.keys()).collect();
    keys.into_iter()
        .map(|k| (k.clone(), 0.5 * (pc.get(k) + pr.get(k))))
        .filter(|(_, m)| *m > 0.0)
        .collect()
}

fn topic_weights_of(m: &BTreeMap<TopicId, f64>, gamma: f64) -> BTreeMap<TopicId, f64> {
    let powered: BTreeMap<&TopicId, f64> = m.iter().map(|(k, v)| (k, v.powf(gamma))).collect();
    let z: f64 = powered.values().sum();
    powered
        .into_iter()
        .map(|(k, v)| (k.clone(), v / z))
        .collect()
}

/// `w = M^gamma / sum(M^gamma)` over topics with positive mixture mass.
pub fn topic_weights(
    pc: &TopicDistribution,
    pr: &TopicDistribution,
    gamma: f64,
) -> Result<BTreeMap<TopicId, f64>> {
    pc.check()?;
    pr.check()?;
    check_gamma(gamma)?;
    Ok(topic_weights_of(&mixture(pc, pr), gamma))
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::Config(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    Ok(())
}

fn term(p: f64, m: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (p / m).log2()
    }
}

/// Per-topic JSD contributions `0.5 * [Pc log2(Pc/M) + Pr log2(Pr/M)]`.
pub fn jsd_terms(pc: &TopicDistribution, pr: &TopicDistribution) -> Result<BTreeMap<TopicId, f64>> {
    pc.check()?;
    pr.check()?;
    Ok(mixture(pc, pr)
        .into_iter()
        .map(|(k, m)| {
            let j = 0.5 * (term(pc.get(&k), m) + term(pr.get(&k), m));
            (k, j)
        })
        .collect())
}

/// Sum over topics of `w_theta * j_theta`.
pub fn weighted_jsd(pc: &TopicDistribution, pr: &TopicDistribution, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    let terms = jsd_terms(pc, pr)?;
    let weights = topic_weights_of(&mixture(pc, pr), gamma);
    Ok(terms
        .iter()
        .map(|(k, j)| weights[k] * j)
        .sum::<f64>()
        .max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftConfig {
    /// Window length in seconds.
    pub window: i64,
    pub gamma: f64,
    pub threshold: f64,
    /// Step in seconds.
    pub step: i64,
    pub min_posts: usize,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            window: 5 * SECONDS_PER_DAY,
            gamma: 1.5,
            threshold: 0.001,
            step: SECONDS_PER_DAY,
            min_posts: 20,
        }
    }
}

impl DriftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window <= 0 || self.step <= 0 {
            return Err(Error::Config("window and step must be positive".into()));
        }
        check_gamma(self.gamma)?;
        if self.threshold.is_nan() || self.threshold <= 0.0 {
            return Err(Error::Config(format!(
                "threshold must be positive, got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// `90s`, `12h`, `5d`, `2w`, `6m` (30-day months). A bare number is seconds.
pub fn parse_duration(s: &str) -> Result<i64> {
    let s = s.trim();
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let n: i64 = num
        .parse()
        .map_err(|_| Error::Config(format!("bad duration {s:?}")))?;
    let mult = match unit {
        "" | "s" => 1,
        "h" => 3600,
        "d" => SECONDS_PER_DAY,
        "w" => 7 * SECONDS_PER_DAY,
        "m" | "mo" => SECONDS_PER_MONTH,
        _ => return Err(Error::Config(format!("bad duration unit in {s:?}"))),
    };
    n.checked_mul(mult)
        .ok_or_else(|| Error::Config(format!("duration {s:?} overflows")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub wjsd: f64,
    pub flagged: bool,
    pub low_sample: bool,
    pub current_window: (Timestamp, Timestamp),
    pub reference_window: (Timestamp, Timestamp),
    pub post_counts: (usize, usize),
    pub current: TopicDistribution,
}

/// Compare `[max(p, c - W), c]` against `[p, c]`.
pub fn detect_drift(
    posts: &[CommunityPost],
    p: Timestamp,
    c: Timestamp,
    config: &DriftConfig,
) -> Result<DriftReport> {
    if p > c {
        return Err(Error::Contract(format!(
            "reference start {p} is after current time {c}"
        )));
    }
    config.validate()?;
    let current_window = (p.max(c.saturating_sub(config.window)), c);
    let reference_window = (p, c);
    let pc = topic_distribution(posts, current_window);
    let pr = topic_distribution(posts, reference_window);
    let post_counts = (pc.count, pr.count);
    let low_sample = pc.count < config.min_posts || pr.count < config.min_posts;
    let wjsd = if pc.is_zero_count() || pr.is_zero_count() {
        0.0
    } else {
        weighted_jsd(&pc, &pr, config.gamma)?
    };
    Ok(DriftReport {
        wjsd,
        flagged: !low_sample && wjsd > config.threshold,
        low_sample,
        current_window,
        reference_window,
        post_counts,
        current: pc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePartition {
    pub start: Timestamp,
    pub end: Timestamp,
    pub boundaries: Vec<Timestamp>,
    pub reports: Vec<DriftReport>,
}

impl PhasePartition {
    /// `[start, b1), [b1, b2), ..., [bk, end]`.
    pub fn phases(&self) -> Vec<(Timestamp, Timestamp)> {
        let mut edges = vec![self.start];
        edges.extend(&self.boundaries);
        edges.push(self.end);
        edges.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Walk `c` from `start + W` to `end` by `step`, resetting the reference
/// start to each flagged `c`.
pub fn partition_phases(
    posts: &[CommunityPost],
    start: Timestamp,
    end: Timestamp,
    config: &DriftConfig,
) -> Result<PhasePartition> {
    if start >= end {
        return Err(Error::Contract(format!(
            "phase range start {start} is not before end {end}"
        )));
    }
    config.validate()?;
    let mut p = start;
    let mut c = start.saturating_add(config.window);
    let mut boundaries = Vec::new();
    let mut reports = Vec::new();
    while c <= end {
        let r = detect_drift(posts, p, c, config)?;
        if r.flagged {
            boundaries.push(c);
            p = c;
        }
        reports.push(r);
        c = c.saturating_add(config.step);
    }
    Ok(PhasePartition {
        start,
        end,
        boundaries,
        reports,
    })
}
