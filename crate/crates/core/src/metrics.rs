//! Evaluation metrics: mask IoU with gIoU/cIoU aggregation, VQA consensus
//! accuracy, BLEU-1, navigation metrics and baseline-relative improvement.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::types::{Task, VQA_ANSWER_COUNT};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("expected {VQA_ANSWER_COUNT} human answers, got {0}")]
    WrongAnswerCount(usize),
    #[error("bleu1 needs at least one reference")]
    NoReferences,
    #[error("baseline value is zero")]
    DivisionByZero,
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("invalid episode {id}: {message}")]
    InvalidEpisode { id: String, message: String },
}

/// Row-major binary raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl BitMask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, MetricError> {
        if width == 0 || height == 0 {
            return Err(MetricError::InvalidMask(format!("dimensions {width}x{height} must be positive")));
        }
        if bits.len() != width as usize * height as usize {
            return Err(MetricError::InvalidMask(format!(
                "{} bits for {width}x{height} raster",
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: u32, height: u32) -> Result<Self, MetricError> {
        Self::new(width, height, vec![false; width as usize * height as usize])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn check_dims(&self, other: &BitMask) -> Result<(), MetricError> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(MetricError::DimensionMismatch(self.width, self.height, other.width, other.height));
        }
        Ok(())
    }

    /// `(|a ∩ b|, |a ∪ b|)`.
    pub fn overlap(&self, other: &BitMask) -> Result<(u64, u64), MetricError> {
        self.check_dims(other)?;
        let (mut inter, mut union) = (0u64, 0u64);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += u64::from(a && b);
            union += u64::from(a || b);
        }
        Ok((inter, union))
    }
}

/// IoU when both masks are empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmptyPolicy {
    #[default]
    One,
    Zero,
}

impl EmptyPolicy {
    fn value(self) -> f64 {
        match self {
            EmptyPolicy::One => 1.0,
            EmptyPolicy::Zero => 0.0,
        }
    }
}

pub fn iou_with(a: &BitMask, b: &BitMask, policy: EmptyPolicy) -> Result<f64, MetricError> {
    let (inter, union) = a.overlap(b)?;
    Ok(if union == 0 { policy.value() } else { inter as f64 / union as f64 })
}

pub fn iou(a: &BitMask, b: &BitMask) -> Result<f64, MetricError> {
    iou_with(a, b, EmptyPolicy::One)
}

/// Mean of per-pair IoU.
pub fn giou_dataset(pairs: &[(BitMask, BitMask)], policy: EmptyPolicy) -> Result<f64, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::EmptyDataset);
    }
    let mut sum = 0.0;
    for (p, g) in pairs {
        sum += iou_with(p, g, policy)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Cumulative intersection over cumulative union.
pub fn ciou_dataset(pairs: &[(BitMask, BitMask)], policy: EmptyPolicy) -> Result<f64, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::EmptyDataset);
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (p, g) in pairs {
        let (i, u) = p.overlap(g)?;
        inter += i;
        union += u;
    }
    Ok(ciou_from_totals(inter, union, policy))
}

pub fn ciou_from_totals(inter: u64, union: u64, policy: EmptyPolicy) -> f64 {
    if union == 0 {
        policy.value()
    } else {
        inter as f64 / union as f64
    }
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

fn strip_punctuation(s: &str) -> String {
    s.chars().filter(|c| !c.is_ascii_punctuation()).collect()
}

/// Lowercase, drop punctuation and the articles a/an/the, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    strip_punctuation(&s.to_lowercase())
        .split_whitespace()
        .filter(|w| !ARTICLES.contains(w))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Consensus accuracy: the mean over the ten leave-one-out subsets of
/// `min(matches / 3, 1)`.
pub fn vqa_accuracy(pred: &str, human_answers: &[String]) -> Result<f64, MetricError> {
    if human_answers.len() != VQA_ANSWER_COUNT {
        return Err(MetricError::WrongAnswerCount(human_answers.len()));
    }
    let pred = normalize_answer(pred);
    let m = human_answers.iter().filter(|a| normalize_answer(a) == pred).count();
    // Subsets that drop a matching answer see m - 1 matches; the rest see m.
    let dropped_hit = ((m.saturating_sub(1)) as f64 / 3.0).min(1.0);
    let dropped_miss = (m as f64 / 3.0).min(1.0);
    let sum = m as f64 * dropped_hit + (VQA_ANSWER_COUNT - m) as f64 * dropped_miss;
    Ok(sum / VQA_ANSWER_COUNT as f64)
}

fn bleu_tokens(s: &str) -> Vec<String> {
    strip_punctuation(&s.to_lowercase()).split_whitespace().map(str::to_owned).collect()
}

/// Clipped unigram matches, candidate length, and closest reference length.
fn bleu1_stats(pred: &str, references: &[String]) -> Result<(usize, usize, usize), MetricError> {
    if references.is_empty() {
        return Err(MetricError::NoReferences);
    }
    let cand = bleu_tokens(pred);
    let refs: Vec<Vec<String>> = references.iter().map(|r| bleu_tokens(r)).collect();
    let mut max_ref: HashMap<&str, usize> = HashMap::new();
    for r in &refs {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in r {
            *counts.entry(t.as_str()).or_default() += 1;
        }
        for (t, n) in counts {
            let e = max_ref.entry(t).or_default();
            *e = (*e).max(n);
        }
    }
    let mut cand_counts: HashMap<&str, usize> = HashMap::new();
    for t in &cand {
        *cand_counts.entry(t.as_str()).or_default() += 1;
    }
    let clipped = cand_counts.iter().map(|(t, &n)| n.min(max_ref.get(t).copied().unwrap_or(0))).sum();
    let c = cand.len();
    // Closest reference length; ties go to the shorter one.
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("references nonempty");
    Ok((clipped, c, r))
}

fn bleu1_from_stats(clipped: usize, c: usize, r: usize) -> f64 {
    if c == 0 {
        return 0.0;
    }
    let precision = clipped as f64 / c as f64;
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    precision * bp
}

/// Sentence-level BLEU-1; an empty candidate scores 0.
pub fn bleu1(pred: &str, references: &[String]) -> Result<f64, MetricError> {
    let (clipped, c, r) = bleu1_stats(pred, references)?;
    Ok(bleu1_from_stats(clipped, c, r))
}

/// Corpus-level BLEU-1: clipped counts and lengths summed before combining.
pub fn bleu1_corpus(items: &[(String, Vec<String>)]) -> Result<f64, MetricError> {
    if items.is_empty() {
        return Err(MetricError::EmptyDataset);
    }
    let (mut clipped, mut c, mut r) = (0, 0, 0);
    for (pred, refs) in items {
        let (a, b, d) = bleu1_stats(pred, refs)?;
        clipped += a;
        c += b;
        r += d;
    }
    Ok(bleu1_from_stats(clipped, c, r))
}

/// Default success radius in meters.
pub const DEFAULT_SUCCESS_RADIUS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeRecord {
    pub id: String,
    pub success: bool,
    pub shortest_path_length: f64,
    pub agent_path_length: f64,
    pub final_distance_to_goal: f64,
}

impl EpisodeRecord {
    pub fn validate(&self, success_radius: f64) -> Result<(), MetricError> {
        let bad = |message: &str| Err(MetricError::InvalidEpisode { id: self.id.clone(), message: message.into() });
        if !(self.shortest_path_length > 0.0) {
            return bad("shortest_path_length must be positive");
        }
        if !(self.agent_path_length >= 0.0) || !(self.final_distance_to_goal >= 0.0) {
            return bad("path length and distance must be non-negative");
        }
        if self.success && self.final_distance_to_goal > success_radius {
            return bad("marked successful but ends outside the success radius");
        }
        Ok(())
    }

    /// `success · l / max(p, l)`.
    pub fn spl(&self) -> f64 {
        if self.success {
            self.shortest_path_length / self.agent_path_length.max(self.shortest_path_length)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VlnMetrics {
    pub sr: f64,
    pub spl: f64,
    pub navi_error: f64,
}

pub fn vln_metrics(episodes: &[EpisodeRecord], success_radius: f64) -> Result<VlnMetrics, MetricError> {
    if episodes.is_empty() {
        return Err(MetricError::EmptyDataset);
    }
    for e in episodes {
        e.validate(success_radius)?;
    }
    let n = episodes.len() as f64;
    Ok(VlnMetrics {
        sr: 100.0 * episodes.iter().filter(|e| e.success).count() as f64 / n,
        spl: 100.0 * episodes.iter().map(EpisodeRecord::spl).sum::<f64>() / n,
        navi_error: episodes.iter().map(|e| e.final_distance_to_goal).sum::<f64>() / n,
    })
}

/// `100 · (new − old) / old`.
pub fn improvement_pct(new: f64, old: f64) -> Result<f64, MetricError> {
    if old == 0.0 {
        return Err(MetricError::DivisionByZero);
    }
    Ok(100.0 * (new - old) / old)
}

/// Explicit sign, two decimals, percent suffix; negative values use U+2212.
pub fn format_improvement(value: Result<f64, MetricError>) -> String {
    match value {
        Ok(v) => {
            let s = format!("{:.2}", v.abs());
            let negative = v < 0.0 && s.bytes().any(|b| b.is_ascii_digit() && b != b'0');
            format!("{}{s}%", if negative { '\u{2212}' } else { '+' })
        }
        Err(_) => "n/a".to_owned(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricId {
    Giou,
    Ciou,
    Accuracy,
    Bleu1,
    Bleu1Corpus,
    Sr,
    Spl,
    NaviError,
}

impl MetricId {
    pub const ALL: [MetricId; 8] = [
        MetricId::Giou,
        MetricId::Ciou,
        MetricId::Accuracy,
        MetricId::Bleu1,
        MetricId::Bleu1Corpus,
        MetricId::Sr,
        MetricId::Spl,
        MetricId::NaviError,
    ];

    pub fn task(self) -> Task {
        match self {
            MetricId::Giou | MetricId::Ciou => Task::Ris,
            MetricId::Accuracy | MetricId::Bleu1 | MetricId::Bleu1Corpus => Task::Vqa,
            MetricId::Sr | MetricId::Spl | MetricId::NaviError => Task::Vln,
        }
    }

    pub fn valid_for(self, task: Task) -> bool {
        self.task() == task
    }

    pub fn defaults_for(task: Task) -> Vec<MetricId> {
        match task {
            Task::Ris => vec![MetricId::Giou, MetricId::Ciou],
            Task::Vqa => vec![MetricId::Accuracy, MetricId::Bleu1],
            Task::Vln => vec![MetricId::Sr, MetricId::Spl, MetricId::NaviError],
        }
    }

    /// Lower is better only for navigation error.
    pub fn higher_is_better(self) -> bool {
        self != MetricId::NaviError
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MetricId::Giou => "giou",
            MetricId::Ciou => "ciou",
            MetricId::Accuracy => "accuracy",
            MetricId::Bleu1 => "bleu1",
            MetricId::Bleu1Corpus => "bleu1_corpus",
            MetricId::Sr => "sr",
            MetricId::Spl => "spl",
            MetricId::NaviError => "navi_error",
        }
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MetricId::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown metric {s:?}"))
    }
}

/// Per-sample and aggregate metric values, optionally against a baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub per_sample: BTreeMap<String, BTreeMap<String, f64>>,
    pub aggregate: BTreeMap<MetricId, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BTreeMap<MetricId, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub improvement_pct: Option<BTreeMap<MetricId, Option<f64>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl EvalReport {
    /// Adds the baseline and per-metric improvement (`None` when the
    /// baseline value is zero).
    pub fn with_baseline(mut self, baseline: BTreeMap<MetricId, f64>) -> Self {
        let improvement = self
            .aggregate
            .iter()
            .filter_map(|(m, &new)| baseline.get(m).map(|&old| (*m, improvement_pct(new, old).ok())))
            .collect();
        self.baseline = Some(baseline);
        self.improvement_pct = Some(improvement);
        self
    }
}
