//! Shared domain types: samples, instructions, experience and run configuration.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::canonical::{canonical_digest, normalize_newlines, Digest};

/// Empirical experience every one-time optimization starts from.
pub const INITIAL_EMPIRICAL_EXPERIENCE: &str = "Repeat the question.";

/// Number of human answers carried by every VQA sample.
pub const VQA_ANSWER_COUNT: usize = 10;

/// A violated sample/config invariant, naming the offending field.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{field}: {message}")]
pub struct ValidationError {
    pub field: &'static str,
    pub message: String,
}

impl ValidationError {
    pub fn new(field: &'static str, message: impl Into<String>) -> Self {
        Self { field, message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ris,
    Vqa,
    Vln,
}

impl Task {
    /// Default one-sentence task description bound to `{task_description}`.
    pub fn description(self) -> &'static str {
        match self {
            Task::Vqa => "Answer the question about the image.",
            Task::Ris => "Rewrite the referring expression to identify exactly one object.",
            Task::Vln => "n/a",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Ris => "ris",
            Task::Vqa => "vqa",
            Task::Vln => "vln",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ris" => Ok(Task::Ris),
            "vqa" => Ok(Task::Vqa),
            "vln" => Ok(Task::Vln),
            other => Err(format!("unknown task {other:?} (expected ris, vqa or vln)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstructionKind {
    Ambiguous,
    Clear,
}

/// Free-form instruction text. Outer whitespace is stripped at construction,
/// interior whitespace is preserved.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    text: String,
    kind: InstructionKind,
}

impl Instruction {
    pub fn new(text: &str, kind: InstructionKind) -> Result<Self, ValidationError> {
        let text = normalize_newlines(text.trim());
        if text.is_empty() {
            return Err(ValidationError::new("instruction", "instruction text is empty"));
        }
        Ok(Self { text, kind })
    }

    pub fn ambiguous(text: &str) -> Result<Self, ValidationError> {
        Self::new(text, InstructionKind::Ambiguous)
    }

    pub fn clear(text: &str) -> Result<Self, ValidationError> {
        Self::new(text, InstructionKind::Clear)
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn kind(&self) -> InstructionKind {
        self.kind
    }

    pub fn digest(&self) -> Digest {
        Digest::of_str(&self.text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MediaType {
    Png,
    Jpeg,
}

impl MediaType {
    /// Sniffs the format from magic bytes.
    pub fn sniff(bytes: &[u8]) -> Option<Self> {
        if bytes.starts_with(&[0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a]) {
            Some(MediaType::Png)
        } else if bytes.starts_with(&[0xff, 0xd8, 0xff]) {
            Some(MediaType::Jpeg)
        } else {
            None
        }
    }

    pub fn mime(self) -> &'static str {
        match self {
            MediaType::Png => "image/png",
            MediaType::Jpeg => "image/jpeg",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum VisualError {
    #[error("cannot read image {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image {0} is neither PNG nor JPEG")]
    UnsupportedFormat(PathBuf),
    #[error("image {path} digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { path: PathBuf, expected: Digest, found: Digest },
}

/// An image on disk together with the digest of its bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualContext {
    pub image_path: PathBuf,
    pub media_type: MediaType,
    pub sha256: Digest,
}

impl VisualContext {
    pub fn load(path: &Path) -> Result<Self, VisualError> {
        let bytes = fs::read(path).map_err(|source| VisualError::Io { path: path.to_owned(), source })?;
        let media_type =
            MediaType::sniff(&bytes).ok_or_else(|| VisualError::UnsupportedFormat(path.to_owned()))?;
        Ok(Self { image_path: path.to_owned(), media_type, sha256: Digest::of_bytes(&bytes) })
    }

    /// Reads the image bytes, checking they still match the recorded digest.
    pub fn read_verified(&self) -> Result<Vec<u8>, VisualError> {
        let bytes = fs::read(&self.image_path)
            .map_err(|source| VisualError::Io { path: self.image_path.clone(), source })?;
        let found = Digest::of_bytes(&bytes);
        if found != self.sha256 {
            return Err(VisualError::DigestMismatch {
                path: self.image_path.clone(),
                expected: self.sha256.clone(),
                found,
            });
        }
        Ok(bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ambiguity {
    Ellipsis,
    Colloquialism,
    Subjectivity,
    Relativity,
    Other,
}

impl Ambiguity {
    pub const ALL: [Ambiguity; 5] = [
        Ambiguity::Ellipsis,
        Ambiguity::Colloquialism,
        Ambiguity::Subjectivity,
        Ambiguity::Relativity,
        Ambiguity::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ambiguity::Ellipsis => "ellipsis",
            Ambiguity::Colloquialism => "colloquialism",
            Ambiguity::Subjectivity => "subjectivity",
            Ambiguity::Relativity => "relativity",
            Ambiguity::Other => "other",
        }
    }
}

impl fmt::Display for Ambiguity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// On-disk shape of one dataset line. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ambiguity: Option<Ambiguity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub screening_raw: Option<String>,
}

/// One task instance.
///
/// Paths (`image`, `gt_mask`) are kept exactly as written in the dataset;
/// `visual` is the resolved, digested image when the loader had access to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub task: Task,
    pub image: Option<String>,
    pub visual: Option<VisualContext>,
    pub instruction: Instruction,
    pub ambiguity: Option<Ambiguity>,
    pub gt_mask: Option<String>,
    pub answers: Option<Vec<String>>,
    pub screening_raw: Option<String>,
}

impl Sample {
    /// Validates a record in field order and builds the sample. The image is
    /// not resolved here; see [`crate::data`].
    pub fn from_record(record: SampleRecord) -> Result<Self, ValidationError> {
        validate_record(&record)?;
        Ok(Sample {
            instruction: Instruction::ambiguous(&record.instruction)?,
            id: record.id,
            task: record.task,
            image: record.image,
            visual: None,
            ambiguity: record.ambiguity,
            gt_mask: record.gt_mask,
            answers: record.answers,
            screening_raw: record.screening_raw,
        })
    }

    pub fn to_record(&self) -> SampleRecord {
        SampleRecord {
            id: self.id.clone(),
            task: self.task,
            image: self.image.clone(),
            instruction: self.instruction.text().to_owned(),
            ambiguity: self.ambiguity,
            gt_mask: self.gt_mask.clone(),
            answers: self.answers.clone(),
            screening_raw: self.screening_raw.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        validate_record(&self.to_record())
    }
}

fn validate_record(r: &SampleRecord) -> Result<(), ValidationError> {
    if r.id.trim().is_empty() {
        return Err(ValidationError::new("id", "id is empty"));
    }
    if r.task != Task::Vln && r.image.as_deref().is_none_or(|p| p.trim().is_empty()) {
        return Err(ValidationError::new("image", format!("task {} requires an image", r.task)));
    }
    if r.instruction.trim().is_empty() {
        return Err(ValidationError::new("instruction", "instruction text is empty"));
    }
    if r.task == Task::Ris && r.gt_mask.as_deref().is_none_or(|p| p.trim().is_empty()) {
        return Err(ValidationError::new("gt_mask", "task ris requires gt_mask"));
    }
    if r.task == Task::Vqa {
        match &r.answers {
            None => return Err(ValidationError::new("answers", "task vqa requires answers")),
            Some(a) if a.len() != VQA_ANSWER_COUNT => {
                return Err(ValidationError::new(
                    "answers",
                    format!("answers length {} ≠ {VQA_ANSWER_COUNT}", a.len()),
                ))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct DigestView<'a> {
    #[serde(flatten)]
    record: SampleRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_sha256: Option<&'a Digest>,
}

/// Stable digest of a sample's canonical serialization (including the image
/// digest when the image has been resolved).
pub fn canonical_sample_digest(sample: &Sample) -> Result<Digest, ValidationError> {
    sample.validate()?;
    let view = DigestView {
        record: sample.to_record(),
        image_sha256: sample.visual.as_ref().map(|v| &v.sha256),
    };
    canonical_digest(&view).map_err(|e| ValidationError::new("sample", e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Instantial,
    Empirical,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "instantial" => Ok(Mode::Instantial),
            "empirical" => Ok(Mode::Empirical),
            other => Err(format!("unknown mode {other:?} (expected instantial or empirical)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    #[default]
    SingleShot,
    TurnBased,
}

impl FromStr for Execution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single_shot" => Ok(Execution::SingleShot),
            "turn_based" => Ok(Execution::TurnBased),
            other => Err(format!("unknown execution {other:?} (expected single_shot or turn_based)")),
        }
    }
}

/// Which output replaces the empirical experience after each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EmpiricalUpdate {
    Reasoning,
    #[default]
    Reflection,
}

impl FromStr for EmpiricalUpdate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reasoning" => Ok(EmpiricalUpdate::Reasoning),
            "reflection" => Ok(EmpiricalUpdate::Reflection),
            other => Err(format!("unknown empirical_update {other:?}")),
        }
    }
}

/// One reasoning/reflection iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub sample_id: String,
    pub reasoning: String,
    pub reflection: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
}

/// The evolving disambiguation prompt together with its iteration history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub mode: Mode,
    pub text: String,
    pub history: Vec<IterationRecord>,
    pub seed: u64,
    pub budget: u32,
}

impl Experience {
    pub fn instantial(seed: u64, budget: u32) -> Self {
        Self { mode: Mode::Instantial, text: String::new(), history: Vec::new(), seed, budget }
    }

    pub fn empirical(seed: u64, budget: u32) -> Self {
        Self {
            mode: Mode::Empirical,
            text: INITIAL_EMPIRICAL_EXPERIENCE.to_owned(),
            history: Vec::new(),
            seed,
            budget,
        }
    }

    /// `A ⊕ x` for the instantial path: segments joined by `separator`, with
    /// an empty accumulator contributing nothing.
    pub fn concat(acc: &str, segment: &str, separator: &str) -> String {
        if acc.is_empty() {
            segment.to_owned()
        } else {
            let mut out = String::with_capacity(acc.len() + separator.len() + segment.len());
            out.push_str(acc);
            out.push_str(separator);
            out.push_str(segment);
            out
        }
    }

    /// Appends a turn: `A ← A ⊕ reasoning ⊕ reflection`.
    pub fn push_instantial(&mut self, record: IterationRecord, separator: &str) {
        let t = Self::concat(&self.text, &record.reasoning, separator);
        self.text = Self::concat(&t, &record.reflection, separator);
        self.history.push(record);
    }

    /// Replaces the experience with the selected output of the iteration.
    pub fn push_empirical(&mut self, record: IterationRecord, update: EmpiricalUpdate) {
        self.text = match update {
            EmpiricalUpdate::Reflection => record.reflection.clone(),
            EmpiricalUpdate::Reasoning => record.reasoning.clone(),
        };
        self.history.push(record);
    }

    pub fn check_invariants(&self) -> Result<(), ValidationError> {
        if self.history.len() > self.budget as usize {
            return Err(ValidationError::new(
                "history",
                format!("history length {} exceeds budget {}", self.history.len(), self.budget),
            ));
        }
        if self.history.windows(2).any(|w| w[0].iteration >= w[1].iteration) {
            return Err(ValidationError::new("history", "iteration indices not strictly increasing"));
        }
        if let Some(r) = self.history.iter().find(|r| r.reward.is_some_and(|w| !(0.0..=1.0).contains(&w))) {
            return Err(ValidationError::new("history", format!("reward out of range in iteration {}", r.iteration)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    pub n_ins: u32,
    pub n_emp: u32,
    pub min_reward_accept: f64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self { n_ins: 10, n_emp: 3, min_reward_accept: 0.0 }
    }
}

/// Identifies a backend and the model it should serve.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackendRef {
    pub id: String,
    pub model: String,
}

impl BackendRef {
    pub fn new(id: impl Into<String>, model: impl Into<String>) -> Self {
        Self { id: id.into(), model: model.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Skip response synthesis ("w/o Response Synthesis").
    pub disable_synthesis: bool,
    /// Answer directly, bypassing experience ("w/o Reasoning and Reflection").
    pub disable_reasoning_reflection: bool,
    /// Optimize on one repeated sample ("w/o Multi-examples").
    pub single_example_optimization: bool,
    /// Optimize without images ("w/o Multi-modalities").
    pub text_only_optimization: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub execution: Execution,
    pub task_model: BackendRef,
    pub reflector_model: BackendRef,
    pub temperature: f64,
    pub seed: u64,
    pub max_tokens: u32,
    pub budget: BudgetConfig,
    pub ablations: Ablations,
    /// Joins instantial experience segments.
    pub separator: String,
    pub empirical_update: EmpiricalUpdate,
    /// Attach the image to the separate turn-based synthesis call.
    pub synthesis_image: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Empirical,
            execution: Execution::SingleShot,
            task_model: BackendRef::new("task", "task-model"),
            reflector_model: BackendRef::new("reflector", "reflector-model"),
            temperature: 0.0,
            seed: 42,
            max_tokens: 1024,
            budget: BudgetConfig::default(),
            ablations: Ablations::default(),
            separator: "\n".to_owned(),
            empirical_update: EmpiricalUpdate::default(),
            synthesis_image: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.budget.n_ins < 1 {
            return Err(ValidationError::new("budget.n_ins", "n_ins must be at least 1"));
        }
        if self.budget.n_emp < 1 {
            return Err(ValidationError::new("budget.n_emp", "n_emp must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.budget.min_reward_accept) {
            return Err(ValidationError::new("budget.min_reward_accept", "must lie in [0, 1]"));
        }
        if !(self.temperature >= 0.0) {
            return Err(ValidationError::new("temperature", "temperature must be non-negative"));
        }
        if self.max_tokens == 0 {
            return Err(ValidationError::new("max_tokens", "max_tokens must be positive"));
        }
        Ok(())
    }

    pub fn digest(&self) -> Digest {
        canonical_digest(self).expect("RunConfig serializes")
    }
}
