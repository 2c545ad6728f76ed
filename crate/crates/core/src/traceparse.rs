//! Structured reasoning-trace grammar.
//!
//! A trace is a sequence of countdown tags (`<count> N </count>`), each
//! opening a step whose content is the free text up to the next countdown tag.
//! A step may carry `<reflection>…</reflection>` and `<reward>…</reward>`;
//! the final answer is the inner text of the last `<answer>…</answer>` pair.
//! Tag names match ASCII case-insensitively and whitespace inside a tag pair
//! is ignored. Free text is stored unescaped; the serializer escapes `&`, `<`
//! and `>` so that content can never be mistaken for a tag.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::prompts::DEFAULT_BUDGET_TAG;
use crate::types::ValidationError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    Strict,
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub budget: u32,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflection: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub starting_budget: u32,
    pub steps: Vec<Step>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

impl ReasoningTrace {
    pub fn budgets(&self) -> Vec<u32> {
        self.steps.iter().map(|s| s.budget).collect()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().filter_map(|s| s.reward).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagKind {
    Budget,
    Reflection,
    Reward,
    Answer,
}

impl fmt::Display for TagKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TagKind::Budget => "budget",
            TagKind::Reflection => "reflection",
            TagKind::Reward => "reward",
            TagKind::Answer => "answer",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    NoSteps,
    BadBudget,
    BudgetOrder,
    RewardRange,
    BadReward,
    RewardMissing,
    AnswerEmpty,
    UnclosedTag(TagKind),
    UnexpectedClose(TagKind),
    OutsideStep(TagKind),
    Duplicate(TagKind),
    RewardWithoutReflection,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{kind:?} at byte {offset}: {detail}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub offset: usize,
    pub detail: String,
}

impl ParseError {
    fn new(kind: ParseErrorKind, offset: usize, detail: impl Into<String>) -> Self {
        Self { kind, offset, detail: detail.into() }
    }
}

#[derive(Debug, Clone, Copy)]
struct Tag {
    kind: TagKind,
    closing: bool,
    start: usize,
    end: usize,
}

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape(s: &str) -> String {
    if !s.contains('&') {
        return s.to_owned();
    }
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(pos) = rest.find('&') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        let (rep, len) = if tail.starts_with("&amp;") {
            ('&', 5)
        } else if tail.starts_with("&lt;") {
            ('<', 4)
        } else if tail.starts_with("&gt;") {
            ('>', 4)
        } else {
            ('&', 1)
        };
        out.push(rep);
        rest = &tail[len..];
    }
    out.push_str(rest);
    out
}

/// Grammar parameters; the countdown tag name is configurable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceGrammar {
    budget_tag: String,
}

impl Default for TraceGrammar {
    fn default() -> Self {
        Self { budget_tag: DEFAULT_BUDGET_TAG.to_owned() }
    }
}

struct StepBuilder {
    budget: u32,
    pieces: Vec<String>,
    reflection: Option<String>,
    reward: Option<(f64, usize)>,
}

impl StepBuilder {
    fn finish(self, mode: ParseMode) -> Result<Step, ParseError> {
        let mut reflection = self.reflection;
        if let Some((_, offset)) = self.reward {
            if reflection.is_none() {
                match mode {
                    ParseMode::Strict => {
                        return Err(ParseError::new(
                            ParseErrorKind::RewardWithoutReflection,
                            offset,
                            "reward without a reflection in the same step",
                        ))
                    }
                    ParseMode::Lenient => reflection = Some(String::new()),
                }
            }
        }
        Ok(Step {
            budget: self.budget,
            content: self.pieces.join("\n"),
            reflection,
            reward: self.reward.map(|(r, _)| r),
        })
    }
}

fn parse_reward(inner: &str, offset: usize) -> Result<f64, ParseError> {
    let t = inner.trim();
    let v: f64 = t
        .parse()
        .map_err(|_| ParseError::new(ParseErrorKind::BadReward, offset, format!("reward {t:?} is not a number")))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(ParseError::new(ParseErrorKind::RewardRange, offset, format!("reward {v} outside [0, 1]")));
    }
    Ok(v)
}

impl TraceGrammar {
    pub fn new(budget_tag: impl Into<String>) -> Self {
        Self { budget_tag: budget_tag.into() }
    }

    pub fn budget_tag(&self) -> &str {
        &self.budget_tag
    }

    fn tag_name(&self, kind: TagKind) -> &str {
        match kind {
            TagKind::Budget => &self.budget_tag,
            TagKind::Reflection => "reflection",
            TagKind::Reward => "reward",
            TagKind::Answer => "answer",
        }
    }

    fn scan(&self, text: &str) -> Vec<Tag> {
        let bytes = text.as_bytes();
        let mut tags = Vec::new();
        let mut i = 0;
        while let Some(rel) = text[i..].find('<') {
            let start = i + rel;
            let mut matched = None;
            let after = &bytes[start + 1..];
            let (closing, name_bytes) = match after.first() {
                Some(b'/') => (true, &after[1..]),
                _ => (false, after),
            };
            for kind in [TagKind::Budget, TagKind::Reflection, TagKind::Reward, TagKind::Answer] {
                let name = self.tag_name(kind).as_bytes();
                if name_bytes.len() > name.len()
                    && name_bytes[..name.len()].eq_ignore_ascii_case(name)
                    && name_bytes[name.len()] == b'>'
                {
                    let end = start + 1 + usize::from(closing) + name.len() + 1;
                    matched = Some(Tag { kind, closing, start, end });
                    break;
                }
            }
            match matched {
                Some(tag) => {
                    tags.push(tag);
                    i = tag.end;
                }
                None => i = start + 1,
            }
        }
        tags
    }

    pub fn parse(&self, text: &str, mode: ParseMode) -> Result<ReasoningTrace, ParseError> {
        let tags = self.scan(text);
        let mut steps: Vec<Step> = Vec::new();
        let mut current: Option<StepBuilder> = None;
        let mut starting_budget = None;
        let mut answer: Option<String> = None;
        let mut cursor = 0;
        let mut i = 0;

        let push_text = |current: &mut Option<StepBuilder>, chunk: &str| {
            if let Some(step) = current.as_mut() {
                let piece = unescape(chunk.trim());
                if !piece.is_empty() {
                    step.pieces.push(piece);
                }
            }
        };

        while i < tags.len() {
            let tag = tags[i];
            push_text(&mut current, &text[cursor..tag.start]);
            if tag.closing {
                if mode == ParseMode::Strict {
                    return Err(ParseError::new(
                        ParseErrorKind::UnexpectedClose(tag.kind),
                        tag.start,
                        format!("closing {} tag without an opening tag", tag.kind),
                    ));
                }
                cursor = tag.end;
                i += 1;
                continue;
            }
            let close = tags[i + 1..].iter().position(|t| t.closing && t.kind == tag.kind).map(|p| p + i + 1);
            let inner = match close {
                Some(j) => {
                    cursor = tags[j].end;
                    i = j + 1;
                    &text[tag.end..tags[j].start]
                }
                None if mode == ParseMode::Strict => {
                    return Err(ParseError::new(
                        ParseErrorKind::UnclosedTag(tag.kind),
                        tag.start,
                        format!("{} tag is never closed", tag.kind),
                    ))
                }
                None if tag.kind == TagKind::Answer => {
                    cursor = text.len();
                    i = tags.len();
                    &text[tag.end..]
                }
                None => {
                    let stop = tags.get(i + 1).map_or(text.len(), |t| t.start);
                    cursor = stop;
                    i += 1;
                    &text[tag.end..stop]
                }
            };

            match tag.kind {
                TagKind::Budget => {
                    let t = inner.trim();
                    let budget: u32 = t.parse().map_err(|_| {
                        ParseError::new(ParseErrorKind::BadBudget, tag.start, format!("budget {t:?} is not a non-negative integer"))
                    })?;
                    if let Some(prev) = current.as_ref().map(|s| s.budget) {
                        if budget >= prev {
                            return Err(ParseError::new(
                                ParseErrorKind::BudgetOrder,
                                tag.start,
                                format!("budget {budget} does not decrease from {prev}"),
                            ));
                        }
                        if mode == ParseMode::Strict && budget + 1 != prev {
                            return Err(ParseError::new(
                                ParseErrorKind::BudgetOrder,
                                tag.start,
                                format!("budget {budget} skips from {prev}; strict mode counts down by one"),
                            ));
                        }
                    }
                    if let Some(done) = current.take() {
                        steps.push(done.finish(mode)?);
                    }
                    starting_budget.get_or_insert(budget);
                    current = Some(StepBuilder { budget, pieces: Vec::new(), reflection: None, reward: None });
                }
                TagKind::Reflection => {
                    let body = unescape(inner.trim());
                    match current.as_mut() {
                        None if mode == ParseMode::Strict => {
                            return Err(ParseError::new(
                                ParseErrorKind::OutsideStep(TagKind::Reflection),
                                tag.start,
                                "reflection before the first budget tag",
                            ))
                        }
                        None => {}
                        Some(step) => match step.reflection.as_mut() {
                            Some(_) if mode == ParseMode::Strict => {
                                return Err(ParseError::new(
                                    ParseErrorKind::Duplicate(TagKind::Reflection),
                                    tag.start,
                                    "second reflection in one step",
                                ))
                            }
                            Some(existing) => {
                                existing.push('\n');
                                existing.push_str(&body);
                            }
                            None => step.reflection = Some(body),
                        },
                    }
                }
                TagKind::Reward => {
                    let reward = parse_reward(inner, tag.start)?;
                    match current.as_mut() {
                        None if mode == ParseMode::Strict => {
                            return Err(ParseError::new(
                                ParseErrorKind::OutsideStep(TagKind::Reward),
                                tag.start,
                                "reward before the first budget tag",
                            ))
                        }
                        None => {}
                        Some(step) => {
                            if step.reward.is_some() && mode == ParseMode::Strict {
                                return Err(ParseError::new(
                                    ParseErrorKind::Duplicate(TagKind::Reward),
                                    tag.start,
                                    "second reward in one step",
                                ));
                            }
                            step.reward = Some((reward, tag.start));
                        }
                    }
                }
                TagKind::Answer => {
                    let body = unescape(inner.trim());
                    if body.is_empty() {
                        if mode == ParseMode::Strict {
                            return Err(ParseError::new(ParseErrorKind::AnswerEmpty, tag.start, "answer is empty"));
                        }
                    } else {
                        answer = Some(body);
                    }
                }
            }
        }
        push_text(&mut current, &text[cursor..]);
        if let Some(done) = current.take() {
            steps.push(done.finish(mode)?);
        }
        let Some(starting_budget) = starting_budget else {
            return Err(ParseError::new(ParseErrorKind::NoSteps, 0, "no budget tag found"));
        };
        Ok(ReasoningTrace { starting_budget, steps, answer })
    }

    pub fn validate(&self, trace: &ReasoningTrace) -> Result<(), ValidationError> {
        let first = trace.steps.first().ok_or_else(|| ValidationError::new("steps", "trace has no steps"))?;
        if first.budget != trace.starting_budget {
            return Err(ValidationError::new(
                "starting_budget",
                format!("starting budget {} differs from first step budget {}", trace.starting_budget, first.budget),
            ));
        }
        if trace.steps.windows(2).any(|w| w[1].budget >= w[0].budget) {
            return Err(ValidationError::new("steps", "budgets must strictly decrease"));
        }
        let untrimmed = |s: &str| s.trim() != s;
        for step in &trace.steps {
            if untrimmed(&step.content) || step.reflection.as_deref().is_some_and(untrimmed) {
                return Err(ValidationError::new("steps", format!("step {} has outer whitespace", step.budget)));
            }
            if let Some(r) = step.reward {
                if !(0.0..=1.0).contains(&r) {
                    return Err(ValidationError::new("reward", format!("reward {r} outside [0, 1]")));
                }
                if step.reflection.is_none() {
                    return Err(ValidationError::new("reward", "reward requires a reflection"));
                }
            }
        }
        if let Some(a) = &trace.answer {
            if a.is_empty() || untrimmed(a) {
                return Err(ValidationError::new("answer", "answer must be nonempty and trimmed"));
            }
        }
        Ok(())
    }

    /// Canonical text form; `parse(serialize(t), Strict) == t` for every valid
    /// trace that counts down by one.
    pub fn serialize(&self, trace: &ReasoningTrace) -> Result<String, ValidationError> {
        self.validate(trace)?;
        let tag = &self.budget_tag;
        let mut out = String::new();
        for step in &trace.steps {
            out.push_str(&format!("<{tag}> {} </{tag}>\n", step.budget));
            if !step.content.is_empty() {
                out.push_str(&escape(&step.content));
                out.push('\n');
            }
            if let Some(r) = &step.reflection {
                out.push_str(&format!("<reflection> {} </reflection>\n", escape(r)));
            }
            if let Some(w) = step.reward {
                out.push_str(&format!("<reward> {w:?} </reward>\n"));
            }
        }
        if let Some(a) = &trace.answer {
            out.push_str(&format!("<answer> {} </answer>\n", escape(a)));
        }
        Ok(out)
    }

    /// Inner text of the last complete answer pair; without one, the text
    /// after an unclosed answer tag, else the text after the last recognized
    /// tag (or the whole text when there are no tags).
    pub fn extract_answer(&self, text: &str) -> Result<String, ParseError> {
        let tags = self.scan(text);
        let mut last_pair: Option<(usize, &str)> = None;
        let mut dangling: Option<usize> = None;
        let mut i = 0;
        while i < tags.len() {
            let tag = tags[i];
            if tag.closing {
                i += 1;
                continue;
            }
            match tags[i + 1..].iter().position(|t| t.closing && t.kind == tag.kind) {
                Some(p) => {
                    let j = i + 1 + p;
                    if tag.kind == TagKind::Answer {
                        last_pair = Some((tag.start, &text[tag.end..tags[j].start]));
                    }
                    i = j + 1;
                }
                None => {
                    if tag.kind == TagKind::Answer {
                        dangling = Some(i);
                        break;
                    }
                    i += 1;
                }
            }
        }
        let (offset, raw) = match (last_pair, dangling) {
            (_, Some(d)) => (tags[d].start, &text[tags[d].end..]),
            (Some(pair), None) => pair,
            (None, None) => match tags.last() {
                Some(t) => (t.end, &text[t.end..]),
                None => (0, text),
            },
        };
        let answer = unescape(raw.trim());
        if answer.is_empty() {
            return Err(ParseError::new(ParseErrorKind::AnswerEmpty, offset, "answer is empty"));
        }
        Ok(answer)
    }

    pub fn has_answer_tag(&self, text: &str) -> bool {
        self.scan(text).iter().any(|t| t.kind == TagKind::Answer && !t.closing)
    }

    /// Value of the first reward pair.
    pub fn extract_reward(&self, text: &str) -> Result<f64, ParseError> {
        let tags = self.scan(text);
        let open = tags
            .iter()
            .position(|t| t.kind == TagKind::Reward && !t.closing)
            .ok_or_else(|| ParseError::new(ParseErrorKind::RewardMissing, text.len(), "no reward tag"))?;
        let close = tags[open + 1..]
            .iter()
            .find(|t| t.kind == TagKind::Reward && t.closing)
            .ok_or_else(|| ParseError::new(ParseErrorKind::UnclosedTag(TagKind::Reward), tags[open].start, "reward tag is never closed"))?;
        parse_reward(&text[tags[open].end..close.start], tags[open].start)
    }
}

pub fn parse_trace(text: &str, mode: ParseMode) -> Result<ReasoningTrace, ParseError> {
    TraceGrammar::default().parse(text, mode)
}

pub fn serialize_trace(trace: &ReasoningTrace) -> Result<String, ValidationError> {
    TraceGrammar::default().serialize(trace)
}

pub fn extract_answer(text: &str) -> Result<String, ParseError> {
    TraceGrammar::default().extract_answer(text)
}

pub fn extract_reward(text: &str) -> Result<f64, ParseError> {
    TraceGrammar::default().extract_reward(text)
}
