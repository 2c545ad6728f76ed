//! Prompt templates and placeholder rendering.
//!
//! Placeholders are `{name}` with `name` drawn from a fixed set; `{{` and `}}`
//! produce literal braces. A `{` that does not open a well-formed
//! `{identifier}` is kept literally.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Every placeholder a template body may reference.
pub const PLACEHOLDERS: [&str; 5] =
    ["task_description", "ambiguous_instruction", "clear_instruction", "experience", "budget"];

/// Budget countdown tag used by the built-in templates and the trace grammar.
pub const DEFAULT_BUDGET_TAG: &str = "count";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("unbound placeholder: {0}")]
    Unbound(String),
    #[error("unknown placeholder {{{name}}} at byte {offset}")]
    Unknown { name: String, offset: usize },
    #[error("unknown template name {0:?}")]
    UnknownName(String),
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    ReasoningHigh,
    ReasoningGeneral,
    ReflectionHigh,
    ReflectionGeneral,
    SynthesisHigh,
    SynthesisGeneral,
    CombinedInstantial,
    Screening,
}

impl TemplateName {
    pub const ALL: [TemplateName; 8] = [
        TemplateName::ReasoningHigh,
        TemplateName::ReasoningGeneral,
        TemplateName::ReflectionHigh,
        TemplateName::ReflectionGeneral,
        TemplateName::SynthesisHigh,
        TemplateName::SynthesisGeneral,
        TemplateName::CombinedInstantial,
        TemplateName::Screening,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::ReasoningHigh => "reasoning_high",
            TemplateName::ReasoningGeneral => "reasoning_general",
            TemplateName::ReflectionHigh => "reflection_high",
            TemplateName::ReflectionGeneral => "reflection_general",
            TemplateName::SynthesisHigh => "synthesis_high",
            TemplateName::SynthesisGeneral => "synthesis_general",
            TemplateName::CombinedInstantial => "combined_instantial",
            TemplateName::Screening => "screening",
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateName {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| TemplateError::UnknownName(s.to_owned()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    body: String,
}

enum Piece<'a> {
    Literal(&'a str),
    Brace(char),
    Placeholder(&'a str),
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

/// Splits a body into literal text and placeholders, rejecting unknown names.
fn tokenize(body: &str) -> Result<Vec<Piece<'_>>, TemplateError> {
    let mut pieces = Vec::new();
    let bytes = body.as_bytes();
    let mut lit_start = 0;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                pieces.push(Piece::Literal(&body[lit_start..i]));
                pieces.push(Piece::Brace('{'));
                i += 2;
                lit_start = i;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                pieces.push(Piece::Literal(&body[lit_start..i]));
                pieces.push(Piece::Brace('}'));
                i += 2;
                lit_start = i;
            }
            b'{' => match body[i + 1..].find('}') {
                Some(rel) if is_ident(&body[i + 1..i + 1 + rel]) => {
                    let name = &body[i + 1..i + 1 + rel];
                    if !PLACEHOLDERS.contains(&name) {
                        return Err(TemplateError::Unknown { name: name.to_owned(), offset: i });
                    }
                    pieces.push(Piece::Literal(&body[lit_start..i]));
                    pieces.push(Piece::Placeholder(name));
                    i += rel + 2;
                    lit_start = i;
                }
                _ => i += 1,
            },
            _ => i += 1,
        }
    }
    pieces.push(Piece::Literal(&body[lit_start..]));
    Ok(pieces)
}

impl PromptTemplate {
    /// Validates that every placeholder in `body` is a declared one.
    pub fn new(name: TemplateName, body: impl Into<String>) -> Result<Self, TemplateError> {
        let body = body.into();
        tokenize(&body)?;
        Ok(Self { name, body })
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Placeholders referenced by the body, in first-occurrence order.
    pub fn placeholders(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for p in tokenize(&self.body).expect("validated at construction") {
            if let Piece::Placeholder(n) = p {
                if !seen.contains(&n) {
                    seen.push(n);
                }
            }
        }
        seen
    }

    pub fn render(&self, bindings: &Bindings) -> Result<String, TemplateError> {
        render_body(&self.body, bindings)
    }
}

/// Placeholder values for one rendering.
pub type Bindings = BTreeMap<&'static str, String>;

pub fn render_body(body: &str, bindings: &Bindings) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(body.len());
    for piece in tokenize(body)? {
        match piece {
            Piece::Literal(s) => out.push_str(s),
            Piece::Brace(c) => out.push(c),
            Piece::Placeholder(name) => match bindings.get(name) {
                Some(v) => out.push_str(v),
                None => return Err(TemplateError::Unbound(name.to_owned())),
            },
        }
    }
    Ok(out)
}

const REASONING_HIGH: &str = "You are a helpful assistant in normal conversation.
{task_description}
Follow these instructions carefully:
1. Read the given question carefully and reset counter between <count> and </count>
2. Generate a detailed, logical step-by-step solution.
3. Enclose each step of your solution within reasoning tags.
4. You are allowed to use at most {budget} steps (starting budget), keep track of it by counting down within tags <count> </count>, STOP GENERATING MORE STEPS when hitting 0. You don't have to use all of them.

Example format:
<count> [starting budget] </count>
Content of step 1
<count> [remaining budget] </count>
Content of step 2
<count> [remaining budget] </count>
Content of step 3 or Content of some previous step
<count> [remaining budget] </count>
...
<count> [remaining budget] </count>
Content of final step

Description: {ambiguous_instruction}
Provide a detailed, step-by-step solution to a given question.";

const REASONING_GENERAL: &str = "{experience} {ambiguous_instruction}";

const REFLECTION_HIGH: &str = "Follow these instructions carefully:
5. Do a self-reflection when you are unsure about how to proceed; based on the self-reflection and reward, decide whether you need to return to the previous steps.
6. Provide a critical, honest, and subjective self-evaluation of your reasoning process within <reflection> and </reflection> tags.
7. Assign a quality score to your solution as a float between 0.0 (lowest quality) and 1.0 (highest quality), enclosed in <reward> and </reward> tags.
8. If the image or question is not clear enough, you need to reflect and try to get answers from the unclear image or question.

Example format:
<reflection> [Evaluation of the solution] </reflection>
<reward> [Float between 0.0 and 1.0] </reward>";

const REFLECTION_GENERAL: &str = "According to the instruction you generated last time, the annotator has rewritten {ambiguous_instruction} as {clear_instruction}. Please correct or rewrite your instruction based on the image situation. The image and the result of the data annotator are only for your evaluation. Please do not include the specific case in the instructions. You need to generate the full instruction even if no change is needed.

If the annotator cannot find it, please let the annotator guess the one with the highest probability.

Make sure the annotator only responds to the rewritten phrase and does not include any other thing.

Instruction:
{experience}";

const SYNTHESIS_HIGH: &str = "After completing the solution steps, reorganize and synthesize the steps into the final answer within <answer> and </answer> tags. The final answer cannot be empty.";

const SYNTHESIS_GENERAL: &str = "Disambiguated question: {clear_instruction}
Original question: {ambiguous_instruction}";

const SCREENING: &str = "Decide whether the following instruction is ambiguous without looking at the image context. If it is, classify the cause of the ambiguity as exactly one of: ellipsis (essential content is omitted), colloquialism (informal or imprecise expression), subjectivity (depends on personal judgment), relativity (implied comparison with an unstated reference point), other (any other ambiguity). If it is not ambiguous, reply none. Reply with the single category word only.

Instruction: {ambiguous_instruction}";

fn builtin_body(name: TemplateName) -> String {
    match name {
        TemplateName::ReasoningHigh => REASONING_HIGH.to_owned(),
        TemplateName::ReasoningGeneral => REASONING_GENERAL.to_owned(),
        TemplateName::ReflectionHigh => REFLECTION_HIGH.to_owned(),
        TemplateName::ReflectionGeneral => REFLECTION_GENERAL.to_owned(),
        TemplateName::SynthesisHigh => SYNTHESIS_HIGH.to_owned(),
        TemplateName::SynthesisGeneral => SYNTHESIS_GENERAL.to_owned(),
        TemplateName::CombinedInstantial => {
            format!("{REASONING_HIGH}\n{REFLECTION_HIGH}\n{SYNTHESIS_HIGH}")
        }
        TemplateName::Screening => SCREENING.to_owned(),
    }
}

/// The eight built-in templates.
pub fn default_templates() -> BTreeMap<TemplateName, PromptTemplate> {
    TemplateName::ALL
        .into_iter()
        .map(|n| (n, PromptTemplate::new(n, builtin_body(n)).expect("built-in templates are valid")))
        .collect()
}

/// The active template set used by the engine, optimizer and screener.
#[derive(Debug, Clone)]
pub struct PromptSet {
    templates: BTreeMap<TemplateName, PromptTemplate>,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self { templates: default_templates() }
    }
}

impl PromptSet {
    /// Built-in templates with the countdown tag renamed.
    pub fn with_budget_tag(tag: &str) -> Self {
        let mut set = Self::default();
        if tag != DEFAULT_BUDGET_TAG {
            for t in set.templates.values_mut() {
                t.body = t
                    .body
                    .replace("</count>", &format!("</{tag}>"))
                    .replace("<count>", &format!("<{tag}>"));
            }
        }
        set
    }

    pub fn get(&self, name: TemplateName) -> &PromptTemplate {
        &self.templates[&name]
    }

    pub fn set(&mut self, template: PromptTemplate) {
        self.templates.insert(template.name, template);
    }

    /// Loads `<name>.prompt` files from `dir`, replacing templates by name.
    /// Returns the names that were overridden.
    pub fn load_overrides(&mut self, dir: &Path) -> Result<Vec<TemplateName>, TemplateError> {
        let io = |e: std::io::Error| TemplateError::Io { path: dir.display().to_string(), message: e.to_string() };
        let mut entries: Vec<_> = fs::read_dir(dir).map_err(io)?.collect::<Result<_, _>>().map_err(io)?;
        entries.sort_by_key(|e| e.file_name());
        let mut overridden = Vec::new();
        for entry in entries {
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("prompt") {
                continue;
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let name: TemplateName = stem.parse()?;
            let body = fs::read_to_string(&path)
                .map_err(|e| TemplateError::Io { path: path.display().to_string(), message: e.to_string() })?;
            self.set(PromptTemplate::new(name, crate::canonical::normalize_newlines(&body))?);
            overridden.push(name);
        }
        Ok(overridden)
    }

    pub fn render(&self, name: TemplateName, bindings: &Bindings) -> Result<String, TemplateError> {
        self.get(name).render(bindings)
    }
}

/// Plain task prompt used when the reasoning pipeline is bypassed.
pub fn direct_prompt(task_description: &str, instruction: &str) -> String {
    format!("{task_description}\n{instruction}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(pairs: &[(&'static str, &str)]) -> Bindings {
        pairs.iter().map(|&(k, v)| (k, v.to_owned())).collect()
    }

    #[test]
    fn renders_experience() {
        let t = PromptTemplate::new(TemplateName::ReasoningGeneral, "Instruction: {experience}").unwrap();
        assert_eq!(
            t.render(&b(&[("experience", "Repeat the question.")])).unwrap(),
            "Instruction: Repeat the question."
        );
    }

    #[test]
    fn no_placeholders_is_identity() {
        let t = PromptTemplate::new(TemplateName::SynthesisHigh, "plain text [x]").unwrap();
        assert_eq!(t.render(&Bindings::new()).unwrap(), "plain text [x]");
    }

    #[test]
    fn missing_binding_named() {
        let t = PromptTemplate::new(TemplateName::ReasoningHigh, "{budget} steps").unwrap();
        let err = t.render(&Bindings::new()).unwrap_err();
        assert_eq!(err.to_string(), "unbound placeholder: budget");
    }

    #[test]
    fn unknown_placeholder_rejected() {
        let err = PromptTemplate::new(TemplateName::ReasoningHigh, "hi {who}").unwrap_err();
        assert!(matches!(err, TemplateError::Unknown { ref name, offset: 3 } if name == "who"));
    }

    #[test]
    fn doubled_braces_escape() {
        let t = PromptTemplate::new(TemplateName::ReasoningHigh, "{{budget}} is {budget}").unwrap();
        assert_eq!(t.render(&b(&[("budget", "3")])).unwrap(), "{budget} is 3");
    }

    #[test]
    fn placeholder_replaced_every_occurrence() {
        let t = PromptTemplate::new(TemplateName::ReasoningHigh, "{budget}/{budget}").unwrap();
        assert_eq!(t.render(&b(&[("budget", "7")])).unwrap(), "7/7");
    }

    #[test]
    fn eight_defaults() {
        let d = default_templates();
        assert_eq!(d.len(), 8);
        for n in TemplateName::ALL {
            assert_eq!(d[&n].name, n);
        }
    }

    #[test]
    fn default_bodies_carry_expected_phrases() {
        let d = default_templates();
        let syn = d[&TemplateName::SynthesisGeneral].body();
        assert!(syn.contains("Disambiguated question:") && syn.contains("Original question:"));
        assert!(d[&TemplateName::ReflectionGeneral].body().contains("the annotator has rewritten"));
        assert!(d[&TemplateName::ReasoningHigh].body().contains("keep track of it by counting down"));
        assert!(d[&TemplateName::ReflectionHigh].body().contains("quality score to your solution"));
        assert!(d[&TemplateName::SynthesisHigh].body().contains("The final answer cannot be empty"));
        let combined = d[&TemplateName::CombinedInstantial].body();
        for part in [TemplateName::ReasoningHigh, TemplateName::ReflectionHigh, TemplateName::SynthesisHigh] {
            assert!(combined.contains(d[&part].body()));
        }
        let screening = d[&TemplateName::Screening].body();
        for a in crate::types::Ambiguity::ALL {
            assert!(screening.contains(a.as_str()));
        }
        assert!(screening.contains("none"));
    }

    #[test]
    fn reflection_general_placeholders() {
        let d = default_templates();
        assert_eq!(
            d[&TemplateName::ReflectionGeneral].placeholders(),
            vec!["ambiguous_instruction", "clear_instruction", "experience"]
        );
    }

    #[test]
    fn budget_tag_rename() {
        let set = PromptSet::with_budget_tag("step");
        let body = set.get(TemplateName::ReasoningHigh).body();
        assert!(body.contains("<step> [starting budget] </step>"));
        assert!(!body.contains("<count>"));
    }

    #[test]
    fn overrides_by_name() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("synthesis_general.prompt"), "Q: {clear_instruction}\r\n").unwrap();
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let mut set = PromptSet::default();
        assert_eq!(set.load_overrides(dir.path()).unwrap(), vec![TemplateName::SynthesisGeneral]);
        assert_eq!(set.get(TemplateName::SynthesisGeneral).body(), "Q: {clear_instruction}\n");
    }

    #[test]
    fn override_with_unknown_placeholder_fails() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("screening.prompt"), "{image}").unwrap();
        assert!(matches!(
            PromptSet::default().load_overrides(dir.path()),
            Err(TemplateError::Unknown { .. })
        ));
    }

    proptest! {
        #[test]
        fn render_idempotent_on_output(
            body in "[a-z ,.\\[\\]]{0,40}(\\{(budget|experience)\\}[a-z .]{0,10}){0,3}",
            value in "[A-Za-z0-9 .?]{0,20}",
        ) {
            let t = PromptTemplate::new(TemplateName::ReasoningHigh, body).unwrap();
            let once = t.render(&b(&[("budget", &value), ("experience", &value)])).unwrap();
            let twice = render_body(&once, &Bindings::new()).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
