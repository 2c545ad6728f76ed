//! Inference pipelines: instantial reasoning (single-shot or turn-based) for
//! high-capability models, and experience-guided rewriting plus synthesis
//! for general models.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{Backend, BackendError, Decoding, ModelRequest};
use crate::prompts::{direct_prompt, Bindings, PromptSet, TemplateError, TemplateName};
use crate::traceparse::{ParseError, ParseMode, ReasoningTrace, TraceGrammar};
use crate::types::{
    Execution, Experience, Instruction, IterationRecord, Mode, RunConfig, Sample, ValidationError, VisualContext,
};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("sample {sample_id}: {source}")]
    Backend {
        sample_id: String,
        #[source]
        source: BackendError,
    },
    #[error("sample {sample_id}: cannot parse model output: {error}")]
    Parse { sample_id: String, error: ParseError, raw: String },
    #[error("inference failed for sample {0}: empty answer")]
    InferenceFailed(String),
}

impl From<ValidationError> for EngineError {
    fn from(e: ValidationError) -> Self {
        EngineError::Config(e.to_string())
    }
}

impl EngineError {
    pub fn backend_error(&self) -> Option<&BackendError> {
        match self {
            EngineError::Backend { source, .. } => Some(source),
            _ => None,
        }
    }
}

/// Backends and templates shared by every inference episode.
#[derive(Clone)]
pub struct EngineContext {
    pub task_model: Arc<dyn Backend>,
    /// Used only by the optimizer.
    pub reflector_model: Arc<dyn Backend>,
    pub prompts: PromptSet,
    pub grammar: TraceGrammar,
}

impl EngineContext {
    pub fn new(task_model: Arc<dyn Backend>, reflector_model: Arc<dyn Backend>) -> Self {
        Self { task_model, reflector_model, prompts: PromptSet::default(), grammar: TraceGrammar::default() }
    }

    pub fn with_prompts(mut self, prompts: PromptSet, grammar: TraceGrammar) -> Self {
        self.prompts = prompts;
        self.grammar = grammar;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clear_instruction: Option<Instruction>,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<ReasoningTrace>,
    /// Accumulated instantial experience after the last turn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experience_text: Option<String>,
    pub turns_used: u32,
    pub model_calls: u32,
    pub cached_calls: u32,
    pub latency_ms: u64,
    /// Attempts per call in call order; 0 for cache hits.
    pub attempts: Vec<u32>,
}

pub fn decoding(config: &RunConfig) -> Decoding {
    Decoding { temperature: config.temperature, seed: config.seed, max_tokens: config.max_tokens }
}

/// Per-episode call bookkeeping.
struct Episode<'a> {
    sample: &'a Sample,
    config: &'a RunConfig,
    model_calls: u32,
    cached_calls: u32,
    latency_ms: u64,
    attempts: Vec<u32>,
}

impl<'a> Episode<'a> {
    fn new(sample: &'a Sample, config: &'a RunConfig) -> Self {
        Self { sample, config, model_calls: 0, cached_calls: 0, latency_ms: 0, attempts: Vec::new() }
    }

    fn call(&mut self, backend: &dyn Backend, model: &crate::types::BackendRef, prompt: String, image: bool)
        -> Result<String, EngineError> {
        let visual: Option<&VisualContext> = if image { self.sample.visual.as_ref() } else { None };
        let request = ModelRequest::user(model, prompt, visual, decoding(self.config));
        self.model_calls += 1;
        let resp = backend
            .complete(&request)
            .map_err(|source| EngineError::Backend { sample_id: self.sample.id.clone(), source })?;
        self.cached_calls += u32::from(resp.cached);
        self.latency_ms += resp.latency_ms;
        self.attempts.push(resp.attempts);
        Ok(resp.text)
    }

    fn finish(self, answer: String) -> Result<InferenceResult, EngineError> {
        let answer = answer.trim().to_owned();
        if answer.is_empty() {
            return Err(EngineError::InferenceFailed(self.sample.id.clone()));
        }
        Ok(InferenceResult {
            sample_id: self.sample.id.clone(),
            clear_instruction: None,
            answer,
            trace: None,
            experience_text: None,
            turns_used: 0,
            model_calls: self.model_calls,
            cached_calls: self.cached_calls,
            latency_ms: self.latency_ms,
            attempts: self.attempts,
        })
    }
}

fn bindings(sample: &Sample) -> Bindings {
    [
        ("task_description", sample.task.description().to_owned()),
        ("ambiguous_instruction", sample.instruction.text().to_owned()),
    ]
    .into_iter()
    .collect()
}

fn answer_or_text(grammar: &TraceGrammar, text: &str) -> String {
    grammar.extract_answer(text).unwrap_or_default()
}

/// One direct call with the plain task prompt and the image; no experience.
fn run_direct(ctx: &EngineContext, sample: &Sample, config: &RunConfig) -> Result<InferenceResult, EngineError> {
    let mut ep = Episode::new(sample, config);
    let prompt = direct_prompt(sample.task.description(), sample.instruction.text());
    let text = ep.call(&*ctx.task_model, &config.task_model, prompt, true)?;
    let answer = answer_or_text(&ctx.grammar, &text);
    ep.finish(answer)
}

pub fn run_instantial(ctx: &EngineContext, sample: &Sample, config: &RunConfig) -> Result<InferenceResult, EngineError> {
    if config.mode != Mode::Instantial {
        return Err(EngineError::Config("run_instantial requires mode instantial".into()));
    }
    if config.ablations.disable_reasoning_reflection {
        return run_direct(ctx, sample, config);
    }
    match config.execution {
        Execution::SingleShot => single_shot(ctx, sample, config),
        Execution::TurnBased => turn_based(ctx, sample, config),
    }
}

fn single_shot(ctx: &EngineContext, sample: &Sample, config: &RunConfig) -> Result<InferenceResult, EngineError> {
    let mut b = bindings(sample);
    b.insert("budget", config.budget.n_ins.to_string());
    let prompt = if config.ablations.disable_synthesis {
        let rsn = ctx.prompts.render(TemplateName::ReasoningHigh, &b)?;
        let rfl = ctx.prompts.render(TemplateName::ReflectionHigh, &b)?;
        format!("{rsn}\n{rfl}")
    } else {
        ctx.prompts.render(TemplateName::CombinedInstantial, &b)?
    };
    let mut ep = Episode::new(sample, config);
    let raw = ep.call(&*ctx.task_model, &config.task_model, prompt, true)?;
    let trace = ctx
        .grammar
        .parse(&raw, ParseMode::Lenient)
        .map_err(|error| EngineError::Parse { sample_id: sample.id.clone(), error, raw: raw.clone() })?;
    let answer = match &trace.answer {
        Some(a) => a.clone(),
        None if config.ablations.disable_synthesis => {
            trace.steps.last().map(|s| s.content.clone()).unwrap_or_default()
        }
        None => answer_or_text(&ctx.grammar, &raw),
    };
    let turns = trace.steps.len() as u32;
    let mut result = ep.finish(answer)?;
    result.turns_used = turns;
    result.trace = Some(trace);
    Ok(result)
}

fn turn_based(ctx: &EngineContext, sample: &Sample, config: &RunConfig) -> Result<InferenceResult, EngineError> {
    let n_ins = config.budget.n_ins;
    let threshold = config.budget.min_reward_accept;
    let sep = config.separator.as_str();
    let mut ep = Episode::new(sample, config);
    let mut experience = Experience::instantial(config.seed, n_ins);
    let mut last_answer: Option<String> = None;
    let reflection_body = ctx.prompts.render(TemplateName::ReflectionHigh, &bindings(sample))?;

    for turn in 0..n_ins {
        let mut b = bindings(sample);
        b.insert("budget", (n_ins - turn).to_string());
        let mut prompt = ctx.prompts.render(TemplateName::ReasoningHigh, &b)?;
        if !experience.text.is_empty() {
            prompt = format!("{prompt}\n\n{}", experience.text);
        }
        let reasoning = ep.call(&*ctx.task_model, &config.task_model, prompt, true)?;

        let context = Experience::concat(&experience.text, &reasoning, sep);
        let reflection = ep.call(&*ctx.task_model, &config.task_model, format!("{context}\n\n{reflection_body}"), false)?;

        let reward = ctx.grammar.extract_reward(&reflection).ok();
        let answered = [&reflection, &reasoning].into_iter().find(|t| ctx.grammar.has_answer_tag(t));
        let answered = match answered {
            Some(t) => {
                last_answer = ctx.grammar.extract_answer(t).ok();
                true
            }
            None => false,
        };
        experience.push_instantial(
            IterationRecord {
                iteration: turn + 1,
                sample_id: sample.id.clone(),
                reasoning,
                reflection,
                reward: reward.filter(|r| (0.0..=1.0).contains(r)),
            },
            sep,
        );
        let accept = answered && (threshold <= 0.0 || reward.is_some_and(|r| r >= threshold));
        if accept {
            break;
        }
    }

    let turns = experience.history.len() as u32;
    let answer = if config.ablations.disable_synthesis {
        last_answer.unwrap_or_else(|| {
            let last = experience.history.last().map(|r| r.reasoning.as_str()).unwrap_or_default();
            answer_or_text(&ctx.grammar, last)
        })
    } else {
        let synthesis = ctx.prompts.render(TemplateName::SynthesisHigh, &bindings(sample))?;
        let prompt = if experience.text.is_empty() { synthesis } else { format!("{}\n\n{synthesis}", experience.text) };
        let out = ep.call(&*ctx.task_model, &config.task_model, prompt, config.synthesis_image)?;
        answer_or_text(&ctx.grammar, &out)
    };
    let trace = ctx.grammar.parse(&experience.text, ParseMode::Lenient).ok();
    let mut result = ep.finish(answer)?;
    result.turns_used = turns;
    result.trace = trace;
    result.experience_text = Some(experience.text);
    Ok(result)
}

/// Rewrites the instruction under the experience, then answers from the
/// rewritten and original instructions together.
pub fn run_empirical(
    ctx: &EngineContext,
    sample: &Sample,
    experience: &Experience,
    config: &RunConfig,
) -> Result<InferenceResult, EngineError> {
    if config.mode != Mode::Empirical || experience.mode != Mode::Empirical {
        return Err(EngineError::Config("run_empirical requires an empirical config and experience".into()));
    }
    if config.ablations.disable_reasoning_reflection {
        return run_direct(ctx, sample, config);
    }
    let mut ep = Episode::new(sample, config);
    let mut b = bindings(sample);
    b.insert("experience", experience.text.clone());
    let rewrite_prompt = ctx.prompts.render(TemplateName::ReasoningGeneral, &b)?;
    let rewritten = ep.call(&*ctx.task_model, &config.task_model, rewrite_prompt, true)?;
    let clear_text = answer_or_text(&ctx.grammar, &rewritten);
    let clear = Instruction::clear(&clear_text).map_err(|_| EngineError::InferenceFailed(sample.id.clone()))?;

    let answer = if config.ablations.disable_synthesis {
        clear.text().to_owned()
    } else {
        b.insert("clear_instruction", clear.text().to_owned());
        let prompt = ctx.prompts.render(TemplateName::SynthesisGeneral, &b)?;
        let out = ep.call(&*ctx.task_model, &config.task_model, prompt, true)?;
        answer_or_text(&ctx.grammar, &out)
    };
    let mut result = ep.finish(answer)?;
    result.clear_instruction = Some(clear);
    Ok(result)
}

/// Runs every sample with at most `parallel` concurrent episodes. Results
/// are in input order; per-sample failures never abort the run.
pub fn run_dataset(
    ctx: &EngineContext,
    samples: &[Sample],
    config: &RunConfig,
    experience: Option<&Experience>,
    parallel: usize,
) -> Result<Vec<Result<InferenceResult, EngineError>>, EngineError> {
    config.validate()?;
    let experience = match config.mode {
        Mode::Empirical => Some(
            experience
                .filter(|e| e.mode == Mode::Empirical)
                .ok_or_else(|| EngineError::Config("empirical mode requires an empirical experience".into()))?,
        ),
        Mode::Instantial => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| EngineError::Config(e.to_string()))?;
    Ok(pool.install(|| {
        samples
            .par_iter()
            .map(|s| match experience {
                Some(e) => run_empirical(ctx, s, e, config),
                None => run_instantial(ctx, s, config),
            })
            .collect()
    }))
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clear_instruction: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_ref: Option<String>,
    pub model_calls: u32,
    /// Predicted mask, relative to the predictions file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Timing and cache details kept apart from predictions so that replays
/// reproduce the predictions byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub id: String,
    pub model_calls: u32,
    pub cached_calls: u32,
    pub latency_ms: u64,
    pub attempts: Vec<u32>,
}

impl PredictionRecord {
    pub fn from_outcome(sample_id: &str, outcome: &Result<InferenceResult, EngineError>) -> Self {
        match outcome {
            Ok(r) => PredictionRecord {
                id: r.sample_id.clone(),
                answer: r.answer.clone(),
                clear_instruction: r.clear_instruction.as_ref().map(|c| c.text().to_owned()),
                trace_ref: None,
                model_calls: r.model_calls,
                mask: None,
                error: None,
            },
            Err(e) => PredictionRecord {
                id: sample_id.to_owned(),
                answer: String::new(),
                clear_instruction: None,
                trace_ref: None,
                model_calls: 0,
                mask: None,
                error: Some(e.to_string()),
            },
        }
    }
}

impl TelemetryRecord {
    pub fn from_outcome(sample_id: &str, outcome: &Result<InferenceResult, EngineError>) -> Self {
        match outcome {
            Ok(r) => TelemetryRecord {
                id: r.sample_id.clone(),
                model_calls: r.model_calls,
                cached_calls: r.cached_calls,
                latency_ms: r.latency_ms,
                attempts: r.attempts.clone(),
            },
            Err(_) => TelemetryRecord {
                id: sample_id.to_owned(),
                model_calls: 0,
                cached_calls: 0,
                latency_ms: 0,
                attempts: Vec::new(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{CallLog, FnBackend, ScriptRule, ScriptedBackend};
    use crate::types::{SampleRecord, Task};
    use std::sync::Mutex;

    fn sample(id: &str, instruction: &str) -> Sample {
        Sample::from_record(SampleRecord {
            id: id.into(),
            task: Task::Vln,
            image: None,
            instruction: instruction.into(),
            ambiguity: None,
            gt_mask: None,
            answers: None,
            screening_raw: None,
        })
        .unwrap()
    }

    fn queue(replies: &[&str]) -> Arc<dyn Backend> {
        let q = Mutex::new(replies.iter().map(|s| s.to_string()).collect::<std::collections::VecDeque<_>>());
        Arc::new(FnBackend::new("q", move |_r: &ModelRequest| {
            q.lock().unwrap().pop_front().ok_or_else(|| BackendError::Malformed("queue empty".into()))
        }))
    }

    fn ctx(backend: Arc<dyn Backend>) -> EngineContext {
        EngineContext::new(Arc::clone(&backend), backend)
    }

    fn instantial(execution: Execution, n_ins: u32) -> RunConfig {
        let mut c = RunConfig { mode: Mode::Instantial, execution, ..RunConfig::default() };
        c.budget.n_ins = n_ins;
        c
    }

    fn empirical() -> RunConfig {
        RunConfig { mode: Mode::Empirical, ..RunConfig::default() }
    }

    #[test]
    fn turn_based_accumulates_in_call_order() {
        let c = ctx(queue(&["R1", "F1", "R2", "F2", "<answer> S </answer>"]));
        let r = run_instantial(&c, &sample("s", "q"), &instantial(Execution::TurnBased, 2)).unwrap();
        assert_eq!(r.experience_text.as_deref(), Some("R1\nF1\nR2\nF2"));
        assert_eq!(r.answer, "S");
        assert_eq!((r.turns_used, r.model_calls), (2, 5));
    }

    #[test]
    fn turn_based_stops_on_answer_tag() {
        let c = ctx(queue(&["<count> 1 </count> x <answer> A </answer>", "<reflection> ok </reflection>", "final"]));
        let r = run_instantial(&c, &sample("s", "q"), &instantial(Execution::TurnBased, 4)).unwrap();
        assert_eq!((r.turns_used, r.model_calls), (1, 3));
        assert_eq!(r.answer, "final");
    }

    #[test]
    fn reward_gate_defers_acceptance() {
        let mut cfg = instantial(Execution::TurnBased, 3);
        cfg.budget.min_reward_accept = 0.9;
        let c = ctx(queue(&[
            "<answer> a </answer>",
            "<reflection> meh </reflection> <reward> 0.5 </reward>",
            "<answer> b </answer>",
            "<reflection> good </reflection> <reward> 0.95 </reward>",
            "<answer> b </answer>",
        ]));
        let r = run_instantial(&c, &sample("s", "q"), &cfg).unwrap();
        assert_eq!((r.turns_used, r.model_calls), (2, 5));
    }

    #[test]
    fn single_shot_is_one_call() {
        let c = ctx(queue(&["<count> 1 </count> look <count> 0 </count> done <answer> the mug </answer>"]));
        let r = run_instantial(&c, &sample("s", "q"), &instantial(Execution::SingleShot, 1)).unwrap();
        assert_eq!((r.model_calls, r.turns_used), (1, 2));
        assert_eq!(r.answer, "the mug");
    }

    #[test]
    fn single_shot_parse_error_carries_raw_text() {
        let c = ctx(queue(&["no tags here"]));
        match run_instantial(&c, &sample("s", "q"), &instantial(Execution::SingleShot, 3)) {
            Err(EngineError::Parse { raw, .. }) => assert_eq!(raw, "no tags here"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empirical_two_calls_and_pass_through() {
        let c = ctx(queue(&["Which bottle is lightest in color?", "the leftmost bottle"]));
        let r = run_empirical(&c, &sample("s", "which one?"), &Experience::empirical(42, 3), &empirical()).unwrap();
        assert_eq!(r.clear_instruction.unwrap().text(), "Which bottle is lightest in color?");
        assert_eq!(r.answer, "the leftmost bottle");
        assert_eq!(r.model_calls, 2);
    }

    #[test]
    fn empirical_prompts_carry_experience_and_both_instructions() {
        let log = CallLog::new(queue(&["x_c", "y"]));
        let handle = log.handle();
        let c = ctx(Arc::new(log));
        run_empirical(&c, &sample("s", "which one?"), &Experience::empirical(42, 3), &empirical()).unwrap();
        let calls = handle.lock().unwrap();
        assert_eq!(calls[0].request.joined_text(), "Repeat the question. which one?");
        assert_eq!(calls[1].request.joined_text(), "Disambiguated question: x_c\nOriginal question: which one?");
    }

    #[test]
    fn empirical_ablations() {
        let mut cfg = empirical();
        cfg.ablations.disable_synthesis = true;
        let c = ctx(queue(&["the red one"]));
        let r = run_empirical(&c, &sample("s", "q"), &Experience::empirical(42, 3), &cfg).unwrap();
        assert_eq!((r.model_calls, r.answer.as_str()), (1, "the red one"));

        let mut cfg = empirical();
        cfg.ablations.disable_reasoning_reflection = true;
        let log = CallLog::new(queue(&["direct"]));
        let handle = log.handle();
        let c = ctx(Arc::new(log));
        let r = run_empirical(&c, &sample("s", "q"), &Experience::empirical(42, 3), &cfg).unwrap();
        assert_eq!((r.model_calls, r.answer.as_str()), (1, "direct"));
        assert!(!handle.lock().unwrap()[0].request.joined_text().contains("Repeat the question."));
        assert!(r.clear_instruction.is_none());
    }

    #[test]
    fn dataset_isolates_failures_and_keeps_order() {
        let script = ScriptedBackend::from_rules(
            "s",
            vec![ScriptRule::contains("Disambiguated", "ans"), ScriptRule::contains("good", "rewritten")],
        )
        .unwrap();
        let c = ctx(Arc::new(script));
        let samples = vec![sample("a", "good a"), sample("b", "bad b"), sample("c", "good c")];
        for k in [1, 4] {
            let out = run_dataset(&c, &samples, &empirical(), Some(&Experience::empirical(42, 3)), k).unwrap();
            let ids: Vec<_> = out.iter().map(|o| o.as_ref().map(|r| r.sample_id.clone()).ok()).collect();
            assert_eq!(ids, vec![Some("a".into()), None, Some("c".into())]);
            let rows: Vec<_> = samples.iter().zip(&out).map(|(s, o)| PredictionRecord::from_outcome(&s.id, o)).collect();
            assert_eq!(rows.iter().filter(|r| r.error.is_some()).count(), 1);
            assert_eq!(rows[1].id, "b");
        }
    }

    #[test]
    fn dataset_requires_experience_in_empirical_mode() {
        let c = ctx(queue(&[]));
        assert!(matches!(run_dataset(&c, &[], &empirical(), None, 1), Err(EngineError::Config(_))));
    }
}
