//! One-time optimization of empirical experience over a handful of samples.

use serde::{Deserialize, Serialize};

use crate::engine::{decoding, EngineContext, EngineError};
use crate::backends::ModelRequest;
use crate::prompts::{Bindings, TemplateName};
use crate::types::{BackendRef, Experience, IterationRecord, Mode, RunConfig, Sample, Task};

#[derive(Debug, thiserror::Error)]
pub enum OptimizeError {
    #[error("insufficient samples: need {needed}, have {available}")]
    InsufficientSamples { needed: usize, available: usize },
    #[error("duplicate sample id {0:?} in optimization set")]
    DuplicateSample(String),
    #[error("empty dev set")]
    EmptyDev,
    #[error("metric {metric} does not apply to task {task}")]
    MetricMismatch { metric: String, task: String },
    #[error("iteration {0}: reflector returned an empty instruction")]
    EmptyReflection(u32),
    #[error("dev scoring: {0}")]
    DevScoring(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationRun {
    /// The initial experience followed by one checkpoint per iteration.
    pub checkpoints: Vec<Experience>,
    pub samples_used: Vec<String>,
    pub reflector_model: BackendRef,
    pub general_model: BackendRef,
    pub seed: u64,
}

impl OptimizationRun {
    pub fn last(&self) -> &Experience {
        self.checkpoints.last().expect("at least the initial checkpoint")
    }
}

fn call(
    backend: &dyn crate::backends::Backend,
    model: &BackendRef,
    prompt: String,
    sample: &Sample,
    image: bool,
    config: &RunConfig,
) -> Result<String, EngineError> {
    let visual = if image { sample.visual.as_ref() } else { None };
    let request = ModelRequest::user(model, prompt, visual, decoding(config));
    backend
        .complete(&request)
        .map(|r| r.text)
        .map_err(|source| EngineError::Backend { sample_id: sample.id.clone(), source })
}

/// Iterates rewrite and reflection over the first `n_emp` samples in input
/// order (or the first sample repeatedly under the single-example ablation),
/// storing every experience as a checkpoint.
pub fn optimize_empirical(
    ctx: &EngineContext,
    samples: &[Sample],
    config: &RunConfig,
) -> Result<OptimizationRun, OptimizeError> {
    config.validate().map_err(EngineError::from)?;
    let n = config.budget.n_emp as usize;
    let single = config.ablations.single_example_optimization;
    let needed = if single { 1 } else { n };
    if samples.len() < needed.max(1) {
        return Err(OptimizeError::InsufficientSamples { needed: needed.max(1), available: samples.len() });
    }
    let sequence: Vec<&Sample> = if single { vec![&samples[0]; n] } else { samples[..n].iter().collect() };
    if !single {
        let mut ids = std::collections::HashSet::new();
        if let Some(dup) = sequence.iter().find(|s| !ids.insert(s.id.as_str())) {
            return Err(OptimizeError::DuplicateSample(dup.id.clone()));
        }
    }
    let image = !config.ablations.text_only_optimization;
    let mut experience = Experience::empirical(config.seed, config.budget.n_emp);
    let mut checkpoints = vec![experience.clone()];

    for (i, sample) in sequence.iter().enumerate() {
        let current = experience.text.clone();
        let mut b: Bindings = [
            ("task_description", sample.task.description().to_owned()),
            ("ambiguous_instruction", sample.instruction.text().to_owned()),
            ("experience", current),
        ]
        .into_iter()
        .collect();
        let rewrite_prompt = ctx.prompts.render(TemplateName::ReasoningGeneral, &b).map_err(EngineError::from)?;
        let reasoning = call(&*ctx.task_model, &config.task_model, rewrite_prompt, sample, image, config)?;
        let rewritten = ctx.grammar.extract_answer(&reasoning).unwrap_or_default();
        b.insert("clear_instruction", rewritten);
        let reflect_prompt = ctx.prompts.render(TemplateName::ReflectionGeneral, &b).map_err(EngineError::from)?;
        let reflection = call(&*ctx.reflector_model, &config.reflector_model, reflect_prompt, sample, image, config)?;
        let iteration = i as u32 + 1;
        if reflection.trim().is_empty() {
            return Err(OptimizeError::EmptyReflection(iteration));
        }
        let reward = ctx.grammar.extract_reward(&reflection).ok().filter(|r| (0.0..=1.0).contains(r));
        experience.push_empirical(
            IterationRecord { iteration, sample_id: sample.id.clone(), reasoning, reflection, reward },
            config.empirical_update,
        );
        log::info!("optimization iteration {iteration}/{n} on sample {}", sample.id);
        checkpoints.push(experience.clone());
    }

    Ok(OptimizationRun {
        checkpoints,
        samples_used: sequence.iter().map(|s| s.id.clone()).collect(),
        reflector_model: config.reflector_model.clone(),
        general_model: config.task_model.clone(),
        seed: config.seed,
    })
}

/// On-disk form of an experience.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperienceFile {
    pub mode: Mode,
    pub task: Task,
    pub text: String,
    pub budget: u32,
    pub seed: u64,
    pub history: Vec<IterationRecord>,
}

impl ExperienceFile {
    pub fn new(experience: &Experience, task: Task) -> Self {
        Self {
            mode: experience.mode,
            task,
            text: experience.text.clone(),
            budget: experience.budget,
            seed: experience.seed,
            history: experience.history.clone(),
        }
    }

    pub fn experience(&self) -> Experience {
        Experience {
            mode: self.mode,
            text: self.text.clone(),
            history: self.history.clone(),
            seed: self.seed,
            budget: self.budget,
        }
    }
}

/// Index of the highest score; the earliest wins ties and NaN never wins.
pub fn pick_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i).or(if scores.is_empty() { None } else { Some(0) })
}

/// Scores every checkpoint and returns the best one with all scores.
pub fn select_best_checkpoint<F>(run: &OptimizationRun, mut score: F) -> Result<(Experience, Vec<f64>), OptimizeError>
where
    F: FnMut(&Experience) -> Result<f64, OptimizeError>,
{
    let scores = run.checkpoints.iter().map(&mut score).collect::<Result<Vec<_>, _>>()?;
    let best = pick_best(&scores).expect("runs have at least one checkpoint");
    Ok((run.checkpoints[best].clone(), scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{Backend, BackendError, CallLog, FnBackend};
    use crate::types::{EmpiricalUpdate, SampleRecord};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn samples(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                Sample::from_record(SampleRecord {
                    id: format!("s{i}"),
                    task: Task::Vln,
                    image: None,
                    instruction: format!("instruction {i}"),
                    ambiguity: None,
                    gt_mask: None,
                    answers: None,
                    screening_raw: None,
                })
                .unwrap()
            })
            .collect()
    }

    fn numbered(prefix: &'static str) -> Arc<dyn Backend> {
        let n = AtomicUsize::new(0);
        Arc::new(FnBackend::new(prefix, move |_r: &ModelRequest| {
            Ok::<_, BackendError>(format!("{prefix}{}", n.fetch_add(1, Ordering::SeqCst) + 1))
        }))
    }

    fn config(n_emp: u32) -> RunConfig {
        let mut c = RunConfig { mode: Mode::Empirical, ..RunConfig::default() };
        c.budget.n_emp = n_emp;
        c
    }

    #[test]
    fn replacement_semantics_and_checkpoints() {
        let ctx = EngineContext::new(numbered("R"), numbered("F"));
        let run = optimize_empirical(&ctx, &samples(5), &config(3)).unwrap();
        let texts: Vec<_> = run.checkpoints.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(texts, vec!["Repeat the question.", "F1", "F2", "F3"]);
        assert_eq!(run.samples_used, vec!["s0", "s1", "s2"]);
        assert!(run.last().check_invariants().is_ok());
        assert_eq!(run.last().history.len(), 3);
    }

    #[test]
    fn reasoning_update_keeps_the_rewrite() {
        let ctx = EngineContext::new(numbered("R"), numbered("F"));
        let mut c = config(2);
        c.empirical_update = EmpiricalUpdate::Reasoning;
        assert_eq!(optimize_empirical(&ctx, &samples(2), &c).unwrap().last().text, "R2");
    }

    #[test]
    fn reflection_prompt_binds_rewrite_and_previous_experience() {
        let log = CallLog::new(numbered("F"));
        let handle = log.handle();
        let ctx = EngineContext::new(numbered("R"), Arc::new(log));
        optimize_empirical(&ctx, &samples(2), &config(2)).unwrap();
        let calls = handle.lock().unwrap();
        let second = calls[1].request.joined_text();
        assert!(second.contains("has rewritten instruction 1 as R2."));
        assert!(second.ends_with("Instruction:\nF1"));
    }

    #[test]
    fn sample_count_rules() {
        let ctx = EngineContext::new(numbered("R"), numbered("F"));
        let err = optimize_empirical(&ctx, &samples(2), &config(3)).unwrap_err();
        assert!(err.to_string().contains("insufficient samples"));
        let mut c = config(3);
        c.ablations.single_example_optimization = true;
        let run = optimize_empirical(&ctx, &samples(1), &c).unwrap();
        assert_eq!(run.samples_used, vec!["s0"; 3]);
        let mut dup = samples(2);
        dup[1].id = "s0".into();
        assert!(matches!(optimize_empirical(&ctx, &dup, &config(2)), Err(OptimizeError::DuplicateSample(_))));
    }

    #[test]
    fn best_checkpoint_selection() {
        assert_eq!(pick_best(&[0.54, 0.56, 0.54, 0.57]), Some(3));
        assert_eq!(pick_best(&[0.5, 0.5, 0.5, 0.5]), Some(0));
        assert_eq!(pick_best(&[f64::NAN, 0.1]), Some(1));
        assert_eq!(pick_best(&[]), None);
        let ctx = EngineContext::new(numbered("R"), numbered("F"));
        let run = optimize_empirical(&ctx, &samples(3), &config(3)).unwrap();
        let scores = [0.54, 0.56, 0.54, 0.57];
        let (best, got) = select_best_checkpoint(&run, |e| Ok(scores[e.history.len()])).unwrap();
        assert_eq!(best.text, "F3");
        assert_eq!(got, scores);
    }
}
