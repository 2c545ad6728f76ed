use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use o1loom_core::backends::{HttpSegmenter, Segmenter, StubSegmenter};
use o1loom_core::data::{
    category_distribution, load_dataset, load_episodes, screen_dataset, write_atomic, write_dataset, DataError,
    LoadMode,
};
use o1loom_core::engine::{decoding, run_dataset};
use o1loom_core::eval::{attach_masks, check_metrics, dev_score, evaluate, evaluate_episodes, EvalError};
use o1loom_core::metrics::{format_improvement, improvement_pct, EmptyPolicy};
use o1loom_core::optimizer::{optimize_empirical, pick_best, select_best_checkpoint};
use o1loom_core::prompts::{PromptSet, DEFAULT_BUDGET_TAG};
use o1loom_core::types::{Execution, Experience, Mode, Task};
use o1loom_core::{
    canonical_digest, Digest, EngineContext, EngineError, EvalReport, ExperienceFile, MetricId, OptimizeError,
    PredictionRecord, TelemetryRecord, TraceGrammar,
};
use serde::Serialize;

use crate::args::{Cli, Command, EmptyIou, GlobalArgs, ReportFormat, RunFlags, SegmentArgs};
use crate::backend::{self, Stack};
use crate::config::{resolve, ModelFlags, Settings};
use crate::manifest::{jsonl, sidecar, RunManifest};
use crate::report::{align, compare, render_csv, render_table};
use crate::CliError;

pub fn run(cli: Cli) -> Result<(), CliError> {
    let env = |k: &str| std::env::var(k).ok();
    let g = &cli.global;
    match cli.command {
        Command::Optimize {
            task, data, samples, general_model, reflector_model, out, dev, metric, seg, run,
        } => {
            let models = ModelFlags {
                task_model: general_model,
                reflector_model,
                mode: Some(Mode::Empirical),
                n_emp: samples,
                ..Default::default()
            };
            let settings = resolve(g, &run, &models, &env)?;
            optimize(&settings, &task, &data, &out, dev.as_deref(), metric.as_deref(), &seg)
        }
        Command::Run { mode, execution, data, experience, out, model, seg, run } => {
            let models = ModelFlags {
                task_model: model,
                mode: mode.map(|m| m.parse::<Mode>()).transpose().map_err(CliError::usage)?,
                execution: execution.map(|e| e.parse::<Execution>()).transpose().map_err(CliError::usage)?,
                ..Default::default()
            };
            let settings = resolve(g, &run, &models, &env)?;
            run_inference(&settings, &data, experience.as_deref(), &out, &seg)
        }
        Command::Eval { task, preds, data, episodes, metrics, baseline, out, empty_iou, success_radius } => {
            let settings = resolve(g, &RunFlags::default(), &ModelFlags::default(), &env)?;
            let policy = match empty_iou {
                EmptyIou::One => EmptyPolicy::One,
                EmptyIou::Zero => EmptyPolicy::Zero,
            };
            let inputs = EvalInputs { preds, data, episodes, baseline, policy, success_radius };
            eval(&settings, &task, &metrics, &inputs, &out)
        }
        Command::Screen { data, model, out } => {
            let models = ModelFlags { task_model: model, ..Default::default() };
            let settings = resolve(g, &RunFlags::default(), &models, &env)?;
            screen(&settings, &data, &out)
        }
        Command::Report { runs, format, out } => report(g, &runs, format, out.as_deref()),
        Command::Fixtures { dir } => {
            let suite = o1loom_core::scripted::FixtureSuite::write(&dir).map_err(CliError::internal)?;
            println!("fixture suite written to {}", suite.dir.display());
            Ok(())
        }
    }
}

fn parse_task(s: &str) -> Result<Task, CliError> {
    s.parse::<Task>().map_err(CliError::usage)
}

fn parse_metrics(task: Task, names: &[String]) -> Result<Vec<MetricId>, CliError> {
    let metrics = if names.is_empty() {
        MetricId::defaults_for(task)
    } else {
        names.iter().map(|n| n.trim().parse::<MetricId>().map_err(CliError::usage)).collect::<Result<_, _>>()?
    };
    check_metrics(task, &metrics).map_err(CliError::usage)?;
    Ok(metrics)
}

fn data_err(e: DataError) -> CliError {
    CliError::usage(e)
}

fn load_data(path: &Path, task: Option<Task>) -> Result<o1loom_core::data::DatasetFile, CliError> {
    let data = load_dataset(path, LoadMode::Strict).map_err(data_err)?;
    for w in &data.warnings {
        log::warn!("{w}");
    }
    if let Some(task) = task {
        if data.task != task {
            return Err(CliError::usage(format!("{} holds {} records, not {task}", path.display(), data.task)));
        }
    }
    Ok(data)
}

fn engine_err(e: EngineError) -> CliError {
    match e {
        EngineError::Config(_) | EngineError::Template(_) => CliError::usage(e),
        _ => CliError::backend(e),
    }
}

fn optimize_err(e: OptimizeError) -> CliError {
    match e {
        OptimizeError::Engine(e) => engine_err(e),
        OptimizeError::EmptyReflection(_) => CliError::backend(e),
        other => CliError::usage(other),
    }
}

fn context(settings: &Settings, stack: &Stack) -> Result<EngineContext, CliError> {
    let tag = settings.budget_tag.as_deref().unwrap_or(DEFAULT_BUDGET_TAG);
    let mut prompts = PromptSet::with_budget_tag(tag);
    if let Some(dir) = &settings.prompt_dir {
        let replaced = prompts.load_overrides(dir).map_err(CliError::usage)?;
        log::info!("prompt overrides: {replaced:?}");
    }
    let backend = std::sync::Arc::clone(&stack.backend);
    Ok(EngineContext::new(std::sync::Arc::clone(&backend), backend).with_prompts(prompts, TraceGrammar::new(tag)))
}

fn segmenter(seg: &SegmentArgs, out: &Path, settings: &Settings) -> Result<Option<Box<dyn Segmenter>>, CliError> {
    if let Some(table) = &seg.seg_table {
        return Ok(Some(Box::new(StubSegmenter::load(table).map_err(CliError::usage)?)));
    }
    if let Some(url) = &seg.seg_url {
        return Ok(Some(Box::new(HttpSegmenter::new(url.clone(), sidecar(out, "masks"), settings.timeout))));
    }
    Ok(None)
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(CliError::internal),
        _ => Ok(()),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<Digest, CliError> {
    ensure_parent(path)?;
    write_atomic(path, bytes).map_err(CliError::internal)?;
    Ok(Digest::of_bytes(bytes))
}

fn pretty<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(CliError::internal)?;
    s.push('\n');
    Ok(s)
}

fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

fn optimize(
    settings: &Settings,
    task: &str,
    data_path: &Path,
    out: &Path,
    dev: Option<&Path>,
    metric: Option<&str>,
    seg: &SegmentArgs,
) -> Result<(), CliError> {
    let start = Instant::now();
    let task = parse_task(task)?;
    let data = load_data(data_path, Some(task))?;
    let dev = dev.map(|p| load_data(p, Some(task))).transpose()?;
    let metric = match metric {
        Some(m) => m.parse::<MetricId>().map_err(CliError::usage)?,
        None => MetricId::defaults_for(task)[0],
    };
    if dev.is_some() {
        check_metrics(task, &[metric]).map_err(CliError::usage)?;
    }
    let stack = backend::build(settings)?;
    let ctx = context(settings, &stack)?;
    let run = optimize_empirical(&ctx, &data.records, &settings.run).map_err(optimize_err)?;

    let (chosen, scores) = match &dev {
        Some(dev) => {
            let segmenter = segmenter(seg, out, settings)?;
            let (best, scores) = select_best_checkpoint(&run, |e| {
                dev_score(&ctx, dev, e, &settings.run, metric, segmenter.as_deref(), settings.parallel)
            })
            .map_err(optimize_err)?;
            (best, Some(scores))
        }
        None => (run.last().clone(), None),
    };

    let ckpt_dir = sidecar(out, "checkpoints");
    for (i, c) in run.checkpoints.iter().enumerate() {
        write(&ckpt_dir.join(format!("ckpt_{i:03}.json")), pretty(&ExperienceFile::new(c, task))?.as_bytes())?;
    }
    let digest = write(out, pretty(&ExperienceFile::new(&chosen, task))?.as_bytes())?;

    let mut m = RunManifest::new("optimize", settings.run.digest(), data.digest(), digest.clone(), settings.run.seed)
        .with_stats(stack.stats.snapshot());
    m.experience_digest = Some(digest);
    m.selected_checkpoint = scores.as_deref().and_then(pick_best).or(Some(run.checkpoints.len() - 1));
    m.checkpoint_scores = scores;
    m.wall_time_ms = elapsed_ms(start);
    let manifest = m.write(out)?;
    println!(
        "optimized over {} samples; checkpoint {} written to {} (manifest {})",
        run.samples_used.len(),
        m.selected_checkpoint.unwrap_or_default(),
        out.display(),
        manifest.display()
    );
    Ok(())
}

fn load_experience(path: &Path) -> Result<(ExperienceFile, Digest), CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let file: ExperienceFile =
        serde_json::from_slice(&bytes).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    file.experience().check_invariants().map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    Ok((file, Digest::of_bytes(&bytes)))
}

#[derive(Serialize)]
struct TraceLine<'a> {
    id: &'a str,
    trace: &'a o1loom_core::ReasoningTrace,
}

fn run_inference(
    settings: &Settings,
    data_path: &Path,
    experience: Option<&Path>,
    out: &Path,
    seg: &SegmentArgs,
) -> Result<(), CliError> {
    let start = Instant::now();
    let config = &settings.run;
    let data = load_data(data_path, None)?;
    let experience: Option<(Experience, Digest)> = match (config.mode, experience) {
        (Mode::Empirical, None) => return Err(CliError::usage("empirical mode requires --experience")),
        (Mode::Empirical, Some(p)) => {
            let (file, digest) = load_experience(p)?;
            if file.task != data.task {
                return Err(CliError::usage(format!(
                    "experience was optimized for {}, dataset is {}",
                    file.task, data.task
                )));
            }
            Some((file.experience(), digest))
        }
        (Mode::Instantial, Some(_)) => {
            log::warn!("--experience is ignored in instantial mode");
            None
        }
        (Mode::Instantial, None) => None,
    };
    let segmenter = segmenter(seg, out, settings)?;
    let stack = backend::build(settings)?;
    let ctx = context(settings, &stack)?;
    let outcomes = run_dataset(&ctx, &data.records, config, experience.as_ref().map(|(e, _)| e), settings.parallel)
        .map_err(engine_err)?;

    let traces_path = sidecar(out, "traces.jsonl");
    let traces_name = traces_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut preds = Vec::with_capacity(outcomes.len());
    let mut traces = Vec::new();
    let mut warnings = 0u64;
    for (sample, outcome) in data.records.iter().zip(&outcomes) {
        let mut p = PredictionRecord::from_outcome(&sample.id, outcome);
        match outcome {
            Ok(r) => {
                if let Some(t) = &r.trace {
                    p.trace_ref = Some(format!("{traces_name}#{}", sample.id));
                    traces.push(TraceLine { id: &sample.id, trace: t });
                }
            }
            Err(e) => {
                log::warn!("{e}");
                warnings += 1;
            }
        }
        preds.push(p);
    }
    if data.task == Task::Ris {
        match &segmenter {
            Some(s) => {
                let base = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
                fs::create_dir_all(base).map_err(CliError::internal)?;
                let w = attach_masks(&data, &mut preds, s.as_ref(), base);
                warnings += w.len() as u64;
            }
            None => {
                log::warn!("ris run without --seg-table or --seg-url: predictions carry no masks");
                warnings += 1;
            }
        }
    }

    let digest = write(out, jsonl(&preds)?.as_bytes())?;
    if !traces.is_empty() {
        write(&traces_path, jsonl(&traces)?.as_bytes())?;
    }
    let telemetry: Vec<TelemetryRecord> =
        data.records.iter().zip(&outcomes).map(|(s, o)| TelemetryRecord::from_outcome(&s.id, o)).collect();
    write(&sidecar(out, "telemetry.jsonl"), jsonl(&telemetry)?.as_bytes())?;

    let failed = outcomes.iter().filter(|o| o.is_err()).count() as u64;
    let mut m = RunManifest::new("run", config.digest(), data.digest(), digest, config.seed)
        .with_stats(stack.stats.snapshot());
    m.experience_digest = experience.map(|(_, d)| d);
    m.failed_samples = failed;
    m.warnings = warnings;
    m.wall_time_ms = elapsed_ms(start);
    m.write(out)?;
    println!("{} predictions ({failed} failed) written to {}", preds.len(), out.display());
    let all_backend = outcomes.iter().all(|o| o.as_ref().err().is_some_and(|e| e.backend_error().is_some()));
    if !outcomes.is_empty() && all_backend {
        return Err(CliError::backend(format!("every sample failed; see {}", out.display())));
    }
    Ok(())
}

pub struct EvalInputs {
    pub preds: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub episodes: Option<PathBuf>,
    pub baseline: Option<PathBuf>,
    pub policy: EmptyPolicy,
    pub success_radius: f64,
}

fn eval_err(e: EvalError) -> CliError {
    CliError::usage(e)
}

fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| CliError::usage(format!("{} line {}: {e}", path.display(), n + 1)))
        })
        .collect()
}

fn load_report(path: &Path) -> Result<EvalReport, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct EvalSettings<'a> {
    task: Task,
    metrics: &'a [MetricId],
    empty_iou: &'static str,
    success_radius: f64,
}

fn eval(settings: &Settings, task: &str, metrics: &[String], inputs: &EvalInputs, out: &Path) -> Result<(), CliError> {
    let start = Instant::now();
    let task = parse_task(task)?;
    let metrics = parse_metrics(task, metrics)?;
    let (report, dataset_digest) = if task == Task::Vln {
        let path = inputs.episodes.as_deref().ok_or_else(|| CliError::usage("task vln needs --episodes"))?;
        let episodes = load_episodes(path, inputs.success_radius).map_err(data_err)?;
        let digest = canonical_digest(&episodes).map_err(CliError::internal)?;
        (evaluate_episodes(&episodes, &metrics, inputs.success_radius).map_err(eval_err)?, digest)
    } else {
        let (Some(preds_path), Some(data_path)) = (&inputs.preds, &inputs.data) else {
            return Err(CliError::usage(format!("task {task} needs --preds and --data")));
        };
        let data = load_data(data_path, Some(task))?;
        let preds = load_predictions(preds_path)?;
        let preds_dir = preds_path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        (evaluate(&data, &preds, preds_dir, &metrics, inputs.policy).map_err(eval_err)?, data.digest())
    };
    for w in &report.warnings {
        log::warn!("{w}");
    }
    let report = match &inputs.baseline {
        Some(p) => {
            let base = load_report(p)?;
            if base.task != task {
                return Err(CliError::usage(format!("baseline report is for {}, not {task}", base.task)));
            }
            report.with_baseline(base.aggregate)
        }
        None => report,
    };
    let digest = write(out, pretty(&report)?.as_bytes())?;
    print!("{}", console_table(&report));

    let eval_settings = EvalSettings {
        task,
        metrics: &metrics,
        empty_iou: if inputs.policy == EmptyPolicy::Zero { "zero" } else { "one" },
        success_radius: inputs.success_radius,
    };
    let config_digest = canonical_digest(&eval_settings).map_err(CliError::internal)?;
    let mut m = RunManifest::new("eval", config_digest, dataset_digest, digest, settings.run.seed);
    m.warnings = report.warnings.len() as u64;
    m.wall_time_ms = elapsed_ms(start);
    m.write(out)?;
    Ok(())
}

/// Metric, value and, with a baseline, the baseline value and signed change.
pub fn console_table(report: &EvalReport) -> String {
    let mut rows = vec![vec!["metric".to_owned(), "value".to_owned()]];
    if report.baseline.is_some() {
        rows[0].extend(["baseline".to_owned(), "change".to_owned()]);
    }
    for (m, v) in &report.aggregate {
        let mut row = vec![m.as_str().to_owned(), format!("{v:.4}")];
        if let Some(base) = &report.baseline {
            match base.get(m) {
                Some(b) => row.extend([format!("{b:.4}"), format_improvement(improvement_pct(*v, *b))]),
                None => row.extend(["-".to_owned(), "n/a".to_owned()]),
            }
        }
        rows.push(row);
    }
    align(&rows)
}

fn screen(settings: &Settings, data_path: &Path, out: &Path) -> Result<(), CliError> {
    let start = Instant::now();
    let data = load_data(data_path, None)?;
    let stack = backend::build(settings)?;
    let ctx = context(settings, &stack)?;
    let n = data.records.len();
    eprintln!("screening {n} records");
    let verdicts = screen_dataset(
        &data.records,
        &*stack.backend,
        &settings.run.task_model,
        &ctx.prompts,
        decoding(&settings.run),
        settings.parallel,
    );
    let mut flagged = Vec::with_capacity(n);
    let mut warnings = 0u64;
    for (sample, v) in data.records.iter().zip(verdicts) {
        let v = v.map_err(|e| CliError::backend(format!("sample {}: {e}", sample.id)))?;
        warnings += u64::from(v.warning.is_some());
        flagged.push(v.apply(sample));
    }
    ensure_parent(out)?;
    write_dataset(out, &flagged).map_err(CliError::internal)?;
    let bytes = fs::read(out).map_err(CliError::internal)?;

    let tagged = flagged.iter().filter(|s| s.ambiguity.is_some()).count();
    println!("{n} records screened, {tagged} ambiguous, {warnings} unparseable replies");
    if let Ok(dist) = category_distribution(&flagged) {
        let rows: Vec<Vec<String>> = std::iter::once(vec!["category".to_owned(), "share".to_owned()])
            .chain(dist.iter().map(|(a, p)| vec![a.as_str().to_owned(), format!("{p:.1}%")]))
            .collect();
        print!("{}", align(&rows));
    }
    let mut m = RunManifest::new(
        "screen",
        settings.run.digest(),
        data.digest(),
        Digest::of_bytes(&bytes),
        settings.run.seed,
    )
    .with_stats(stack.stats.snapshot());
    m.warnings = warnings;
    m.wall_time_ms = elapsed_ms(start);
    m.write(out)?;
    Ok(())
}

fn report(g: &GlobalArgs, runs: &[PathBuf], format: ReportFormat, out: Option<&Path>) -> Result<(), CliError> {
    let start = Instant::now();
    let mut reports = Vec::with_capacity(runs.len());
    let mut inputs = BTreeMap::new();
    for (i, p) in runs.iter().enumerate() {
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("run{i}"));
        let bytes = fs::read(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
        inputs.insert(i, Digest::of_bytes(&bytes));
        reports.push((name, load_report(p)?));
    }
    let comparison = compare(&reports)?;
    let text = match format {
        ReportFormat::Table => render_table(&comparison),
        ReportFormat::Csv => render_csv(&comparison),
    };
    match out {
        Some(out) => {
            let digest = write(out, text.as_bytes())?;
            let format_name = if format == ReportFormat::Csv { "csv" } else { "table" };
            let config_digest = canonical_digest(&format_name).map_err(CliError::internal)?;
            let dataset_digest = canonical_digest(&inputs).map_err(CliError::internal)?;
            let seed = g.seed.unwrap_or(o1loom_core::RunConfig::default().seed);
            let mut m = RunManifest::new("report", config_digest, dataset_digest, digest, seed);
            m.wall_time_ms = elapsed_ms(start);
            m.write(out)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}
