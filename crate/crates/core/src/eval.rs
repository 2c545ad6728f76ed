//! Scoring predictions against datasets, segmentation of RIS answers, and
//! dev-set scoring for checkpoint selection.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Component, Path, PathBuf};

use crate::backends::Segmenter;
use crate::data::{load_mask, DataError, DatasetFile};
use crate::engine::{run_dataset, EngineContext, PredictionRecord};
use crate::metrics::{
    bleu1, bleu1_corpus, ciou_from_totals, iou_with, vln_metrics, vqa_accuracy, BitMask, EmptyPolicy, EpisodeRecord,
    EvalReport, MetricError, MetricId,
};
use crate::optimizer::OptimizeError;
use crate::types::{Experience, Instruction, RunConfig, Task};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("metric {metric} does not apply to task {task}")]
    MetricMismatch { metric: MetricId, task: Task },
    #[error("prediction ids do not match dataset ids: {0}")]
    IdMismatch(String),
    #[error("task vln is scored from episode files")]
    EpisodesRequired,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub fn check_metrics(task: Task, metrics: &[MetricId]) -> Result<(), EvalError> {
    match metrics.iter().find(|m| !m.valid_for(task)) {
        Some(&metric) => Err(EvalError::MetricMismatch { metric, task }),
        None => Ok(()),
    }
}

/// `path` relative to `base` when both are absolute or both relative.
pub fn relative_to(path: &Path, base: &Path) -> PathBuf {
    let p: Vec<Component> = path.components().collect();
    let b: Vec<Component> = base.components().collect();
    if path.is_absolute() != base.is_absolute() {
        return path.to_owned();
    }
    let common = p.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &p[common..] {
        out.push(c.as_os_str());
    }
    out
}

/// Segments each successful RIS prediction's answer and records the mask
/// path relative to `preds_dir`. Returns one warning per unsegmented row.
pub fn attach_masks(
    data: &DatasetFile,
    preds: &mut [PredictionRecord],
    segmenter: &dyn Segmenter,
    preds_dir: &Path,
) -> Vec<String> {
    let mut warnings = Vec::new();
    for (sample, pred) in data.records.iter().zip(preds.iter_mut()) {
        if pred.error.is_some() {
            continue;
        }
        let Some(visual) = &sample.visual else {
            warnings.push(format!("sample {}: no image to segment", sample.id));
            continue;
        };
        let Ok(instruction) = Instruction::clear(&pred.answer) else {
            warnings.push(format!("sample {}: empty answer, nothing to segment", sample.id));
            continue;
        };
        match segmenter.segment(&sample.id, visual, &instruction) {
            Ok(seg) => {
                let abs = std::path::absolute(&seg.mask_path).unwrap_or(seg.mask_path);
                let base = std::path::absolute(preds_dir).unwrap_or_else(|_| preds_dir.to_owned());
                pred.mask = Some(relative_to(&abs, &base).to_string_lossy().replace('\\', "/"));
            }
            Err(e) => {
                log::warn!("{e}");
                warnings.push(e.to_string());
            }
        }
    }
    warnings
}

fn check_ids(data: &DatasetFile, preds: &[PredictionRecord]) -> Result<(), EvalError> {
    let want: BTreeSet<&str> = data.records.iter().map(|s| s.id.as_str()).collect();
    let got: BTreeSet<&str> = preds.iter().map(|p| p.id.as_str()).collect();
    if want == got && preds.len() == data.records.len() {
        return Ok(());
    }
    let missing: Vec<_> = want.difference(&got).take(5).collect();
    let extra: Vec<_> = got.difference(&want).take(5).collect();
    Err(EvalError::IdMismatch(format!(
        "missing {missing:?}, unexpected {extra:?}, {} predictions for {} samples",
        preds.len(),
        data.records.len()
    )))
}

/// Aggregates: accuracy and navigation rates are percentages; IoU and BLEU
/// values are fractions.
pub fn evaluate(
    data: &DatasetFile,
    preds: &[PredictionRecord],
    preds_dir: &Path,
    metrics: &[MetricId],
    policy: EmptyPolicy,
) -> Result<EvalReport, EvalError> {
    check_metrics(data.task, metrics)?;
    if data.task == Task::Vln {
        return Err(EvalError::EpisodesRequired);
    }
    check_ids(data, preds)?;
    let by_id: BTreeMap<&str, &PredictionRecord> = preds.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut per_sample: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut aggregate = BTreeMap::new();
    let mut warnings = Vec::new();
    let n = data.records.len() as f64;
    if n == 0.0 {
        return Err(MetricError::EmptyDataset.into());
    }

    match data.task {
        Task::Ris => {
            let (mut inter, mut union, mut giou) = (0u64, 0u64, 0.0);
            for s in &data.records {
                let gt = load_mask(&data.resolve(s.gt_mask.as_deref().expect("validated ris record")))?;
                let p = by_id[s.id.as_str()];
                let pred = match &p.mask {
                    Some(m) => load_mask(&preds_dir.join(m))?,
                    None => {
                        warnings.push(format!("sample {}: no predicted mask, scored as empty", s.id));
                        BitMask::empty(gt.width(), gt.height())?
                    }
                };
                let (i, u) = pred.overlap(&gt)?;
                let v = iou_with(&pred, &gt, policy)?;
                inter += i;
                union += u;
                giou += v;
                per_sample.entry(s.id.clone()).or_default().insert("iou".into(), v);
            }
            for m in metrics {
                let v = match m {
                    MetricId::Giou => giou / n,
                    MetricId::Ciou => ciou_from_totals(inter, union, policy),
                    _ => unreachable!("checked above"),
                };
                aggregate.insert(*m, v);
            }
        }
        Task::Vqa => {
            let mut items = Vec::new();
            for s in &data.records {
                let p = by_id[s.id.as_str()];
                let answers = s.answers.as_ref().expect("validated vqa record");
                let row = per_sample.entry(s.id.clone()).or_default();
                for m in metrics {
                    match m {
                        MetricId::Accuracy => {
                            row.insert("accuracy".into(), vqa_accuracy(&p.answer, answers)?);
                        }
                        MetricId::Bleu1 => {
                            row.insert("bleu1".into(), bleu1(&p.answer, answers)?);
                        }
                        _ => {}
                    }
                }
                items.push((p.answer.clone(), answers.clone()));
            }
            let mean = |key: &str| per_sample.values().map(|r| r[key]).sum::<f64>() / n;
            for m in metrics {
                let v = match m {
                    MetricId::Accuracy => 100.0 * mean("accuracy"),
                    MetricId::Bleu1 => mean("bleu1"),
                    MetricId::Bleu1Corpus => bleu1_corpus(&items)?,
                    _ => unreachable!("checked above"),
                };
                aggregate.insert(*m, v);
            }
        }
        Task::Vln => unreachable!("rejected above"),
    }
    Ok(EvalReport { task: data.task, per_sample, aggregate, baseline: None, improvement_pct: None, warnings })
}

/// Navigation report from pre-recorded episodes.
pub fn evaluate_episodes(
    episodes: &[EpisodeRecord],
    metrics: &[MetricId],
    success_radius: f64,
) -> Result<EvalReport, EvalError> {
    check_metrics(Task::Vln, metrics)?;
    let m = vln_metrics(episodes, success_radius)?;
    let per_sample = episodes
        .iter()
        .map(|e| {
            let row = [
                ("success".to_owned(), f64::from(u8::from(e.success))),
                ("spl".to_owned(), e.spl()),
                ("navi_error".to_owned(), e.final_distance_to_goal),
            ];
            (e.id.clone(), row.into_iter().collect())
        })
        .collect();
    let aggregate = metrics
        .iter()
        .map(|id| {
            let v = match id {
                MetricId::Sr => m.sr,
                MetricId::Spl => m.spl,
                _ => m.navi_error,
            };
            (*id, v)
        })
        .collect();
    Ok(EvalReport { task: Task::Vln, per_sample, aggregate, baseline: None, improvement_pct: None, warnings: vec![] })
}

/// Runs empirical inference over `dev` under `experience` and returns the
/// aggregate value of `metric`.
pub fn dev_score(
    ctx: &EngineContext,
    dev: &DatasetFile,
    experience: &Experience,
    config: &RunConfig,
    metric: MetricId,
    segmenter: Option<&dyn Segmenter>,
    parallel: usize,
) -> Result<f64, OptimizeError> {
    if dev.records.is_empty() {
        return Err(OptimizeError::EmptyDev);
    }
    let mismatch = || OptimizeError::MetricMismatch { metric: metric.to_string(), task: dev.task.to_string() };
    if !metric.valid_for(dev.task) || dev.task == Task::Vln {
        return Err(mismatch());
    }
    let outcomes = run_dataset(ctx, &dev.records, config, Some(experience), parallel)?;
    let mut preds: Vec<PredictionRecord> = dev
        .records
        .iter()
        .zip(&outcomes)
        .map(|(s, o)| PredictionRecord::from_outcome(&s.id, o))
        .collect();
    let base = dev.dir().to_owned();
    if dev.task == Task::Ris {
        let seg = segmenter.ok_or_else(|| OptimizeError::DevScoring("ris dev scoring needs a segmenter".into()))?;
        attach_masks(dev, &mut preds, seg, &base);
    }
    let report = evaluate(dev, &preds, &base, &[metric], EmptyPolicy::default())
        .map_err(|e| OptimizeError::DevScoring(e.to_string()))?;
    Ok(report.aggregate[&metric])
}
