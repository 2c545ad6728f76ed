//! Dataset files, mask IO, ambiguity screening and category statistics.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat, ImageReader, Luma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{Backend, BackendError, Decoding, ModelRequest};
use crate::canonical::{to_canonical_json, Digest};
use crate::metrics::{BitMask, EpisodeRecord, MetricError};
use crate::prompts::{Bindings, PromptSet, TemplateName};
use crate::types::{canonical_sample_digest, Ambiguity, BackendRef, Sample, SampleRecord, Task, VisualContext};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("line {line}: {field}: {message}")]
    Schema { line: usize, field: String, message: String },
    #[error("{0}: unsupported mask format (expected PNG)")]
    UnsupportedFormat(PathBuf),
    #[error("no tagged samples")]
    NoTaggedSamples,
    #[error(transparent)]
    Metric(#[from] MetricError),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DataError {
    DataError::Io { path: path.to_owned(), message: e.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    #[default]
    Strict,
    /// Invalid records are skipped with a warning.
    Lenient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub path: PathBuf,
    pub task: Task,
    pub records: Vec<Sample>,
    pub schema_version: u32,
    pub warnings: Vec<String>,
}

impl DatasetFile {
    pub fn dir(&self) -> &Path {
        dataset_dir(&self.path)
    }

    /// Resolves a path stored in a record against the dataset directory.
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.dir().join(rel)
    }

    /// Digest over the per-sample canonical digests in file order.
    pub fn digest(&self) -> Digest {
        let mut joined = String::new();
        for s in &self.records {
            let d = canonical_sample_digest(s).expect("loaded samples are valid");
            joined.push_str(d.as_str());
            joined.push('\n');
        }
        Digest::of_str(&joined)
    }

    pub fn ids(&self) -> Vec<&str> {
        self.records.iter().map(|s| s.id.as_str()).collect()
    }
}

fn dataset_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

fn schema(line: usize, field: impl Into<String>, message: impl Into<String>) -> DataError {
    DataError::Schema { line, field: field.into(), message: message.into() }
}

fn parse_line(line_no: usize, line: &str, dir: &Path) -> Result<Sample, DataError> {
    let record: SampleRecord = serde_json::from_str(line).map_err(|e| {
        let msg = e.to_string();
        let field = msg
            .split('`')
            .nth(1)
            .map(str::to_owned)
            .unwrap_or_else(|| "record".to_owned());
        schema(line_no, field, msg)
    })?;
    let mut sample = Sample::from_record(record).map_err(|e| schema(line_no, e.field, e.message))?;
    if let Some(rel) = &sample.image {
        let visual = VisualContext::load(&dir.join(rel)).map_err(|e| schema(line_no, "image", e.to_string()))?;
        sample.visual = Some(visual);
    }
    Ok(sample)
}

/// Reads a line-delimited dataset. Blank lines are ignored; ids must be
/// unique and all records must share one task.
pub fn load_dataset(path: &Path, mode: LoadMode) -> Result<DatasetFile, DataError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let dir = dataset_dir(path);
    let mut records: Vec<Sample> = Vec::new();
    let mut seen = HashSet::new();
    let mut warnings = Vec::new();
    let mut task = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let parsed = parse_line(line_no, line, dir).and_then(|s| {
            if !seen.insert(s.id.clone()) {
                return Err(schema(line_no, "id", format!("duplicate id {:?}", s.id)));
            }
            match task {
                Some(t) if t != s.task => {
                    return Err(schema(line_no, "task", format!("task {} differs from dataset task {t}", s.task)))
                }
                _ => task = Some(s.task),
            }
            Ok(s)
        });
        match (parsed, mode) {
            (Ok(s), _) => records.push(s),
            (Err(e), LoadMode::Strict) => return Err(e),
            (Err(e), LoadMode::Lenient) => {
                log::warn!("{}: skipping {e}", path.display());
                warnings.push(e.to_string());
            }
        }
    }
    let task = task.ok_or_else(|| schema(0, "records", "dataset has no valid records"))?;
    Ok(DatasetFile { path: path.to_owned(), task, records, schema_version: SCHEMA_VERSION, warnings })
}

/// Canonical form: one key-sorted record per line.
pub fn dataset_to_string(records: &[Sample]) -> String {
    let mut out = String::new();
    for s in records {
        out.push_str(&to_canonical_json(&s.to_record()).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_dataset(path: &Path, records: &[Sample]) -> Result<(), DataError> {
    write_atomic(path, dataset_to_string(records).as_bytes())
}

/// Writes through a temporary file in the destination directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let dir = dataset_dir(path);
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

/// Nonzero pixels are foreground. Only PNG is accepted.
pub fn load_mask(path: &Path) -> Result<BitMask, DataError> {
    let reader = ImageReader::open(path)
        .map_err(|e| io_err(path, e))?
        .with_guessed_format()
        .map_err(|e| io_err(path, e))?;
    if reader.format() != Some(ImageFormat::Png) {
        return Err(DataError::UnsupportedFormat(path.to_owned()));
    }
    let img = reader.decode().map_err(|e| io_err(path, e))?;
    let (w, h) = (img.width(), img.height());
    let bits = match img {
        DynamicImage::ImageLuma8(g) => g.pixels().map(|p| p.0[0] != 0).collect(),
        DynamicImage::ImageLuma16(g) => g.pixels().map(|p| p.0[0] != 0).collect(),
        DynamicImage::ImageLumaA8(g) => g.pixels().map(|p| p.0[0] != 0).collect(),
        DynamicImage::ImageLumaA16(g) => g.pixels().map(|p| p.0[0] != 0).collect(),
        other => other.to_rgb16().pixels().map(|p| p.0.iter().any(|&c| c != 0)).collect(),
    };
    Ok(BitMask::new(w, h, bits)?)
}

/// Writes a mask as an 8-bit grayscale PNG with foreground 255.
pub fn save_mask(mask: &BitMask, path: &Path) -> Result<(), DataError> {
    let img = GrayImage::from_fn(mask.width(), mask.height(), |x, y| Luma([if mask.get(x, y) { 255 } else { 0 }]));
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|e| io_err(path, e))?;
    write_atomic(path, buf.get_ref())
}

pub const NONE_CATEGORY: &str = "none";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningVerdict {
    pub sample_id: String,
    /// `None` is the "none" category.
    pub category: Option<Ambiguity>,
    pub raw_model_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl ScreeningVerdict {
    pub fn category_str(&self) -> &'static str {
        self.category.map_or(NONE_CATEGORY, Ambiguity::as_str)
    }

    /// The sample with `ambiguity` and `screening_raw` filled in.
    pub fn apply(&self, sample: &Sample) -> Sample {
        let mut out = sample.clone();
        out.ambiguity = self.category;
        out.screening_raw = Some(self.raw_model_text.clone());
        out
    }
}

/// First word of the reply naming a category (or "none"), case-insensitive.
/// `None` when no category word occurs.
pub fn parse_category(reply: &str) -> Option<Option<Ambiguity>> {
    reply.split(|c: char| !c.is_alphanumeric()).find_map(|word| {
        let w = word.to_lowercase();
        if w == NONE_CATEGORY {
            return Some(None);
        }
        Ambiguity::ALL.into_iter().find(|a| a.as_str() == w).map(Some)
    })
}

pub fn screen_ambiguity(
    sample: &Sample,
    backend: &dyn Backend,
    model: &BackendRef,
    prompts: &PromptSet,
    decoding: Decoding,
) -> Result<ScreeningVerdict, BackendError> {
    let bindings: Bindings = [("ambiguous_instruction", sample.instruction.text().to_owned())].into_iter().collect();
    let prompt = prompts
        .render(TemplateName::Screening, &bindings)
        .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
    let request = ModelRequest::user(model, prompt, sample.visual.as_ref(), decoding);
    let reply = backend.complete(&request)?.text;
    let (category, warning) = match parse_category(&reply) {
        Some(c) => (c, None),
        None => {
            let w = format!("sample {}: unparseable screening reply {:?}, recorded as none", sample.id, reply);
            log::warn!("{w}");
            (None, Some(w))
        }
    };
    Ok(ScreeningVerdict { sample_id: sample.id.clone(), category, raw_model_text: reply, warning })
}

/// Screens every sample with at most `parallel` concurrent requests; results
/// are in input order.
pub fn screen_dataset(
    samples: &[Sample],
    backend: &dyn Backend,
    model: &BackendRef,
    prompts: &PromptSet,
    decoding: Decoding,
    parallel: usize,
) -> Vec<Result<ScreeningVerdict, BackendError>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| {
        samples
            .par_iter()
            .map(|s| screen_ambiguity(s, backend, model, prompts, decoding))
            .collect()
    })
}

/// Share of each present category among tagged samples, in percent rounded
/// to one decimal.
pub fn category_distribution(samples: &[Sample]) -> Result<BTreeMap<Ambiguity, f64>, DataError> {
    let mut counts: BTreeMap<Ambiguity, usize> = BTreeMap::new();
    for a in samples.iter().filter_map(|s| s.ambiguity) {
        *counts.entry(a).or_default() += 1;
    }
    let total: usize = counts.values().sum();
    if total == 0 {
        return Err(DataError::NoTaggedSamples);
    }
    Ok(counts
        .into_iter()
        .map(|(a, n)| (a, (1000.0 * n as f64 / total as f64).round() / 10.0))
        .collect())
}

/// Rounded percentages are accepted when they sum to 100 within 0.1.
pub fn distribution_within_tolerance<'a>(values: impl IntoIterator<Item = &'a f64>) -> bool {
    let sum: f64 = values.into_iter().sum();
    (sum - 100.0).abs() <= 0.1 + 1e-9
}

/// Reads line-delimited episode records, validating each against the
/// success radius.
pub fn load_episodes(path: &Path, success_radius: f64) -> Result<Vec<EpisodeRecord>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let e: EpisodeRecord = serde_json::from_str(line).map_err(|e| schema(i + 1, "episode", e.to_string()))?;
        e.validate(success_radius).map_err(|err| schema(i + 1, "episode", err.to_string()))?;
        if !seen.insert(e.id.clone()) {
            return Err(schema(i + 1, "id", format!("duplicate id {:?}", e.id)));
        }
        out.push(e);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::FnBackend;

    fn write_png(path: &Path) {
        let mut img = GrayImage::new(2, 2);
        img.put_pixel(1, 1, Luma([255]));
        img.save(path).unwrap();
    }

    fn vqa_line(id: &str, extra: &str) -> String {
        let answers: Vec<String> = (0..10).map(|i| format!("\"a{i}\"")).collect();
        format!(
            "{{\"id\":\"{id}\",\"task\":\"vqa\",\"image\":\"img.png\",\"instruction\":\"what is it?\",\"answers\":[{}]{extra}}}",
            answers.join(",")
        )
    }

    fn setup(lines: &[String]) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("img.png"));
        let path = dir.path().join("data.jsonl");
        fs::write(&path, lines.join("\n") + "\n").unwrap();
        (dir, path)
    }

    #[test]
    fn loads_valid_records_with_resolved_images() {
        let (_d, path) = setup(&[vqa_line("1", ""), vqa_line("2", ",\"ambiguity\":\"relativity\""), vqa_line("3", "")]);
        let ds = load_dataset(&path, LoadMode::Strict).unwrap();
        assert_eq!(ds.records.len(), 3);
        assert_eq!(ds.task, Task::Vqa);
        assert_eq!(ds.records[1].ambiguity, Some(Ambiguity::Relativity));
        assert!(ds.records.iter().all(|s| s.visual.is_some()));
    }

    #[test]
    fn duplicate_id_names_the_id() {
        let (_d, path) = setup(&[vqa_line("x", ""), vqa_line("x", "")]);
        let err = load_dataset(&path, LoadMode::Strict).unwrap_err();
        match err {
            DataError::Schema { line, field, message } => {
                assert_eq!((line, field.as_str()), (2, "id"));
                assert!(message.contains("\"x\""));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn lenient_skips_and_warns() {
        let bad = "{\"id\":\"b\",\"task\":\"vqa\",\"image\":\"img.png\",\"instruction\":\"q\",\"answers\":[\"a\"]}".to_owned();
        let (_d, path) = setup(&[vqa_line("1", ""), bad.clone()]);
        match load_dataset(&path, LoadMode::Strict).unwrap_err() {
            DataError::Schema { line, field, .. } => assert_eq!((line, field.as_str()), (2, "answers")),
            other => panic!("{other}"),
        }
        let ds = load_dataset(&path, LoadMode::Lenient).unwrap();
        assert_eq!(ds.records.len(), 1);
        assert_eq!(ds.warnings.len(), 1);
    }

    #[test]
    fn unknown_field_is_a_schema_error() {
        let (_d, path) = setup(&[vqa_line("1", ",\"bogus\":1")]);
        assert!(matches!(load_dataset(&path, LoadMode::Strict), Err(DataError::Schema { line: 1, .. })));
    }

    #[test]
    fn write_then_load_is_byte_stable() {
        let (d, path) = setup(&[vqa_line("1", ""), vqa_line("2", ",\"ambiguity\":\"other\"")]);
        let ds = load_dataset(&path, LoadMode::Strict).unwrap();
        let out = d.path().join("canon.jsonl");
        write_dataset(&out, &ds.records).unwrap();
        let again = load_dataset(&out, LoadMode::Strict).unwrap();
        assert_eq!(again.records, ds.records);
        assert_eq!(fs::read_to_string(&out).unwrap(), dataset_to_string(&again.records));
        assert_eq!(again.digest(), ds.digest());
    }

    #[test]
    fn mask_io() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let mut img = GrayImage::new(3, 1);
        img.put_pixel(0, 0, Luma([1]));
        img.put_pixel(2, 0, Luma([255]));
        img.save(&p).unwrap();
        let m = load_mask(&p).unwrap();
        assert_eq!(m.bits(), &[true, false, true]);
        let zero = dir.path().join("z.png");
        GrayImage::new(2, 2).save(&zero).unwrap();
        assert_eq!(load_mask(&zero).unwrap().count(), 0);
        let round = dir.path().join("r.png");
        save_mask(&m, &round).unwrap();
        assert_eq!(load_mask(&round).unwrap(), m);
        let jpg = dir.path().join("x.jpg");
        fs::write(&jpg, [0xff, 0xd8, 0xff, 0xe0, 0, 0]).unwrap();
        assert!(matches!(load_mask(&jpg), Err(DataError::UnsupportedFormat(_))));
    }

    #[test]
    fn category_parsing() {
        assert_eq!(parse_category("colloquialism"), Some(Some(Ambiguity::Colloquialism)));
        assert_eq!(parse_category("This is Relativity."), Some(Some(Ambiguity::Relativity)));
        assert_eq!(parse_category("None."), Some(None));
        assert_eq!(parse_category("unsure"), None);
        assert_eq!(parse_category("subjectivity, or maybe ellipsis"), Some(Some(Ambiguity::Subjectivity)));
    }

    #[test]
    fn screening_with_scripted_replies() {
        let (_d, path) = setup(&[vqa_line("1", ""), vqa_line("2", "")]);
        let ds = load_dataset(&path, LoadMode::Strict).unwrap();
        let backend = FnBackend::new("s", |_r: &ModelRequest| Ok("unsure".to_owned()));
        let model = BackendRef::new("s", "m");
        let verdicts = screen_dataset(&ds.records, &backend, &model, &PromptSet::default(), Decoding::default(), 2);
        assert_eq!(verdicts.len(), 2);
        let v = verdicts[0].as_ref().unwrap();
        assert_eq!(v.category, None);
        assert!(v.warning.is_some());
        let screened = v.apply(&ds.records[0]);
        assert_eq!(screened.screening_raw.as_deref(), Some("unsure"));
    }

    fn tagged(tags: &[Ambiguity]) -> Vec<Sample> {
        tags.iter()
            .enumerate()
            .map(|(i, &a)| {
                let mut s = Sample::from_record(SampleRecord {
                    id: i.to_string(),
                    task: Task::Vln,
                    image: None,
                    instruction: "go".into(),
                    ambiguity: Some(a),
                    gt_mask: None,
                    answers: None,
                    screening_raw: None,
                })
                .unwrap();
                s.ambiguity = Some(a);
                s
            })
            .collect()
    }

    #[test]
    fn distribution() {
        use Ambiguity::*;
        let d = category_distribution(&tagged(&[Ellipsis, Ellipsis, Other, Relativity])).unwrap();
        assert_eq!(d.into_iter().collect::<Vec<_>>(), vec![(Ellipsis, 50.0), (Relativity, 25.0), (Other, 25.0)]);
        assert!(matches!(category_distribution(&[]), Err(DataError::NoTaggedSamples)));
        assert!(distribution_within_tolerance(&[23.3, 27.3, 3.3, 29.3, 16.7]));
        assert!(!distribution_within_tolerance(&[50.0, 49.0]));
        let thirds = category_distribution(&tagged(&[Ellipsis, Other, Relativity])).unwrap();
        assert!(distribution_within_tolerance(thirds.values()));
    }

    #[test]
    fn episodes_validated_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        fs::write(&p, "{\"id\":\"a\",\"success\":true,\"shortest_path_length\":5,\"agent_path_length\":10,\"final_distance_to_goal\":1}\n").unwrap();
        assert_eq!(load_episodes(&p, 3.0).unwrap().len(), 1);
        assert!(matches!(load_episodes(&p, 0.5), Err(DataError::Schema { line: 1, .. })));
    }
}
