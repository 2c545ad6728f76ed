//! Downstream segmentation models for referring segmentation.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::canonical::Digest;
use crate::types::{Instruction, VisualContext};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub mask_path: PathBuf,
    pub width: u32,
    pub height: u32,
}

impl SegmentationResult {
    pub fn from_mask_file(path: &Path) -> Result<Self, SegmentError> {
        let (width, height) =
            image::image_dimensions(path).map_err(|e| SegmentError::Mask(format!("{}: {e}", path.display())))?;
        Ok(Self { mask_path: path.to_owned(), width, height })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SegmentError {
    #[error("no mask available for sample {sample_id} with instruction {instruction_sha256}")]
    NoMaskAvailable { sample_id: String, instruction_sha256: Digest },
    #[error("unreadable mask: {0}")]
    Mask(String),
    #[error("segmentation service error: {0}")]
    Service(String),
    #[error("segmentation table: {0}")]
    Table(String),
}

pub trait Segmenter: Send + Sync {
    fn segment(&self, sample_id: &str, image: &VisualContext, instruction: &Instruction)
        -> Result<SegmentationResult, SegmentError>;
}

/// One line of a stub table. Without `instruction_sha256` the entry matches
/// any instruction for the sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubEntry {
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction_sha256: Option<Digest>,
    pub mask: String,
}

/// Table-driven segmenter keyed by `(sample_id, instruction digest)`.
pub struct StubSegmenter {
    exact: HashMap<(String, Digest), PathBuf>,
    any: HashMap<String, PathBuf>,
}

impl StubSegmenter {
    pub fn new(entries: Vec<StubEntry>, base_dir: &Path) -> Self {
        let mut exact = HashMap::new();
        let mut any = HashMap::new();
        for e in entries {
            let path = base_dir.join(&e.mask);
            match e.instruction_sha256 {
                Some(d) => {
                    exact.insert((e.sample_id, d), path);
                }
                None => {
                    any.insert(e.sample_id, path);
                }
            }
        }
        Self { exact, any }
    }

    /// Loads a line-delimited table; mask paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, SegmentError> {
        let text = fs::read_to_string(path).map_err(|e| SegmentError::Table(format!("{}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            entries.push(
                serde_json::from_str(line).map_err(|e| SegmentError::Table(format!("line {}: {e}", n + 1)))?,
            );
        }
        Ok(Self::new(entries, path.parent().unwrap_or(Path::new("."))))
    }
}

impl Segmenter for StubSegmenter {
    fn segment(&self, sample_id: &str, _image: &VisualContext, instruction: &Instruction)
        -> Result<SegmentationResult, SegmentError> {
        let digest = instruction.digest();
        let path = self
            .exact
            .get(&(sample_id.to_owned(), digest.clone()))
            .or_else(|| self.any.get(sample_id))
            .ok_or_else(|| SegmentError::NoMaskAvailable { sample_id: sample_id.to_owned(), instruction_sha256: digest })?;
        SegmentationResult::from_mask_file(path)
    }
}

/// Client for an external segmentation service: POSTs
/// `{"image": <data url>, "instruction": <text>}` and expects
/// `{"mask_png_base64": <base64 PNG>}`; masks are written under `out_dir`.
pub struct HttpSegmenter {
    url: String,
    out_dir: PathBuf,
    agent: ureq::Agent,
}

impl HttpSegmenter {
    pub fn new(url: impl Into<String>, out_dir: impl Into<PathBuf>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { url: url.into(), out_dir: out_dir.into(), agent }
    }
}

impl Segmenter for HttpSegmenter {
    fn segment(&self, sample_id: &str, image: &VisualContext, instruction: &Instruction)
        -> Result<SegmentationResult, SegmentError> {
        let b64 = base64::engine::general_purpose::STANDARD;
        let bytes = image.read_verified().map_err(|e| SegmentError::Service(e.to_string()))?;
        let body = json!({
            "image": format!("data:{};base64,{}", image.media_type.mime(), b64.encode(bytes)),
            "instruction": instruction.text(),
        });
        let mut resp = self.agent.post(&self.url).send_json(&body).map_err(|e| SegmentError::Service(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| SegmentError::Service(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(SegmentError::Service(format!("HTTP {status}: {text}")));
        }
        let doc: serde_json::Value = serde_json::from_str(&text).map_err(|e| SegmentError::Service(e.to_string()))?;
        let png = doc
            .get("mask_png_base64")
            .and_then(|v| v.as_str())
            .ok_or_else(|| SegmentError::Service("response lacks mask_png_base64".into()))
            .and_then(|s| b64.decode(s).map_err(|e| SegmentError::Service(e.to_string())))?;
        fs::create_dir_all(&self.out_dir).map_err(|e| SegmentError::Mask(e.to_string()))?;
        let short = &instruction.digest().to_string()[..12];
        let path = self.out_dir.join(format!("{}-{short}.png", sanitize(sample_id)));
        fs::write(&path, png).map_err(|e| SegmentError::Mask(e.to_string()))?;
        SegmentationResult::from_mask_file(&path)
    }
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma};

    fn setup() -> (tempfile::TempDir, VisualContext) {
        let dir = tempfile::tempdir().unwrap();
        let mut m = GrayImage::new(3, 2);
        m.put_pixel(0, 0, Luma([255]));
        m.save(dir.path().join("m.png")).unwrap();
        m.save(dir.path().join("img.png")).unwrap();
        let v = VisualContext::load(&dir.path().join("img.png")).unwrap();
        (dir, v)
    }

    #[test]
    fn stub_hit_and_miss() {
        let (dir, v) = setup();
        let rewritten = Instruction::clear("the small mug").unwrap();
        let table = format!(
            "{{\"sample_id\":\"s1\",\"instruction_sha256\":\"{}\",\"mask\":\"m.png\"}}\n",
            rewritten.digest()
        );
        fs::write(dir.path().join("table.jsonl"), table).unwrap();
        let stub = StubSegmenter::load(&dir.path().join("table.jsonl")).unwrap();
        let hit = stub.segment("s1", &v, &rewritten).unwrap();
        assert_eq!((hit.width, hit.height), (3, 2));
        assert_eq!(hit.mask_path, dir.path().join("m.png"));
        let other = Instruction::clear("the big mug").unwrap();
        assert!(matches!(stub.segment("s1", &v, &other), Err(SegmentError::NoMaskAvailable { .. })));
    }

    #[test]
    fn wildcard_entry_matches_any_instruction() {
        let (dir, v) = setup();
        let stub = StubSegmenter::new(
            vec![StubEntry { sample_id: "s".into(), instruction_sha256: None, mask: "m.png".into() }],
            dir.path(),
        );
        assert!(stub.segment("s", &v, &Instruction::clear("anything").unwrap()).is_ok());
    }
}
