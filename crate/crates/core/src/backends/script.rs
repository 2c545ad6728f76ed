//! Scripted backend: answers from a line-delimited script file.
//!
//! A script line is either a recorded exchange
//! `{"request_digest": "<64 hex>", "response_text": "..."}` or a rule
//! `{"match": "exact_digest"|"contains_text", "key": "...", "response": "...", "fail_times": N}`.
//! Exact-digest entries are consulted first, then `contains_text` rules in
//! file order against the request's joined text.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{cache_key, Backend, BackendError, ModelRequest, ModelResponse};
use crate::canonical::Digest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    ExactDigest,
    ContainsText,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRule {
    #[serde(rename = "match")]
    pub matcher: MatchKind,
    pub key: String,
    pub response: String,
    /// Transient failures injected before the first success.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub fail_times: u32,
}

fn is_zero(n: &u32) -> bool {
    *n == 0
}

impl ScriptRule {
    pub fn contains(key: impl Into<String>, response: impl Into<String>) -> Self {
        Self { matcher: MatchKind::ContainsText, key: key.into(), response: response.into(), fail_times: 0 }
    }

    pub fn exact(digest: &Digest, response: impl Into<String>) -> Self {
        Self { matcher: MatchKind::ExactDigest, key: digest.to_string(), response: response.into(), fail_times: 0 }
    }

    pub fn failing(mut self, times: u32) -> Self {
        self.fail_times = times;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptLine {
    Recorded { request_digest: Digest, response_text: String },
    Rule(ScriptRule),
}

struct RuleState {
    rule: ScriptRule,
    remaining_failures: AtomicU32,
}

pub enum ScriptMode {
    Play,
    /// Misses are forwarded to `inner` and appended to the script file.
    Record { inner: Arc<dyn Backend>, path: PathBuf },
}

pub struct ScriptedBackend {
    id: String,
    exact: HashMap<String, usize>,
    rules: Vec<RuleState>,
    mode: ScriptMode,
    recorder: Option<Mutex<(File, HashSet<Digest>)>>,
}

impl ScriptedBackend {
    pub fn from_rules(id: impl Into<String>, rules: Vec<ScriptRule>) -> Result<Self, BackendError> {
        let mut exact = HashMap::new();
        let mut states = Vec::with_capacity(rules.len());
        for (i, rule) in rules.into_iter().enumerate() {
            if rule.matcher == MatchKind::ExactDigest {
                let d: Digest = rule.key.parse().map_err(|e| BackendError::InvalidRequest(format!("script rule {i}: {e}")))?;
                exact.entry(d.to_string()).or_insert(i);
            }
            states.push(RuleState { remaining_failures: AtomicU32::new(rule.fail_times), rule });
        }
        Ok(Self { id: id.into(), exact, rules: states, mode: ScriptMode::Play, recorder: None })
    }

    pub fn parse_lines(text: &str) -> Result<Vec<ScriptRule>, BackendError> {
        let mut rules = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ScriptLine = serde_json::from_str(line)
                .map_err(|e| BackendError::InvalidRequest(format!("script line {}: {e}", n + 1)))?;
            rules.push(match parsed {
                ScriptLine::Recorded { request_digest, response_text } => ScriptRule::exact(&request_digest, response_text),
                ScriptLine::Rule(r) => r,
            });
        }
        Ok(rules)
    }

    /// Play mode over an existing script file.
    pub fn play(id: impl Into<String>, path: &Path) -> Result<Self, BackendError> {
        let text = fs::read_to_string(path).map_err(|e| BackendError::Io(format!("{}: {e}", path.display())))?;
        Self::from_rules(id, Self::parse_lines(&text)?)
    }

    /// Record mode: replays known entries, forwards misses to `inner` and
    /// appends one line per distinct request digest.
    pub fn record(id: impl Into<String>, path: &Path, inner: Arc<dyn Backend>) -> Result<Self, BackendError> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(BackendError::Io(format!("{}: {e}", path.display()))),
        };
        let mut backend = Self::from_rules(id, Self::parse_lines(&text)?)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| BackendError::Io(format!("{}: {e}", path.display())))?;
        let seen = backend.exact.keys().map(|k| k.parse().expect("validated")).collect();
        backend.recorder = Some(Mutex::new((file, seen)));
        backend.mode = ScriptMode::Record { inner, path: path.to_owned() };
        Ok(backend)
    }

    fn lookup(&self, digest: &Digest, request: &ModelRequest) -> Option<&RuleState> {
        if let Some(&i) = self.exact.get(digest.as_str()) {
            return Some(&self.rules[i]);
        }
        let text = request.joined_text();
        self.rules
            .iter()
            .find(|r| r.rule.matcher == MatchKind::ContainsText && text.contains(&r.rule.key))
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        let digest = cache_key(request);
        if let Some(state) = self.lookup(&digest, request) {
            let injected = state
                .remaining_failures
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
                .is_ok();
            if injected {
                return Err(BackendError::Transient(format!("injected failure for rule {:?}", state.rule.key)));
            }
            return Ok(ModelResponse::new(state.rule.response.clone()));
        }
        match &self.mode {
            ScriptMode::Play => Err(BackendError::ScriptMiss(digest)),
            ScriptMode::Record { inner, path } => {
                let resp = inner.complete(request)?;
                let recorder = self.recorder.as_ref().expect("record mode has a recorder");
                let mut guard = recorder.lock().expect("recorder poisoned");
                let (file, seen) = &mut *guard;
                if seen.insert(digest.clone()) {
                    let line = serde_json::to_string(&ScriptLine::Recorded {
                        request_digest: digest,
                        response_text: resp.text.clone(),
                    })
                    .expect("script line serializes");
                    writeln!(file, "{line}").map_err(|e| BackendError::Io(format!("{}: {e}", path.display())))?;
                }
                Ok(resp)
            }
        }
    }
}
