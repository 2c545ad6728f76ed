use std::sync::Arc;

use o1loom_core::backends::{
    stack, Cached, ChatCompletionsBackend, Offline, ResponseCache, RetryPolicy, ScriptedBackend, WireConfig,
};
use o1loom_core::scripted::build_grammar_responder;
use o1loom_core::{Backend, CallStats};

use crate::config::{BackendSpec, Settings};
use crate::CliError;

/// One backend stack shared by the task and reflector roles, with its
/// counters.
pub struct Stack {
    pub backend: Arc<dyn Backend>,
    pub stats: Arc<CallStats>,
}

fn wire(settings: &Settings) -> Arc<dyn Backend> {
    Arc::new(ChatCompletionsBackend::new(
        "wire",
        WireConfig { base_url: settings.base_url.clone(), api_key: settings.api_key.clone(), timeout: settings.timeout },
    ))
}

pub fn build(settings: &Settings) -> Result<Stack, CliError> {
    let stats = Arc::new(CallStats::default());
    let cache = settings.cache_dir.clone().map(ResponseCache::new);
    if settings.offline {
        let cache = cache.ok_or_else(|| CliError::usage("--offline requires a cache directory"))?;
        let backend = Arc::new(Cached::new(Offline::new(settings.backend.id()), cache, Arc::clone(&stats)));
        return Ok(Stack { backend, stats });
    }
    let inner: Arc<dyn Backend> = match &settings.backend {
        BackendSpec::Wire => wire(settings),
        BackendSpec::Script(path) => {
            Arc::new(ScriptedBackend::play("script", path).map_err(|e| CliError::usage(e.to_string()))?)
        }
        BackendSpec::Record(path) => Arc::new(
            ScriptedBackend::record("wire", path, wire(settings)).map_err(|e| CliError::usage(e.to_string()))?,
        ),
        BackendSpec::Grammar { budget, answer } => Arc::new(build_grammar_responder(*budget, answer)),
    };
    let policy = RetryPolicy { base: settings.retry_base, ..RetryPolicy::default() };
    Ok(Stack { backend: stack(inner, cache, policy, Arc::clone(&stats)), stats })
}
