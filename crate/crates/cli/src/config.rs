//! Settings resolution. Precedence: flags, then the config file, then the
//! environment, then built-in defaults.

use std::path::{Path, PathBuf};
use std::time::Duration;

use o1loom_core::types::{Ablations, EmpiricalUpdate, Execution, Mode};
use o1loom_core::{BackendRef, RunConfig};
use serde::Deserialize;

use crate::args::{GlobalArgs, RunFlags};
use crate::CliError;

pub const DEFAULT_BASE_URL: &str = "https://api.openai.com";
pub const DEFAULT_TASK_MODEL: &str = "gpt-4o-mini";
pub const DEFAULT_REFLECTOR_MODEL: &str = "gpt-4o";
pub const DEFAULT_RETRY_BASE_MS: u64 = 1000;
pub const DEFAULT_TIMEOUT_SECS: u64 = 120;
pub const DEFAULT_PARALLEL: usize = 4;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileBudget {
    pub n_ins: Option<u32>,
    pub n_emp: Option<u32>,
    pub min_reward_accept: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileAblations {
    pub disable_synthesis: Option<bool>,
    pub disable_reasoning_reflection: Option<bool>,
    pub single_example_optimization: Option<bool>,
    pub text_only_optimization: Option<bool>,
}

/// TOML configuration file. Every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub mode: Option<Mode>,
    pub execution: Option<Execution>,
    pub task_model: Option<String>,
    pub reflector_model: Option<String>,
    pub temperature: Option<f64>,
    pub seed: Option<u64>,
    pub max_tokens: Option<u32>,
    pub separator: Option<String>,
    pub empirical_update: Option<EmpiricalUpdate>,
    pub synthesis_image: Option<bool>,
    #[serde(default)]
    pub budget: FileBudget,
    #[serde(default)]
    pub ablations: FileAblations,
    pub backend: Option<String>,
    pub base_url: Option<String>,
    pub cache_dir: Option<PathBuf>,
    pub offline: Option<bool>,
    pub retry_base_ms: Option<u64>,
    pub timeout_secs: Option<u64>,
    pub parallel: Option<usize>,
    pub prompt_dir: Option<PathBuf>,
    pub budget_tag: Option<String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    Wire,
    Script(PathBuf),
    Record(PathBuf),
    Grammar { budget: u32, answer: String },
}

impl BackendSpec {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        let bad = || CliError::usage(format!("unknown backend {s:?} (wire, script:<path>, record:<path>, grammar:<budget>:<answer>)"));
        if s == "wire" {
            return Ok(BackendSpec::Wire);
        }
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "script" if !rest.is_empty() => Ok(BackendSpec::Script(rest.into())),
            "record" if !rest.is_empty() => Ok(BackendSpec::Record(rest.into())),
            "grammar" => {
                let (budget, answer) = rest.split_once(':').ok_or_else(bad)?;
                let budget: u32 = budget.parse().map_err(|_| bad())?;
                if budget == 0 {
                    return Err(CliError::usage("grammar backend budget must be at least 1"));
                }
                Ok(BackendSpec::Grammar { budget, answer: answer.to_owned() })
            }
            _ => Err(bad()),
        }
    }

    /// Identifier recorded in requests, and therefore in cache keys.
    pub fn id(&self) -> &'static str {
        match self {
            BackendSpec::Wire | BackendSpec::Record(_) => "wire",
            BackendSpec::Script(_) => "script",
            BackendSpec::Grammar { .. } => "grammar",
        }
    }
}

/// Everything a command needs besides its own arguments.
#[derive(Debug, Clone)]
pub struct Settings {
    pub run: RunConfig,
    pub backend: BackendSpec,
    pub base_url: String,
    pub api_key: Option<String>,
    pub cache_dir: Option<PathBuf>,
    pub offline: bool,
    pub retry_base: Duration,
    pub timeout: Duration,
    pub parallel: usize,
    pub prompt_dir: Option<PathBuf>,
    pub budget_tag: Option<String>,
}

/// Model names given on the command line for this invocation.
#[derive(Debug, Clone, Default)]
pub struct ModelFlags {
    pub task_model: Option<String>,
    pub reflector_model: Option<String>,
    pub mode: Option<Mode>,
    pub execution: Option<Execution>,
    pub n_emp: Option<u32>,
}

pub fn resolve(
    global: &GlobalArgs,
    run: &RunFlags,
    models: &ModelFlags,
    env: &dyn Fn(&str) -> Option<String>,
) -> Result<Settings, CliError> {
    let file = match &global.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let flag_true = |b: bool| if b { Some(true) } else { None };

    let backend = global.backend.clone().or(file.backend.clone()).unwrap_or_else(|| "wire".into());
    let backend = BackendSpec::parse(&backend)?;
    let id = backend.id();
    let defaults = RunConfig::default();
    let ab = &file.ablations;
    let update = match &run.empirical_update {
        Some(s) => Some(s.parse::<EmpiricalUpdate>().map_err(CliError::usage)?),
        None => file.empirical_update,
    };

    let config = RunConfig {
        mode: models.mode.or(file.mode).unwrap_or(defaults.mode),
        execution: models.execution.or(file.execution).unwrap_or(defaults.execution),
        task_model: BackendRef::new(
            id,
            models.task_model.clone().or(file.task_model.clone()).unwrap_or_else(|| DEFAULT_TASK_MODEL.into()),
        ),
        reflector_model: BackendRef::new(
            id,
            models
                .reflector_model
                .clone()
                .or(file.reflector_model.clone())
                .unwrap_or_else(|| DEFAULT_REFLECTOR_MODEL.into()),
        ),
        temperature: global.temperature.or(file.temperature).unwrap_or(defaults.temperature),
        seed: global.seed.or(file.seed).unwrap_or(defaults.seed),
        max_tokens: global.max_tokens.or(file.max_tokens).unwrap_or(defaults.max_tokens),
        budget: o1loom_core::types::BudgetConfig {
            n_ins: run.n_ins.or(file.budget.n_ins).unwrap_or(defaults.budget.n_ins),
            n_emp: models.n_emp.or(file.budget.n_emp).unwrap_or(defaults.budget.n_emp),
            min_reward_accept: run
                .min_reward_accept
                .or(file.budget.min_reward_accept)
                .unwrap_or(defaults.budget.min_reward_accept),
        },
        ablations: Ablations {
            disable_synthesis: flag_true(run.disable_synthesis).or(ab.disable_synthesis).unwrap_or(false),
            disable_reasoning_reflection: flag_true(run.disable_reasoning_reflection)
                .or(ab.disable_reasoning_reflection)
                .unwrap_or(false),
            single_example_optimization: flag_true(run.single_example)
                .or(ab.single_example_optimization)
                .unwrap_or(false),
            text_only_optimization: flag_true(run.text_only).or(ab.text_only_optimization).unwrap_or(false),
        },
        separator: run.separator.clone().or(file.separator.clone()).unwrap_or(defaults.separator),
        empirical_update: update.unwrap_or(defaults.empirical_update),
        synthesis_image: flag_true(run.synthesis_image).or(file.synthesis_image).unwrap_or(false),
    };
    config.validate().map_err(|e| CliError::usage(e.to_string()))?;

    let offline = global.offline || file.offline.unwrap_or(false);
    let cache_dir = global
        .cache_dir
        .clone()
        .or(file.cache_dir.clone())
        .or_else(|| env("O1LOOM_CACHE_DIR").map(PathBuf::from));
    if offline && cache_dir.is_none() {
        return Err(CliError::usage("--offline requires a cache directory"));
    }
    Ok(Settings {
        run: config,
        backend,
        base_url: global
            .base_url
            .clone()
            .or(file.base_url.clone())
            .or_else(|| env("O1LOOM_BASE_URL"))
            .unwrap_or_else(|| DEFAULT_BASE_URL.into()),
        api_key: env("O1LOOM_API_KEY").filter(|k| !k.is_empty()),
        cache_dir,
        offline,
        retry_base: Duration::from_millis(global.retry_base_ms.or(file.retry_base_ms).unwrap_or(DEFAULT_RETRY_BASE_MS)),
        timeout: Duration::from_secs(global.timeout_secs.or(file.timeout_secs).unwrap_or(DEFAULT_TIMEOUT_SECS)),
        parallel: global.parallel.or(file.parallel).unwrap_or(DEFAULT_PARALLEL).max(1),
        prompt_dir: global.prompt_dir.clone().or(file.prompt_dir.clone()),
        budget_tag: global.budget_tag.clone().or(file.budget_tag.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    #[test]
    fn backend_specs() {
        assert_eq!(BackendSpec::parse("wire").unwrap(), BackendSpec::Wire);
        assert_eq!(BackendSpec::parse("script:a/b.jsonl").unwrap(), BackendSpec::Script("a/b.jsonl".into()));
        assert_eq!(
            BackendSpec::parse("grammar:3:the mug").unwrap(),
            BackendSpec::Grammar { budget: 3, answer: "the mug".into() }
        );
        assert!(BackendSpec::parse("grammar:0:x").is_err());
        assert!(BackendSpec::parse("http").is_err());
        assert_eq!(BackendSpec::parse("record:x").unwrap().id(), "wire");
    }

    #[test]
    fn precedence_flag_file_env_default() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "base_url = \"http://file\"\nseed = 7\ntask_model = \"file-model\"\n[budget]\nn_ins = 4").unwrap();
        let env = |k: &str| match k {
            "O1LOOM_BASE_URL" => Some("http://env".to_owned()),
            "O1LOOM_CACHE_DIR" => Some("/env/cache".to_owned()),
            _ => None,
        };
        let mut g = GlobalArgs { config: Some(f.path().to_owned()), ..Default::default() };
        let s = resolve(&g, &RunFlags::default(), &ModelFlags::default(), &env).unwrap();
        assert_eq!(s.base_url, "http://file");
        assert_eq!(s.cache_dir, Some(PathBuf::from("/env/cache")));
        assert_eq!(s.run.seed, 7);
        assert_eq!(s.run.budget.n_ins, 4);
        assert_eq!(s.run.task_model.model, "file-model");
        assert_eq!(s.run.max_tokens, RunConfig::default().max_tokens);

        g.base_url = Some("http://flag".into());
        g.seed = Some(9);
        let models = ModelFlags { task_model: Some("flag-model".into()), ..Default::default() };
        let run = RunFlags { n_ins: Some(2), ..Default::default() };
        let s = resolve(&g, &run, &models, &env).unwrap();
        assert_eq!((s.base_url.as_str(), s.run.seed, s.run.budget.n_ins), ("http://flag", 9, 2));
        assert_eq!(s.run.task_model.model, "flag-model");

        let s = resolve(&GlobalArgs::default(), &RunFlags::default(), &ModelFlags::default(), &no_env).unwrap();
        assert_eq!(s.base_url, DEFAULT_BASE_URL);
        assert_eq!(s.cache_dir, None);
    }

    #[test]
    fn config_errors_are_usage_errors() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "no_such_key = 1").unwrap();
        let g = GlobalArgs { config: Some(f.path().to_owned()), ..Default::default() };
        assert_eq!(resolve(&g, &RunFlags::default(), &ModelFlags::default(), &no_env).unwrap_err().code, 2);
        let g = GlobalArgs { offline: true, ..Default::default() };
        assert_eq!(resolve(&g, &RunFlags::default(), &ModelFlags::default(), &no_env).unwrap_err().code, 2);
        let run = RunFlags { min_reward_accept: Some(1.5), ..Default::default() };
        assert_eq!(resolve(&GlobalArgs::default(), &run, &ModelFlags::default(), &no_env).unwrap_err().code, 2);
    }
}
