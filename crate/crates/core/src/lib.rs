//! Visual reasoning orchestration: multi-turn experience building, response
//! synthesis, trace parsing, model backends, datasets and metrics.

pub mod backends;
pub mod canonical;
pub mod data;
pub mod engine;
pub mod eval;
pub mod metrics;
pub mod optimizer;
pub mod prompts;
pub mod scripted;
pub mod traceparse;
pub mod types;

pub use backends::{Backend, BackendError, CallStats, ModelRequest, ModelResponse, StatsSnapshot};
pub use canonical::{canonical_digest, to_canonical_json, Digest};
pub use engine::{EngineContext, EngineError, InferenceResult, PredictionRecord, TelemetryRecord};
pub use metrics::{BitMask, EvalReport, MetricId};
pub use optimizer::{ExperienceFile, OptimizationRun, OptimizeError};
pub use traceparse::{ParseMode, ReasoningTrace, Step, TraceGrammar};
pub use types::*;
