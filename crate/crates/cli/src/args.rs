use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "o1loom", version, about = "Multi-turn visual reasoning orchestration and evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML file mirroring the run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// wire | script:<path> | record:<path> | grammar:<budget>:<answer>
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// Service root for the wire backend (env O1LOOM_BASE_URL).
    #[arg(long, global = true)]
    pub base_url: Option<String>,
    /// Response cache directory (env O1LOOM_CACHE_DIR).
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// Serve only from the cache; any miss fails.
    #[arg(long, global = true)]
    pub offline: bool,
    #[arg(long, global = true)]
    pub retry_base_ms: Option<u64>,
    #[arg(long, global = true)]
    pub timeout_secs: Option<u64>,
    /// Maximum concurrent samples.
    #[arg(long, global = true)]
    pub parallel: Option<usize>,
    /// Directory of `<template>.prompt` overrides.
    #[arg(long, global = true)]
    pub prompt_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub budget_tag: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    #[arg(long, global = true)]
    pub max_tokens: Option<u32>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    #[arg(long)]
    pub n_ins: Option<u32>,
    #[arg(long)]
    pub min_reward_accept: Option<f64>,
    #[arg(long)]
    pub separator: Option<String>,
    /// reflection | reasoning
    #[arg(long)]
    pub empirical_update: Option<String>,
    #[arg(long)]
    pub synthesis_image: bool,
    #[arg(long)]
    pub disable_synthesis: bool,
    #[arg(long)]
    pub disable_reasoning_reflection: bool,
    #[arg(long)]
    pub single_example: bool,
    #[arg(long)]
    pub text_only: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SegmentArgs {
    /// Stub segmentation table (line-delimited {sample_id, instruction_sha256?, mask}).
    #[arg(long)]
    pub seg_table: Option<PathBuf>,
    /// External segmentation service URL.
    #[arg(long, conflicts_with = "seg_table")]
    pub seg_url: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Table,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmptyIou {
    One,
    Zero,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize empirical experience over a few samples.
    Optimize {
        #[arg(long)]
        task: String,
        #[arg(long)]
        data: PathBuf,
        /// Number of optimization iterations (one sample each).
        #[arg(long)]
        samples: Option<u32>,
        #[arg(long)]
        general_model: Option<String>,
        #[arg(long)]
        reflector_model: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Dev set for best-checkpoint selection.
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long, requires = "dev")]
        metric: Option<String>,
        #[command(flatten)]
        seg: SegmentArgs,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Run inference over a dataset.
    Run {
        /// instantial | empirical
        #[arg(long)]
        mode: Option<String>,
        /// single_shot | turn_based
        #[arg(long)]
        execution: Option<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        experience: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model: Option<String>,
        #[command(flatten)]
        seg: SegmentArgs,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Score predictions (or navigation episodes).
    Eval {
        #[arg(long)]
        task: String,
        #[arg(long, required_unless_present = "episodes")]
        preds: Option<PathBuf>,
        #[arg(long, required_unless_present = "episodes")]
        data: Option<PathBuf>,
        /// Pre-recorded navigation episodes (task vln).
        #[arg(long, conflicts_with_all = ["preds", "data"])]
        episodes: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<String>,
        /// Earlier report whose aggregates serve as the baseline.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "one")]
        empty_iou: EmptyIou,
        #[arg(long, default_value_t = o1loom_core::metrics::DEFAULT_SUCCESS_RADIUS)]
        success_radius: f64,
    },
    /// Tag each record with an ambiguity category.
    Screen {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare evaluation reports side by side.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the offline fixture suite (datasets, masks, scripts) to a directory.
    Fixtures {
        #[arg(long)]
        dir: PathBuf,
    },
}
