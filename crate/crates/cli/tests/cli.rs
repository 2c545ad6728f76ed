use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use o1loom_cli::manifest::{sidecar, RunManifest};
use o1loom_cli::report::parse_csv_values;
use o1loom_core::data::load_mask;
use o1loom_core::metrics::{ciou_dataset, giou_dataset, EmptyPolicy};
use o1loom_core::scripted::{FixtureSuite, WORKED_EMPIRICAL};
use o1loom_core::{EvalReport, ExperienceFile, MetricId, PredictionRecord};
use tempfile::TempDir;

struct Env {
    dir: TempDir,
    suite: FixtureSuite,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let suite = FixtureSuite::write(&dir.path().join("fx")).unwrap();
        Env { dir, suite }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn script(&self) -> String {
        format!("script:{}", self.suite.script.display())
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_o1loom"));
        cmd.args(args).current_dir(self.dir.path());
        for k in ["O1LOOM_API_KEY", "O1LOOM_BASE_URL", "O1LOOM_CACHE_DIR"] {
            cmd.env_remove(k);
        }
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn optimize(&self, task: &str, out: &Path) {
        let data = if task == "vqa" { &self.suite.vqa } else { &self.suite.ris };
        self.ok(&["--backend", &self.script(), "optimize", "--task", task, "--data", s(data), "--out", s(out)]);
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn code(out: &Output) -> Option<i32> {
    out.status.code()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn preds(path: &Path) -> Vec<PredictionRecord> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn manifest(out: &Path) -> RunManifest {
    RunManifest::read(&RunManifest::path_for(out)).unwrap()
}

#[test]
fn optimize_writes_third_reflection_and_checkpoints() {
    let env = Env::new();
    let out = env.path("exp.json");
    env.optimize("vqa", &out);
    let file: ExperienceFile = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(file.text, WORKED_EMPIRICAL[3]);
    assert_eq!(file.history.len(), 3);
    let ckpts = sidecar(&out, "checkpoints");
    let first: ExperienceFile = serde_json::from_str(&fs::read_to_string(ckpts.join("ckpt_000.json")).unwrap()).unwrap();
    assert_eq!(first.text, "Repeat the question.");
    assert!(ckpts.join("ckpt_003.json").exists() && !ckpts.join("ckpt_004.json").exists());

    let m = manifest(&out);
    assert_eq!(m.experience_digest.as_ref(), Some(&m.output_digest));
    for d in [&m.config_digest, &m.dataset_digest, &m.output_digest] {
        assert_eq!(d.as_str().len(), 64);
    }
    let again = env.path("exp2.json");
    env.optimize("vqa", &again);
    assert_eq!(manifest(&again).experience_digest, m.experience_digest);
}

#[test]
fn insufficient_samples_exit_2() {
    let env = Env::new();
    let two = env.path("two.jsonl");
    let text = fs::read_to_string(&env.suite.vqa).unwrap();
    fs::write(&two, text.lines().take(2).collect::<Vec<_>>().join("\n")).unwrap();
    fs::create_dir_all(env.path("images")).unwrap();
    for i in 0..2 {
        fs::copy(env.suite.dir.join(format!("images/vqa_{i}.png")), env.path(&format!("images/vqa_{i}.png"))).unwrap();
    }
    let out = env.run(&[
        "--backend", &env.script(), "optimize", "--task", "vqa", "--data", s(&two), "--samples", "3", "--out", "e.json",
    ]);
    assert_eq!(code(&out), Some(2));
    assert!(stderr(&out).contains("insufficient samples"), "{}", stderr(&out));
}

#[test]
fn dev_selection_records_scores() {
    let env = Env::new();
    let out = env.path("ris_exp.json");
    env.ok(&[
        "--backend", &env.script(), "optimize", "--task", "ris", "--data", s(&env.suite.ris), "--out", s(&out),
        "--dev", s(&env.suite.ris), "--metric", "ciou", "--seg-table", s(&env.suite.seg_table),
    ]);
    let m = manifest(&out);
    let scores = m.checkpoint_scores.unwrap();
    assert_eq!(scores.len(), 4);
    assert!(scores.iter().all(|&x| (0.0..=1.0).contains(&x)));
    assert_eq!(m.selected_checkpoint, Some(0));
    let file: ExperienceFile = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(file.text, "Repeat the question.");
}

#[test]
fn empirical_run_needs_experience() {
    let env = Env::new();
    let out = env.run(&["--backend", &env.script(), "run", "--mode", "empirical", "--data", s(&env.suite.vqa), "--out", "p"]);
    assert_eq!(code(&out), Some(2));
    assert!(stderr(&out).contains("--experience"));
}

#[test]
fn instantial_grammar_run_parses_answers() {
    let env = Env::new();
    let two = env.suite.dir.join("two.jsonl");
    let text = fs::read_to_string(&env.suite.vqa).unwrap();
    fs::write(&two, text.lines().take(2).map(|l| format!("{l}\n")).collect::<String>()).unwrap();
    let out = env.path("inst.jsonl");
    env.ok(&["--backend", "grammar:2:the cup", "run", "--mode", "instantial", "--data", s(&two), "--out", s(&out)]);
    let p = preds(&out);
    assert_eq!(p.len(), 2);
    assert!(p.iter().all(|r| r.answer == "the cup" && r.model_calls == 1));
    let trace_ref = p[0].trace_ref.as_deref().unwrap();
    assert_eq!(trace_ref, "inst.jsonl.traces.jsonl#vqa-0");
    let traces = fs::read_to_string(sidecar(&out, "traces.jsonl")).unwrap();
    assert_eq!(traces.lines().count(), 2);
}

#[test]
fn config_file_sits_below_flags() {
    let env = Env::new();
    let cfg = env.path("o1loom.toml");
    fs::write(&cfg, "backend = \"grammar:1:from the file\"\nmode = \"instantial\"\n").unwrap();
    let out = env.path("a.jsonl");
    env.ok(&["--config", s(&cfg), "run", "--data", s(&env.suite.vqa), "--out", s(&out)]);
    assert!(preds(&out).iter().all(|p| p.answer == "from the file"));
    let out = env.path("b.jsonl");
    env.ok(&["--config", s(&cfg), "--backend", "grammar:1:from the flag", "run", "--data", s(&env.suite.vqa), "--out", s(&out)]);
    assert!(preds(&out).iter().all(|p| p.answer == "from the flag"));
}

#[test]
fn warm_cache_rerun_has_no_misses() {
    let env = Env::new();
    let exp = env.path("exp.json");
    env.optimize("vqa", &exp);
    let cache = env.path("cache");
    let script = env.script();
    let mut digests = Vec::new();
    for (i, extra) in [&[][..], &[][..], &["--offline"][..]].iter().enumerate() {
        let out = env.path(&format!("p{i}.jsonl"));
        let mut args = vec!["--backend", script.as_str(), "--cache-dir", s(&cache)];
        args.extend_from_slice(extra);
        let tail = ["run", "--mode", "empirical", "--data", s(&env.suite.vqa), "--experience", s(&exp), "--out", s(&out)];
        args.extend_from_slice(&tail);
        env.ok(&args);
        let m = manifest(&out);
        if i == 0 {
            assert_eq!((m.cache_misses, m.cache_hits), (8, 0));
        } else {
            assert_eq!((m.cache_misses, m.remote_calls, m.cache_hits), (0, 0, 8));
        }
        digests.push(fs::read(&out).unwrap());
    }
    assert!(digests.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn offline_without_cache_is_a_usage_error() {
    let env = Env::new();
    let out = env.run(&["--offline", "run", "--mode", "instantial", "--data", s(&env.suite.vqa), "--out", "p"]);
    assert_eq!(code(&out), Some(2));
}

#[test]
fn backend_failures_exit_3() {
    let env = Env::new();
    let empty = env.path("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let backend = format!("script:{}", empty.display());
    let out = env.run(&["--backend", &backend, "optimize", "--task", "vqa", "--data", s(&env.suite.vqa), "--out", "e.json"]);
    assert_eq!(code(&out), Some(3), "{}", stderr(&out));

    let p = env.path("p.jsonl");
    let out = env.run(&["--backend", &backend, "run", "--mode", "instantial", "--data", s(&env.suite.vqa), "--out", s(&p)]);
    assert_eq!(code(&out), Some(3));
    let rows = preds(&p);
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.error.is_some()));
}

#[test]
fn ris_eval_matches_metric_oracles() {
    let env = Env::new();
    let exp = env.path("ris_exp.json");
    env.optimize("ris", &exp);
    let p = env.path("out/ris.jsonl");
    env.ok(&[
        "--backend", &env.script(), "run", "--mode", "empirical", "--data", s(&env.suite.ris), "--experience", s(&exp),
        "--out", s(&p), "--seg-table", s(&env.suite.seg_table),
    ]);
    let report_path = env.path("out/report.json");
    let table = env.ok(&["eval", "--task", "ris", "--preds", s(&p), "--data", s(&env.suite.ris), "--out", s(&report_path)]);
    assert!(table.contains("giou") && table.contains("ciou"));
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();

    let rows = preds(&p);
    let pairs: Vec<_> = (0..3)
        .map(|i| {
            let pred = load_mask(&p.parent().unwrap().join(rows[i].mask.as_deref().unwrap())).unwrap();
            let gt = load_mask(&env.suite.dir.join(format!("masks/gt_{i}.png"))).unwrap();
            (pred, gt)
        })
        .collect();
    let g = giou_dataset(&pairs, EmptyPolicy::One).unwrap();
    let c = ciou_dataset(&pairs, EmptyPolicy::One).unwrap();
    assert!((report.aggregate[&MetricId::Giou] - g).abs() <= 1e-9);
    assert!((report.aggregate[&MetricId::Ciou] - c).abs() <= 1e-9);
    assert_eq!(report.per_sample.len(), 3);

    let base_path = env.path("base.json");
    let mut base = report.clone();
    base.aggregate.insert(MetricId::Giou, g * 0.0237 / 0.1088);
    fs::write(&base_path, serde_json::to_string(&base).unwrap()).unwrap();
    let table = env.ok(&[
        "eval", "--task", "ris", "--preds", s(&p), "--data", s(&env.suite.ris), "--baseline", s(&base_path), "--out",
        s(&env.path("with_base.json")),
    ]);
    assert!(table.contains("+359.07%"), "{table}");

    let out = env.run(&["eval", "--task", "ris", "--metrics", "bleu1", "--preds", s(&p), "--data", s(&env.suite.ris), "--out", "x"]);
    assert_eq!(code(&out), Some(2));
}

#[test]
fn id_mismatch_exit_2() {
    let env = Env::new();
    let p = env.path("p.jsonl");
    env.ok(&["--backend", "grammar:1:x", "run", "--mode", "instantial", "--data", s(&env.suite.vqa), "--out", s(&p)]);
    let text = fs::read_to_string(&p).unwrap();
    fs::write(&p, text.replacen("vqa-0", "vqa-9", 1)).unwrap();
    let out = env.run(&["eval", "--task", "vqa", "--preds", s(&p), "--data", s(&env.suite.vqa), "--out", "r.json"]);
    assert_eq!(code(&out), Some(2));
    assert!(stderr(&out).contains("do not match"));
}

#[test]
fn episodes_eval() {
    let env = Env::new();
    let base = env.path("vln_base.json");
    env.ok(&["eval", "--task", "vln", "--episodes", s(&env.suite.baseline_episodes), "--out", s(&base)]);
    let table = env.ok(&[
        "eval", "--task", "vln", "--episodes", s(&env.suite.episodes), "--baseline", s(&base), "--out", s(&env.path("v.json")),
    ]);
    assert!(table.contains("sr") && table.contains("+200.00%"), "{table}");
}

#[test]
fn screening_is_deterministic_and_counts_warnings() {
    let env = Env::new();
    let mut outputs = Vec::new();
    for name in ["s1.jsonl", "s2.jsonl"] {
        let out = env.suite.dir.join(name);
        env.ok(&["--backend", &env.script(), "screen", "--data", s(&env.suite.vqa), "--out", s(&out)]);
        outputs.push(fs::read_to_string(&out).unwrap());
        assert_eq!(manifest(&out).warnings, 1);
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0].lines().count(), 4);
    assert!(outputs[0].contains("\"ambiguity\":\"colloquialism\""));
    assert!(outputs[0].contains("\"screening_raw\":\"unsure\""));
}

#[test]
fn report_tables_and_csv() {
    let env = Env::new();
    let a = env.path("a.json");
    let b = env.path("b.json");
    env.ok(&["eval", "--task", "vln", "--episodes", s(&env.suite.baseline_episodes), "--out", s(&a)]);
    env.ok(&["eval", "--task", "vln", "--episodes", s(&env.suite.episodes), "--out", s(&b)]);

    let two = env.ok(&["report", "--runs", s(&a), s(&b)]);
    assert_eq!(two.lines().next().unwrap().matches('\u{394}').count(), 1);
    let one = env.ok(&["report", "--runs", s(&a)]);
    assert!(!one.contains('\u{394}'));

    let csv_path = env.path("cmp.csv");
    env.ok(&["report", "--runs", s(&a), s(&b), "--format", "csv", "--out", s(&csv_path)]);
    let values = parse_csv_values(&fs::read_to_string(&csv_path).unwrap(), 2).unwrap();
    let ra: EvalReport = serde_json::from_str(&fs::read_to_string(&a).unwrap()).unwrap();
    let rb: EvalReport = serde_json::from_str(&fs::read_to_string(&b).unwrap()).unwrap();
    for m in [MetricId::Sr, MetricId::Spl, MetricId::NaviError] {
        assert_eq!(values[m.as_str()], vec![ra.aggregate[&m], rb.aggregate[&m]]);
    }
    assert!(RunManifest::path_for(&csv_path).exists());

    let c = env.path("c.json");
    env.ok(&["eval", "--task", "vln", "--metrics", "sr", "--episodes", s(&env.suite.episodes), "--out", s(&c)]);
    let out = env.run(&["report", "--runs", s(&a), s(&c)]);
    assert_eq!(code(&out), Some(2));
}

#[test]
fn unknown_flags_exit_2() {
    let env = Env::new();
    assert_eq!(code(&env.run(&["run", "--no-such-flag"])), Some(2));
    assert_eq!(code(&env.run(&["--backend", "carrier-pigeon", "screen", "--data", "x", "--out", "y"])), Some(2));
}
