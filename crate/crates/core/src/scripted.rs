//! Deterministic offline fixtures: grammar-conformant responders, the
//! transcribed worked trace, and an on-disk suite of datasets, masks,
//! episodes and script files.
//!
//! Suite layout (see [`FixtureSuite::write`]):
//!
//! ```text
//! images/vqa_<i>.png  images/ris_<i>.png
//! masks/gt_<i>.png    masks/pred_<i>.png    masks/off_<i>.png
//! vqa.jsonl  ris.jsonl  episodes.jsonl  episodes_baseline.jsonl
//! script.jsonl  script_faulty.jsonl  seg_table.jsonl
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};

use crate::backends::{ScriptRule, ScriptedBackend, StubEntry};
use crate::canonical::to_canonical_json;
use crate::metrics::{BitMask, EpisodeRecord};
use crate::traceparse::{ReasoningTrace, Step, TraceGrammar};
use crate::types::{Instruction, SampleRecord, Task, INITIAL_EMPIRICAL_EXPERIENCE};

/// Strict trace counting `budget..=0`, with a reflection and reward 1.0 on
/// the final step and the given answer.
pub fn grammar_trace(budget: u32, answer: &str, label: &str) -> ReasoningTrace {
    let steps = (0..=budget)
        .rev()
        .map(|b| Step {
            budget: b,
            content: format!("{label} step {}.", budget - b + 1),
            reflection: (b == 0).then(|| "The steps are consistent with the image.".to_owned()),
            reward: (b == 0).then_some(1.0),
        })
        .collect();
    ReasoningTrace { starting_budget: budget, steps, answer: Some(answer.trim().to_owned()) }
}

fn grammar_text(budget: u32, answer: &str, label: &str) -> String {
    TraceGrammar::default().serialize(&grammar_trace(budget, answer, label)).expect("generated traces are valid")
}

/// Backend answering every request with the same strict trace.
pub fn build_grammar_responder(budget: u32, answer: &str) -> ScriptedBackend {
    let rule = ScriptRule::contains("", grammar_text(budget.max(1), answer, "Reasoning"));
    ScriptedBackend::from_rules("grammar", vec![rule]).expect("contains rules are valid")
}

const WORKED_STEPS: [&str; 8] = [
    "Identify the objects marked as bears in the image.",
    "The bears in the image are part of the design on the mugs, which are marked with [7] and [3].",
    "Locate objects that are not plates. In this image, the plate is a prominent object, but we need to identify objects that are not plates.",
    "Exclude the objects that are on the plate, such as the sandwich marked with [4], the soup bowl marked with [2], and the pickle marked with [8].",
    "Identify any objects that are between the two bears but are not on the plate.",
    "",
    "Looking at the objects, the mugs marked with [7] and [3] are situated on either side of the image. The only object that is directly between them and not on the plate seems to be the salt or pepper shaker marked with [5].",
    "The object that fits the description \"between two bears and not plate\" is the salt or pepper shaker marked with [5].",
];

const WORKED_REFLECTION_2: &str = "It seems that the description provided was to find an object that is situated between the two bears but is not a plate itself. The steps taken so far have led to the exclusion of items on the plate and the identification of the bears on the mugs.";
const WORKED_REFLECTION_0: &str = "The process involved a systematic exclusion of objects on the plate and identifying the bears on the mugs. The final object that fit the description was found to be between the bears (mugs) and not on the plate. The reasoning was sound, and followed the instructions accurately.";
pub const WORKED_INSTRUCTION: &str = "between two bears and not plate";
pub const WORKED_ANSWER: &str = "the salt or pepper shaker marked with [5]";

/// The worked instantial transcript in tag form, and its expected parse.
pub fn worked_fixture() -> (String, ReasoningTrace) {
    let mut text = String::new();
    for (i, content) in WORKED_STEPS.iter().enumerate() {
        let budget = 7 - i;
        text.push_str(&format!("<count> {budget} </count>\n"));
        if !content.is_empty() {
            text.push_str(content);
            text.push('\n');
        }
        match budget {
            2 => text.push_str(&format!("<reflection> {WORKED_REFLECTION_2} </reflection>\n<reward> 0.8 </reward>\n")),
            0 => text.push_str(&format!("<reflection> {WORKED_REFLECTION_0} </reflection>\n<reward> 1.0 </reward>\n")),
            _ => {}
        }
    }
    text.push_str(&format!("<answer> {WORKED_ANSWER} </answer>\n"));

    let steps = WORKED_STEPS
        .iter()
        .enumerate()
        .map(|(i, content)| {
            let budget = 7 - i as u32;
            let (reflection, reward) = match budget {
                2 => (Some(WORKED_REFLECTION_2.to_owned()), Some(0.8)),
                0 => (Some(WORKED_REFLECTION_0.to_owned()), Some(1.0)),
                _ => (None, None),
            };
            Step { budget, content: (*content).to_owned(), reflection, reward }
        })
        .collect();
    (text, ReasoningTrace { starting_budget: 7, steps, answer: Some(WORKED_ANSWER.to_owned()) })
}

/// The worked empirical experience after each optimization iteration.
pub const WORKED_EMPIRICAL: [&str; 4] = [
    INITIAL_EMPIRICAL_EXPERIENCE,
    "Please review the image provided and use its details to rephrase the ambiguous and blurry question into a clear and precise one that can be effectively answered. Ensure that your revised question is directly related to the content of the image.",
    "Please ensure that your revised question is specific and directly references observable elements in the image. Your question should guide the respondent in addressing particular details or aspects present in the image clearly despite any blurriness. Avoid general or vague terms and aim for specificity that will elicit a precise answer.",
    "When rephrasing the question, focus on the discernible elements in the image, such as text, icons, or specific features visible on the computer monitor. Your question should ask for details about these specific elements, avoiding any reference to the clarity of the picture or the physical location, as these are not relevant to the content displayed on the screen. Aim to formulate a question that inquires about the information or processes shown in the image, which can be answered with the visible data.",
];

/// Five mask pairs on a 3×3 grid with hand-computed IoU values
/// 1, 0, 1/2, 1/5 and 1 (both empty); gIoU = 0.54 and cIoU = 6/15.
pub fn five_pair_fixture() -> Vec<(BitMask, BitMask)> {
    let m = |on: &[usize]| {
        let mut bits = vec![false; 9];
        for &i in on {
            bits[i] = true;
        }
        BitMask::new(3, 3, bits).expect("3x3")
    };
    vec![
        (m(&[0, 1, 2]), m(&[0, 1, 2])),
        (m(&[4]), m(&[0, 8])),
        (m(&[0, 1]), m(&[0, 1, 3, 4])),
        (m(&[0, 1, 2]), m(&[2, 5, 8])),
        (m(&[]), m(&[])),
    ]
}

/// Episodes whose aggregates are computed by formula in tests.
pub fn fixture_episodes() -> Vec<EpisodeRecord> {
    let e = |id: &str, success, l, p, d| EpisodeRecord {
        id: id.into(),
        success,
        shortest_path_length: l,
        agent_path_length: p,
        final_distance_to_goal: d,
    };
    vec![
        e("ep1", true, 5.0, 10.0, 1.0),
        e("ep2", true, 7.5, 7.5, 0.5),
        e("ep3", false, 4.0, 12.0, 6.25),
        e("ep4", true, 9.0, 12.0, 2.75),
        e("ep5", false, 3.0, 2.0, 4.0),
    ]
}

fn baseline_episodes() -> Vec<EpisodeRecord> {
    fixture_episodes()
        .into_iter()
        .map(|mut e| {
            e.success = e.id == "ep2";
            e.final_distance_to_goal = if e.success { 2.5 } else { e.final_distance_to_goal + 3.0 };
            e
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct VqaFixture {
    pub id: &'static str,
    pub instruction: &'static str,
    pub clear: &'static str,
    pub answer: &'static str,
    /// How many of the ten human answers equal `answer`.
    pub matching: usize,
}

#[derive(Debug, Clone)]
pub struct RisFixture {
    pub id: &'static str,
    pub instruction: &'static str,
    pub clear: &'static str,
    pub answer: &'static str,
}

pub const VQA_FIXTURES: [VqaFixture; 4] = [
    VqaFixture { id: "vqa-0", instruction: "what is this?", clear: "What brand name is printed on the box?", answer: "cereal", matching: 10 },
    VqaFixture { id: "vqa-1", instruction: "what does it say", clear: "What text is shown on the monitor screen?", answer: "login page", matching: 2 },
    VqaFixture { id: "vqa-2", instruction: "which one is it?", clear: "Which bottle is lightest in color?", answer: "the leftmost bottle", matching: 0 },
    VqaFixture { id: "vqa-3", instruction: "color?", clear: "What color is the shirt on the hanger?", answer: "blue", matching: 4 },
];

pub const RIS_FIXTURES: [RisFixture; 3] = [
    RisFixture { id: "ris-0", instruction: "between two bears and not plate", clear: "the shaker between the two bear mugs", answer: "the salt shaker between the mugs" },
    RisFixture { id: "ris-1", instruction: "the one on the left", clear: "the leftmost mug on the table", answer: "the left mug" },
    RisFixture { id: "ris-2", instruction: "small thing", clear: "the small spoon beside the bowl", answer: "the spoon" },
];

pub const GRAMMAR_BUDGET: u32 = 3;

fn trace_label(id: &str) -> String {
    format!("Trace for {id}:")
}

fn reflection_reply(id: &str) -> String {
    format!("<reflection> The steps for {id} hold. </reflection> <reward> 1.0 </reward>")
}

/// Rules covering optimization, both inference paths and screening for
/// every fixture sample. Order matters: earlier rules shadow later ones.
pub fn suite_rules(fault_on: Option<&str>) -> Vec<ScriptRule> {
    let mut synthesis = Vec::new();
    let mut reflection_general = Vec::new();
    let mut screening = Vec::new();
    let mut turn_synthesis = Vec::new();
    let mut turn_reflection = Vec::new();
    let mut reasoning_high = Vec::new();
    let mut rewrite = Vec::new();
    let items = VQA_FIXTURES
        .iter()
        .map(|f| (f.id, f.instruction, f.clear, f.answer))
        .chain(RIS_FIXTURES.iter().map(|f| (f.id, f.instruction, f.clear, f.answer)));
    for (i, (id, instr, clear, answer)) in items.enumerate() {
        synthesis.push(ScriptRule::contains(format!("Disambiguated question: {clear}\n"), answer));
        let step = (i % 3) + 1;
        reflection_general.push(ScriptRule::contains(format!("has rewritten {instr} as"), WORKED_EMPIRICAL[step]));
        let category = ["colloquialism", "This is Relativity.", "unsure", "ellipsis", "subjectivity", "none", "other"][i % 7];
        screening.push(ScriptRule::contains(format!("single category word only.\n\nInstruction: {instr}"), category));
        turn_synthesis.push(ScriptRule::contains(
            format!("The steps for {id} hold."),
            format!("<answer> {answer} </answer>"),
        ));
        turn_reflection.push(ScriptRule::contains(trace_label(id), reflection_reply(id)));
        reasoning_high.push(ScriptRule::contains(
            format!("Description: {instr}\n"),
            grammar_text(GRAMMAR_BUDGET, answer, &trace_label(id)),
        ));
        let mut r = ScriptRule::contains(instr, clear);
        if fault_on == Some(id) {
            r = r.failing(2);
        }
        rewrite.push(r);
    }
    [synthesis, reflection_general, screening, turn_synthesis, turn_reflection, reasoning_high, rewrite].concat()
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> io::Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&to_canonical_json(r).map_err(io::Error::other)?);
        out.push('\n');
    }
    fs::write(path, out)
}

fn write_mask(path: &Path, on: &[(u32, u32)]) -> io::Result<()> {
    let mut img = GrayImage::new(4, 4);
    for &(x, y) in on {
        img.put_pixel(x, y, Luma([255]));
    }
    img.save(path).map_err(io::Error::other)
}

fn write_image(path: &Path, seed: u8) -> io::Result<()> {
    let img = GrayImage::from_fn(6, 4, |x, y| Luma([seed.wrapping_mul(37).wrapping_add((x * 11 + y * 5) as u8)]));
    img.save(path).map_err(io::Error::other)
}

/// Paths of a suite written under one directory.
#[derive(Debug, Clone)]
pub struct FixtureSuite {
    pub dir: PathBuf,
    pub vqa: PathBuf,
    pub ris: PathBuf,
    pub episodes: PathBuf,
    pub baseline_episodes: PathBuf,
    pub script: PathBuf,
    /// Same rules with two transient failures on the first rewrite of
    /// [`FixtureSuite::FAULTY_SAMPLE`].
    pub faulty_script: PathBuf,
    pub seg_table: PathBuf,
}

impl FixtureSuite {
    pub const FAULTY_SAMPLE: &'static str = "vqa-3";

    /// Ground-truth mask pixels for RIS fixture `i`; the matching prediction
    /// covers a shifted region and the fallback prediction one corner pixel.
    pub fn ris_masks(i: usize) -> [Vec<(u32, u32)>; 3] {
        let gt: Vec<(u32, u32)> = match i {
            0 => vec![(0, 0), (1, 0), (0, 1), (1, 1)],
            1 => vec![(2, 2), (3, 2), (2, 3), (3, 3)],
            _ => vec![(1, 1), (2, 1)],
        };
        let pred: Vec<(u32, u32)> = match i {
            0 => vec![(0, 0), (1, 0), (0, 1), (1, 1)],
            1 => vec![(2, 2), (3, 2)],
            _ => vec![(2, 1), (3, 1), (2, 2)],
        };
        [gt, pred, vec![(3, 0)]]
    }

    pub fn write(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir.join("images"))?;
        fs::create_dir_all(dir.join("masks"))?;
        let mut vqa = Vec::new();
        for (i, f) in VQA_FIXTURES.iter().enumerate() {
            write_image(&dir.join(format!("images/vqa_{i}.png")), i as u8)?;
            let answers =
                (0..10).map(|k| if k < f.matching { f.answer.to_owned() } else { format!("other answer {k}") }).collect();
            vqa.push(SampleRecord {
                id: f.id.into(),
                task: Task::Vqa,
                image: Some(format!("images/vqa_{i}.png")),
                instruction: f.instruction.into(),
                ambiguity: None,
                gt_mask: None,
                answers: Some(answers),
                screening_raw: None,
            });
        }
        let mut ris = Vec::new();
        let mut table = Vec::new();
        for (i, f) in RIS_FIXTURES.iter().enumerate() {
            write_image(&dir.join(format!("images/ris_{i}.png")), 100 + i as u8)?;
            let [gt, pred, off] = Self::ris_masks(i);
            write_mask(&dir.join(format!("masks/gt_{i}.png")), &gt)?;
            write_mask(&dir.join(format!("masks/pred_{i}.png")), &pred)?;
            write_mask(&dir.join(format!("masks/off_{i}.png")), &off)?;
            ris.push(SampleRecord {
                id: f.id.into(),
                task: Task::Ris,
                image: Some(format!("images/ris_{i}.png")),
                instruction: f.instruction.into(),
                ambiguity: None,
                gt_mask: Some(format!("masks/gt_{i}.png")),
                answers: None,
                screening_raw: None,
            });
            let digest = Instruction::clear(f.answer).expect("nonempty").digest();
            table.push(StubEntry { sample_id: f.id.into(), instruction_sha256: Some(digest), mask: format!("masks/pred_{i}.png") });
            table.push(StubEntry { sample_id: f.id.into(), instruction_sha256: None, mask: format!("masks/off_{i}.png") });
        }
        let suite = FixtureSuite {
            dir: dir.to_owned(),
            vqa: dir.join("vqa.jsonl"),
            ris: dir.join("ris.jsonl"),
            episodes: dir.join("episodes.jsonl"),
            baseline_episodes: dir.join("episodes_baseline.jsonl"),
            script: dir.join("script.jsonl"),
            faulty_script: dir.join("script_faulty.jsonl"),
            seg_table: dir.join("seg_table.jsonl"),
        };
        write_jsonl(&suite.vqa, &vqa)?;
        write_jsonl(&suite.ris, &ris)?;
        write_jsonl(&suite.episodes, &fixture_episodes())?;
        write_jsonl(&suite.baseline_episodes, &baseline_episodes())?;
        write_jsonl(&suite.script, &suite_rules(None))?;
        write_jsonl(&suite.faulty_script, &suite_rules(Some(Self::FAULTY_SAMPLE)))?;
        write_jsonl(&suite.seg_table, &table)?;
        Ok(suite)
    }
}
