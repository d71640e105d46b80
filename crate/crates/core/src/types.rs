//! Domain types shared by every module, and task validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::sync::OnceLock;

use ndarray::{Array1, Array2};
use regex::Regex;
use serde::{Deserialize, Serialize};

/// Axis-aligned pixel box, half-open: `x1 <= x < x2`, `y1 <= y < y2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: i64,
    pub y1: i64,
    pub x2: i64,
    pub y2: i64,
}

impl BoundingBox {
    pub fn new(x1: i64, y1: i64, x2: i64, y2: i64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        self.x1 <= x && x < self.x2 && self.y1 <= y && y < self.y2
    }

    pub fn is_degenerate(&self) -> bool {
        self.x1 >= self.x2 || self.y1 >= self.y2
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x1 >= 0 && self.y1 >= 0 && self.x2 <= width as i64 && self.y2 <= height as i64
    }

    pub fn overlaps(&self, other: &BoundingBox) -> bool {
        self.x1 < other.x2 && other.x1 < self.x2 && self.y1 < other.y2 && other.y1 < self.y2
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Button {
    pub button_id: u32,
    pub image_id: String,
    pub bbox: BoundingBox,
}

/// A user-view image: where it lives and its pixel size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRef {
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Candidate {
    pub text: String,
    pub button_ref: Option<u32>,
}

impl Candidate {
    pub fn new(text: impl Into<String>, button_ref: Option<u32>) -> Self {
        Self {
            text: text.into(),
            button_ref,
        }
    }

    /// Button ids named by `<buttonK>` placeholders in the text, in order.
    pub fn placeholders(&self) -> Vec<u64> {
        placeholder_regex()
            .captures_iter(&self.text)
            .filter_map(|c| c[1].parse().ok())
            .collect()
    }

    /// The text with every placeholder replaced by `replacement`.
    pub fn text_with_placeholder(&self, replacement: &str) -> String {
        placeholder_regex()
            .replace_all(&self.text, replacement)
            .into_owned()
    }
}

fn placeholder_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<button(\d+)>").expect("static regex"))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepSpec {
    pub candidates: Vec<Candidate>,
    pub correct: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaSample {
    pub qa_id: String,
    pub question: String,
    pub steps: Vec<StepSpec>,
}

impl QaSample {
    pub fn ground_truth(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.correct).collect()
    }
}

/// One device: narration, video frames, user views, buttons and questions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskInstance {
    pub task_id: String,
    /// Frame images at one frame per second, in temporal order.
    pub frames: Vec<PathBuf>,
    /// Narration sentences in spoken order.
    pub script: Vec<String>,
    pub user_images: BTreeMap<String, ImageRef>,
    pub buttons: Vec<Button>,
    pub qas: Vec<QaSample>,
}

impl TaskInstance {
    pub fn button(&self, id: u32) -> Option<&Button> {
        self.buttons.iter().find(|b| b.button_id == id)
    }
}

/// A broken invariant: which field, and which rule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// Check every task invariant. An empty list means the task is valid.
pub fn validate_task(task: &TaskInstance) -> Vec<Violation> {
    let mut out = Vec::new();
    if task.frames.is_empty() {
        out.push(Violation::new("frames", "no frames"));
    }
    if task.script.is_empty() {
        out.push(Violation::new("script", "no sentences"));
    }

    let mut ids = BTreeSet::new();
    for (i, b) in task.buttons.iter().enumerate() {
        let field = format!("buttons[{i}]");
        if !ids.insert(b.button_id) {
            out.push(Violation::new(
                &field,
                format!("duplicate button_id {}", b.button_id),
            ));
        }
        if b.bbox.is_degenerate() {
            out.push(Violation::new(&field, "degenerate box"));
        }
        match task.user_images.get(&b.image_id) {
            None => out.push(Violation::new(
                &field,
                format!("unknown image {:?}", b.image_id),
            )),
            Some(img) => {
                if !b.bbox.is_degenerate() && !b.bbox.within(img.width, img.height) {
                    out.push(Violation::new(&field, "box outside image bounds"));
                }
            }
        }
    }

    for qa in &task.qas {
        if qa.steps.is_empty() {
            out.push(Violation::new(format!("qa {}", qa.qa_id), "no steps"));
        }
        for (si, step) in qa.steps.iter().enumerate() {
            let field = format!("qa {} step {}", qa.qa_id, si);
            if step.candidates.len() < 2 {
                out.push(Violation::new(&field, "fewer than 2 candidates"));
            }
            if step.correct >= step.candidates.len() {
                out.push(Violation::new(&field, "correct index out of range"));
            }
            for (ci, cand) in step.candidates.iter().enumerate() {
                let field = format!("{field} candidate {ci}");
                let found = cand.placeholders();
                if found.len() > 1 {
                    out.push(Violation::new(&field, "more than one placeholder"));
                }
                if let Some(&k) = found.first() {
                    if cand.button_ref.map(u64::from) != Some(k) {
                        out.push(Violation::new(
                            &field,
                            "placeholder does not match button_ref",
                        ));
                    }
                }
                if let Some(k) = cand.button_ref {
                    if !ids.contains(&k) {
                        out.push(Violation::new(&field, "unresolved button_ref"));
                    }
                }
            }
        }
    }
    out
}

/// Encoded features of one candidate answer.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateFeatures {
    /// Answer-text feature, length `d_s`.
    pub text: Array1<f32>,
    /// Visual button feature, length `d_b`.
    pub button: Array1<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaFeatures {
    pub qa_id: String,
    /// Question feature, length `d_q = d_s`.
    pub question: Array1<f32>,
    /// `steps[i][j]` encodes candidate `j` of step `i`.
    pub steps: Vec<Vec<CandidateFeatures>>,
}

/// Frozen-encoder output for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub task_id: String,
    /// `f x d_v`, one row per frame.
    pub video: Array2<f32>,
    /// `e x d_s`, one row per script sentence.
    pub script: Array2<f32>,
    pub qas: Vec<QaFeatures>,
}

impl FeatureBundle {
    pub fn text_dim(&self) -> usize {
        self.script.ncols()
    }

    pub fn image_dim(&self) -> usize {
        self.video.ncols()
    }

    /// Width of the button features (0 when bundles carry none).
    pub fn button_dim(&self) -> usize {
        self.qas
            .iter()
            .flat_map(|q| q.steps.iter().flatten())
            .map(|c| c.button.len())
            .next()
            .unwrap_or(0)
    }

    pub fn qa(&self, qa_id: &str) -> Option<&QaFeatures> {
        self.qas.iter().find(|q| q.qa_id == qa_id)
    }

    /// Check shapes and finiteness, against the task when given.
    pub fn check(&self, task: Option<&TaskInstance>) -> Vec<Violation> {
        let mut out = Vec::new();
        let d_s = self.text_dim();
        let d_b = self.button_dim();
        let finite = |a: &[f32]| a.iter().all(|x| x.is_finite());
        if !finite(self.video.as_slice().unwrap_or(&[]))
            || !finite(self.script.as_slice().unwrap_or(&[]))
        {
            out.push(Violation::new("bundle", "non-finite entry"));
        }
        for qa in &self.qas {
            if qa.question.len() != d_s {
                out.push(Violation::new(
                    format!("question {}", qa.qa_id),
                    "d_q != d_s",
                ));
            }
            for c in qa.steps.iter().flatten() {
                if c.text.len() != d_s || c.button.len() != d_b {
                    out.push(Violation::new(
                        format!("candidates of {}", qa.qa_id),
                        "inconsistent width",
                    ));
                }
                if !c.text.iter().chain(c.button.iter()).all(|x| x.is_finite()) {
                    out.push(Violation::new(
                        format!("candidates of {}", qa.qa_id),
                        "non-finite entry",
                    ));
                }
            }
        }
        if let Some(task) = task {
            if self.video.nrows() != task.frames.len() {
                out.push(Violation::new(
                    "video",
                    "row count differs from frame count",
                ));
            }
            if self.script.nrows() != task.script.len() {
                out.push(Violation::new(
                    "script",
                    "row count differs from sentence count",
                ));
            }
            if self.qas.len() != task.qas.len() {
                out.push(Violation::new("qas", "QA count differs from task"));
            }
            for (qf, qa) in self.qas.iter().zip(&task.qas) {
                let shape: Vec<usize> = qf.steps.iter().map(Vec::len).collect();
                let want: Vec<usize> = qa.steps.iter().map(|s| s.candidates.len()).collect();
                if qf.qa_id != qa.qa_id || shape != want {
                    out.push(Violation::new(
                        format!("qa {}", qa.qa_id),
                        "candidate layout differs",
                    ));
                }
            }
        }
        out
    }
}

/// Scores and ranks emitted for one answering step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepPrediction {
    pub scores: Vec<f64>,
    /// Pessimistic 1-based rank of every candidate.
    pub ranks: Vec<usize>,
    /// Highest score, lowest index on ties.
    pub chosen: usize,
}

impl StepPrediction {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let ranks = (0..scores.len())
            .map(|j| {
                1 + scores
                    .iter()
                    .enumerate()
                    .filter(|&(k, s)| k != j && *s >= scores[j])
                    .count()
            })
            .collect();
        let chosen = argmax(&scores);
        Self {
            scores,
            ranks,
            chosen,
        }
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
