//! Reading, writing, splitting and summarizing datasets in the task-directory
//! on-disk layout:
//!
//! ```text
//! <root>/<task_id>/script.txt    one narration sentence per line
//!                  buttons.csv   image,button_id,x1,y1,x2,y2
//!                  qa.json       questions with per-step candidates
//!                  images/       user-view images named in buttons.csv
//!                  frames/       000001.png, 000002.png, ... (1 fps)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, Execution};
use crate::seed;
use crate::types::{
    validate_task, BoundingBox, Button, Candidate, ImageRef, QaSample, StepSpec, TaskInstance,
    Violation,
};

pub const SCRIPT_FILE: &str = "script.txt";
pub const BUTTONS_FILE: &str = "buttons.csv";
pub const QA_FILE: &str = "qa.json";
pub const IMAGES_DIR: &str = "images";
pub const FRAMES_DIR: &str = "frames";
pub const BUTTONS_HEADER: &str = "image,button_id,x1,y1,x2,y2";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing file {0}")]
    MissingFile(String),
    #[error("schema error in {file}: {detail}")]
    SchemaError { file: String, detail: String },
    #[error("task {task_id} is invalid: {}", join_violations(.violations))]
    ValidationError {
        task_id: String,
        violations: Vec<Violation>,
    },
    #[error("need at least 2 tasks to split, got {0}")]
    InsufficientTasks(usize),
    #[error("train fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn schema(file: &str, detail: impl Into<String>) -> DatasetError {
    DatasetError::SchemaError {
        file: file.to_string(),
        detail: detail.into(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct QaFile {
    task_id: String,
    questions: Vec<QaRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct QaRecord {
    id: String,
    text: String,
    steps: Vec<StepRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StepRecord {
    candidates: Vec<CandidateRecord>,
    correct: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CandidateRecord {
    text: String,
    button: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ButtonRow {
    image: String,
    button_id: u32,
    x1: i64,
    y1: i64,
    x2: i64,
    y2: i64,
}

fn read_required(dir: &Path, name: &str) -> Result<String, DatasetError> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(DatasetError::MissingFile(name.to_string()));
    }
    fs::read_to_string(&path).map_err(io_err(&path))
}

/// Load one task directory and validate it.
pub fn load_task(dir: &Path) -> Result<TaskInstance, DatasetError> {
    let script_text = read_required(dir, SCRIPT_FILE)?;
    let buttons_text = read_required(dir, BUTTONS_FILE)?;
    let qa_text = read_required(dir, QA_FILE)?;
    for sub in [IMAGES_DIR, FRAMES_DIR] {
        if !dir.join(sub).is_dir() {
            return Err(DatasetError::MissingFile(format!("{sub}/")));
        }
    }

    let script = script_text.lines().map(str::to_string).collect();
    let buttons = parse_buttons(&buttons_text)?;
    let qa_file: QaFile = serde_json::from_str(&qa_text).map_err(|e| {
        schema(
            QA_FILE,
            format!("line {} column {}: {e}", e.line(), e.column()),
        )
    })?;

    let user_images = list_images(&dir.join(IMAGES_DIR))?;
    let frames = list_frames(&dir.join(FRAMES_DIR))?;

    let qas = qa_file
        .questions
        .into_iter()
        .map(|q| QaSample {
            qa_id: q.id,
            question: q.text,
            steps: q
                .steps
                .into_iter()
                .map(|s| StepSpec {
                    candidates: s
                        .candidates
                        .into_iter()
                        .map(|c| Candidate::new(c.text, c.button))
                        .collect(),
                    correct: s.correct,
                })
                .collect(),
        })
        .collect();

    let task = TaskInstance {
        task_id: qa_file.task_id,
        frames,
        script,
        user_images,
        buttons,
        qas,
    };
    let violations = validate_task(&task);
    if !violations.is_empty() {
        return Err(DatasetError::ValidationError {
            task_id: task.task_id,
            violations,
        });
    }
    Ok(task)
}

fn parse_buttons(text: &str) -> Result<Vec<Button>, DatasetError> {
    let header = text.lines().next().unwrap_or("").trim_end_matches('\r');
    if header != BUTTONS_HEADER {
        return Err(schema(
            BUTTONS_FILE,
            format!("line 1: expected header `{BUTTONS_HEADER}`"),
        ));
    }
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<ButtonRow>().enumerate() {
        let row = row.map_err(|e| schema(BUTTONS_FILE, format!("line {}: {e}", i + 2)))?;
        out.push(Button {
            button_id: row.button_id,
            image_id: row.image,
            bbox: BoundingBox::new(row.x1, row.y1, row.x2, row.y2),
        });
    }
    Ok(out)
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, ImageRef>, DatasetError> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if !path.is_file() || !is_image_file(&path) {
            continue;
        }
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let (width, height) = image::image_dimensions(&path)
            .map_err(|e| schema(&format!("{IMAGES_DIR}/{name}"), e.to_string()))?;
        out.insert(
            name,
            ImageRef {
                path,
                width,
                height,
            },
        );
    }
    Ok(out)
}

/// Frame files of a `frames/` directory in numeric order.
///
/// Only files whose stem is a decimal number are frames.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut numbered = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if !path.is_file() || !is_image_file(&path) {
            continue;
        }
        if let Some(n) = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<u64>().ok())
        {
            numbered.push((n, path));
        }
    }
    numbered.sort();
    Ok(numbered.into_iter().map(|(_, p)| p).collect())
}

/// File name of the `index`-th frame (0-based index, 1-based name).
pub fn frame_file_name(index: usize) -> String {
    format!("{:06}.png", index + 1)
}

/// Write the text parts of a task (script, buttons, questions).
///
/// Rasters under `images/` and `frames/` are the caller's business.
pub fn write_task(dir: &Path, task: &TaskInstance) -> Result<(), DatasetError> {
    fs::create_dir_all(dir.join(IMAGES_DIR)).map_err(io_err(dir))?;
    fs::create_dir_all(dir.join(FRAMES_DIR)).map_err(io_err(dir))?;

    let mut script = task.script.join("\n");
    script.push('\n');
    let path = dir.join(SCRIPT_FILE);
    fs::write(&path, script).map_err(io_err(&path))?;

    let mut csv_out = csv::Writer::from_writer(Vec::new());
    for b in &task.buttons {
        csv_out
            .serialize(ButtonRow {
                image: b.image_id.clone(),
                button_id: b.button_id,
                x1: b.bbox.x1,
                y1: b.bbox.y1,
                x2: b.bbox.x2,
                y2: b.bbox.y2,
            })
            .map_err(|e| schema(BUTTONS_FILE, e.to_string()))?;
    }
    let mut bytes = csv_out
        .into_inner()
        .map_err(|e| schema(BUTTONS_FILE, e.to_string()))?;
    if task.buttons.is_empty() {
        bytes = format!("{BUTTONS_HEADER}\n").into_bytes();
    }
    let path = dir.join(BUTTONS_FILE);
    fs::write(&path, bytes).map_err(io_err(&path))?;

    let qa = QaFile {
        task_id: task.task_id.clone(),
        questions: task
            .qas
            .iter()
            .map(|q| QaRecord {
                id: q.qa_id.clone(),
                text: q.question.clone(),
                steps: q
                    .steps
                    .iter()
                    .map(|s| StepRecord {
                        candidates: s
                            .candidates
                            .iter()
                            .map(|c| CandidateRecord {
                                text: c.text.clone(),
                                button: c.button_ref,
                            })
                            .collect(),
                        correct: s.correct,
                    })
                    .collect(),
            })
            .collect(),
    };
    let mut json = serde_json::to_string_pretty(&qa).map_err(|e| schema(QA_FILE, e.to_string()))?;
    json.push('\n');
    let path = dir.join(QA_FILE);
    fs::write(&path, json).map_err(io_err(&path))
}

/// Task directories under `root` (those holding a `qa.json`), sorted by name.
pub fn list_task_dirs(root: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let path = entry.map_err(io_err(root))?.path();
        if path.is_dir() && path.join(QA_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Task ids of every task directory under `root`.
pub fn list_task_ids(root: &Path) -> Result<Vec<String>, DatasetError> {
    Ok(list_task_dirs(root)?
        .iter()
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(str::to_string))
        .collect())
}

/// Load the given task ids (directory names under `root`), in order.
pub fn load_tasks(
    root: &Path,
    ids: &[String],
    exec: Execution,
) -> Result<Vec<TaskInstance>, DatasetError> {
    par::try_map(exec, ids, |id| load_task(&root.join(id)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// A train/val partition of task ids, reproducible from its seed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

impl DatasetManifest {
    pub fn task_ids(&self) -> Vec<String> {
        let mut all: Vec<String> = self.train.iter().chain(&self.val).cloned().collect();
        all.sort();
        all
    }

    pub fn split_of(&self, task_id: &str) -> Option<Split> {
        if self.train.iter().any(|t| t == task_id) {
            Some(Split::Train)
        } else if self.val.iter().any(|t| t == task_id) {
            Some(Split::Val)
        } else {
            None
        }
    }

    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_json()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let name = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|_| DatasetError::MissingFile(name.clone()))?;
        serde_json::from_str(&text).map_err(|e| schema(&name, e.to_string()))
    }
}

/// Train-set size: `round_half_up(n * fraction)` clamped to `[1, n - 1]`.
pub fn train_size(n: usize, fraction: f64) -> usize {
    let raw = (n as f64 * fraction + 0.5).floor() as usize;
    raw.clamp(1, n - 1)
}

/// Split tasks into train and val after a seeded shuffle.
///
/// Input order does not matter: ids are sorted first. Both splits are
/// returned sorted.
pub fn split_dataset(
    task_ids: &[String],
    train_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest, DatasetError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::BadFraction(train_fraction));
    }
    let mut ids: Vec<String> = task_ids
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if ids.len() < 2 {
        return Err(DatasetError::InsufficientTasks(ids.len()));
    }
    let n_train = train_size(ids.len(), train_fraction);
    ids.shuffle(&mut seed::rng(seed, seed::stream::SPLIT, 0));
    let mut train = ids[..n_train].to_vec();
    let mut val = ids[n_train..].to_vec();
    train.sort();
    val.sort();
    Ok(DatasetManifest { seed, train, val })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TaskStats {
    pub task_id: String,
    /// Seconds, i.e. the frame count at 1 fps.
    pub video_seconds: usize,
    pub qa_count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DatasetStats {
    pub tasks: Vec<TaskStats>,
    pub total_tasks: usize,
    pub total_qa: usize,
    pub total_steps: usize,
    pub mean_video_seconds: f64,
    /// QA count keyed by step count `I`.
    pub step_histogram: BTreeMap<usize, usize>,
    /// Step count keyed by candidate count `n_i`.
    pub candidate_histogram: BTreeMap<usize, usize>,
}

/// Summarize already-loaded tasks.
pub fn stats_of(tasks: &[TaskInstance]) -> DatasetStats {
    let mut s = DatasetStats::default();
    for t in tasks {
        s.tasks.push(TaskStats {
            task_id: t.task_id.clone(),
            video_seconds: t.frames.len(),
            qa_count: t.qas.len(),
        });
        for qa in &t.qas {
            *s.step_histogram.entry(qa.steps.len()).or_default() += 1;
            for step in &qa.steps {
                *s.candidate_histogram
                    .entry(step.candidates.len())
                    .or_default() += 1;
            }
            s.total_steps += qa.steps.len();
        }
        s.total_qa += t.qas.len();
    }
    s.total_tasks = tasks.len();
    if !tasks.is_empty() {
        s.mean_video_seconds =
            s.tasks.iter().map(|t| t.video_seconds as f64).sum::<f64>() / tasks.len() as f64;
    }
    s
}

/// Load every task of the manifest (train then val) and summarize.
pub fn dataset_stats(
    root: &Path,
    manifest: &DatasetManifest,
) -> Result<DatasetStats, DatasetError> {
    let ids: Vec<String> = manifest
        .train
        .iter()
        .chain(&manifest.val)
        .cloned()
        .collect();
    Ok(stats_of(&load_tasks(root, &ids, Execution::default())?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("task{i:03}")).collect()
    }

    #[test]
    fn split_sizes() {
        let m = split_dataset(&ids(100), 0.8, 7).unwrap();
        assert_eq!((m.train.len(), m.val.len()), (80, 20));
        for seed in 0..5 {
            let m = split_dataset(&ids(10), 0.8, seed).unwrap();
            assert_eq!((m.train.len(), m.val.len()), (8, 2));
        }
        assert!(matches!(
            split_dataset(&ids(1), 0.8, 0),
            Err(DatasetError::InsufficientTasks(1))
        ));
        assert!(matches!(
            split_dataset(&ids(5), 1.0, 0),
            Err(DatasetError::BadFraction(_))
        ));
    }

    #[test]
    fn split_rounding_and_clamp() {
        assert_eq!(train_size(5, 0.5), 3);
        assert_eq!(train_size(2, 0.99), 1);
        assert_eq!(train_size(3, 0.01), 1);
    }

    #[test]
    fn split_ignores_input_order() {
        let mut rev = ids(30);
        rev.reverse();
        let a = split_dataset(&ids(30), 0.8, 3).unwrap();
        let b = split_dataset(&rev, 0.8, 3).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_ne!(a, split_dataset(&ids(30), 0.8, 4).unwrap());
    }

    #[test]
    fn split_is_a_partition() {
        let all = ids(37);
        let m = split_dataset(&all, 0.7, 11).unwrap();
        assert_eq!(m.task_ids(), all);
        assert!(m.train.iter().all(|t| !m.val.contains(t)));
        assert!(m.split_of("task000").is_some());
        assert_eq!(m.split_of("nope"), None);
    }

    #[test]
    fn stats_histograms() {
        let mut a = crate::types::tests_support::minimal_task();
        let step = a.qas[0].steps[0].clone();
        a.qas[0].steps = vec![step.clone()];
        let mut q3 = a.qas[0].clone();
        q3.steps = vec![step.clone(); 3];
        a.qas.push(q3);
        let mut b = a.clone();
        b.qas = vec![a.qas[0].clone()];
        b.qas[0].steps = vec![step.clone(); 2];
        let mut empty = a.clone();
        empty.qas.clear();
        let s = stats_of(&[a, b, empty]);
        assert_eq!(s.step_histogram, BTreeMap::from([(1, 1), (2, 1), (3, 1)]));
        assert_eq!(s.total_qa, 3);
        assert_eq!(s.tasks[2].qa_count, 0);
        assert_eq!(s.candidate_histogram, BTreeMap::from([(2, 6)]));
    }
}
