//! Procedural datasets with an exact oracle.
//!
//! Every task is a device panel with colored rectangular buttons. Each
//! device function is an ordered list of button presses; the narration
//! walks through every function step by step while the video highlights
//! the pressed button for three seconds per sentence. One question is
//! asked per function.
//!
//! Step purposes come from four role pools (the k-th step of a function
//! draws from pool k). Wrong candidates draw their purpose from a decoy
//! pool whose phrases never appear in any narration, and at least one wrong
//! candidate shares the correct candidate's verb.
//!
//! With `history_dependent`, every step of a question shows the same
//! candidate list, so only the answering history tells the steps apart.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, DatasetError, DatasetManifest, DatasetStats};
use crate::embedding::{cosine, EmbeddingBackend, EmbeddingError, PLACEHOLDER_WORDS};
use crate::par::{self, Execution};
use crate::seed;
use crate::types::{BoundingBox, Button, Candidate, ImageRef, QaSample, StepSpec, TaskInstance};

pub const PANEL_SIZE: u32 = 224;
pub const SECONDS_PER_SENTENCE: usize = 3;
pub const PANEL_IMAGE: &str = "panel.png";
pub const META_FILE: &str = "meta.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "generator.json";
pub const TRAIN_FRACTION: f64 = 0.8;
/// Probability that a function has a single step (default corpora only).
pub const SINGLE_STEP_PROBABILITY: f64 = 0.2;

const DEVICES: &[&str] = &[
    "microwave",
    "washing machine",
    "oven",
    "coffee maker",
    "air fryer",
    "rice cooker",
    "dishwasher",
    "printer",
    "air conditioner",
    "blender",
    "treadmill",
    "water heater",
];

const COLORS: &[(&str, [u8; 3])] = &[
    ("red", [220, 40, 40]),
    ("green", [40, 180, 60]),
    ("blue", [40, 80, 220]),
    ("yellow", [230, 210, 40]),
    ("orange", [240, 140, 30]),
    ("purple", [140, 60, 190]),
    ("white", [235, 235, 235]),
    ("cyan", [40, 200, 210]),
];

const GOALS: &[&str] = &[
    "start a quick wash",
    "set the timer",
    "defrost frozen meat",
    "change the temperature",
    "turn on the child lock",
    "brew a strong coffee",
    "cook white rice",
    "print a double sided page",
    "switch to eco mode",
    "reheat leftover soup",
    "set the fan speed",
    "run a rinse cycle",
    "make a smoothie",
    "schedule a delayed start",
    "grill a sandwich",
    "boil water quickly",
    "clean the filter",
    "set the clock",
    "warm up the plates",
    "dry delicate clothes",
    "start a workout program",
    "keep food warm",
    "bake a cake",
    "steam vegetables",
];

const ROLE_PURPOSES: [&[&str]; 4] = [
    &[
        "turn on the power",
        "wake up the display",
        "unlock the control panel",
        "open the main menu",
        "enter the settings",
        "switch on the unit",
        "activate the keypad",
        "open the program list",
        "enable manual control",
        "power up the heater",
        "start the setup",
        "show the options",
    ],
    &[
        "select the program",
        "choose the mode",
        "pick the cooking level",
        "select the wash type",
        "choose the cup size",
        "pick the fabric type",
        "select the heat source",
        "choose the preset",
        "select the food type",
        "pick the speed range",
        "choose the water level",
        "select the zone",
    ],
    &[
        "increase the duration",
        "lower the temperature",
        "adjust the minutes",
        "raise the power level",
        "set the weight",
        "add extra time",
        "reduce the speed",
        "adjust the strength",
        "set the portion",
        "change the hours",
        "add a rinse",
        "shorten the cycle",
    ],
    &[
        "confirm the selection",
        "begin the cycle",
        "save the setting",
        "begin cooking",
        "lock in the choice",
        "apply the change",
        "launch the program",
        "finish the setup",
        "store the preset",
        "run the task",
        "accept the value",
        "begin the countdown",
    ],
];

const DECOY_VERBS: &[&str] = &[
    "eject",
    "calibrate",
    "pair",
    "dim",
    "mute",
    "flash",
    "tilt",
    "scan",
    "shuffle",
    "reboot",
];
const DECOY_OBJECTS: &[&str] = &[
    "the cartridge",
    "the antenna",
    "the backlight",
    "the speaker",
    "the firmware",
    "the nozzle",
    "the sensor",
    "the tray light",
    "the bluetooth link",
    "the demo reel",
];

const ACTION_VERBS: &[&str] = &["press", "push", "tap", "hold"];
const QUESTION_STEMS: &[&str] = &["How do I", "How to", "What to do to", "How can I"];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    ConfigError(String),
    #[error("unknown QA {0}")]
    UnknownQa(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("cannot write {path}: {detail}")]
    Write { path: PathBuf, detail: String },
}

/// Generator knobs; also the JSON config file schema.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub tasks: usize,
    pub buttons: usize,
    pub functions: usize,
    pub max_steps: usize,
    pub candidates_per_step: usize,
    pub history_dependent: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            tasks: 100,
            buttons: 5,
            functions: 5,
            max_steps: 4,
            candidates_per_step: 6,
            history_dependent: false,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: String| Err(SynthError::ConfigError(m));
        if self.tasks == 0 {
            return err("tasks must be at least 1".into());
        }
        if !(3..=COLORS.len()).contains(&self.buttons) {
            return err(format!("buttons must lie in 3..={}", COLORS.len()));
        }
        if !(1..=8).contains(&self.functions) {
            return err("functions must lie in 1..=8".into());
        }
        if !(1..=4).contains(&self.max_steps) {
            return err("max_steps must lie in 1..=4".into());
        }
        if self.candidates_per_step < self.buttons.max(2) || self.candidates_per_step > 12 {
            return err(format!(
                "candidates_per_step must lie in {}..=12 (every button appears once)",
                self.buttons.max(2)
            ));
        }
        if self.max_steps > self.buttons {
            return err("max_steps cannot exceed buttons (steps use distinct buttons)".into());
        }
        if self.history_dependent {
            if self.max_steps < 2 {
                return err("history_dependent needs max_steps >= 2".into());
            }
            if self.candidates_per_step <= self.max_steps {
                return err("history_dependent needs candidates_per_step > max_steps".into());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelButton {
    pub id: u32,
    pub color: String,
    pub rgb: [u8; 3],
    pub bbox: BoundingBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepAction {
    pub button: u32,
    pub verb: String,
    pub purpose: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionSpec {
    pub goal: String,
    pub steps: Vec<StepAction>,
}

/// One generated device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub device: String,
    pub buttons: Vec<PanelButton>,
    pub functions: Vec<FunctionSpec>,
    pub history_dependent: bool,
}

impl DeviceSpec {
    pub fn validate(&self) -> Vec<String> {
        let ids: BTreeSet<u32> = self.buttons.iter().map(|b| b.id).collect();
        let mut out = Vec::new();
        if !(3..=8).contains(&self.buttons.len()) {
            out.push(format!("{} buttons, expected 3..=8", self.buttons.len()));
        }
        for f in &self.functions {
            if f.steps.is_empty() || f.steps.len() > 4 {
                out.push(format!("function {:?} has {} steps", f.goal, f.steps.len()));
            }
            for s in &f.steps {
                if !ids.contains(&s.button) {
                    out.push(format!(
                        "function {:?} uses missing button {}",
                        f.goal, s.button
                    ));
                }
            }
        }
        if self.history_dependent && !self.functions.iter().any(|f| f.steps.len() >= 2) {
            out.push("history-dependent device without a multi-step function".into());
        }
        out
    }
}

/// Ground truth for one question.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaOracle {
    pub qa_id: String,
    pub goal: String,
    /// Button pressed at each step.
    pub buttons: Vec<u32>,
    /// Correct candidate index at each step.
    pub correct: Vec<usize>,
    /// Script line narrating each step.
    pub sentences: Vec<usize>,
}

/// Contents of `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleMeta {
    pub task_id: String,
    pub device: DeviceSpec,
    pub qas: Vec<QaOracle>,
}

/// A task plus everything needed to write it to disk.
#[derive(Clone, Debug)]
pub struct GeneratedTask {
    pub task: TaskInstance,
    pub panel: RgbImage,
    pub frames: Vec<RgbImage>,
    pub meta: OracleMeta,
}

pub fn task_id(index: usize) -> String {
    format!("task{index:04}")
}

fn layout_panel(rng: &mut ChaCha8Rng, n: usize) -> Vec<PanelButton> {
    let grid = 3usize;
    let cell = PANEL_SIZE as i64 / grid as i64;
    let mut cells: Vec<usize> = (0..grid * grid).collect();
    cells.shuffle(rng);
    let mut colors: Vec<usize> = (0..COLORS.len()).collect();
    colors.shuffle(rng);
    (0..n)
        .map(|i| {
            let (cy, cx) = ((cells[i] / grid) as i64, (cells[i] % grid) as i64);
            let w = rng.random_range(24..=52i64);
            let h = rng.random_range(16..=40i64);
            let x1 = cx * cell + rng.random_range(4..=cell - w - 4);
            let y1 = cy * cell + rng.random_range(4..=cell - h - 4);
            let (name, rgb) = COLORS[colors[i]];
            PanelButton {
                id: i as u32,
                color: name.to_string(),
                rgb,
                bbox: BoundingBox::new(x1, y1, x1 + w, y1 + h),
            }
        })
        .collect()
}

fn fill(img: &mut RgbImage, b: &BoundingBox, rgb: [u8; 3]) {
    for y in b.y1..b.y2 {
        for x in b.x1..b.x2 {
            img.put_pixel(x as u32, y as u32, Rgb(rgb));
        }
    }
}

fn render_panel(buttons: &[PanelButton]) -> RgbImage {
    let mut img = RgbImage::from_pixel(PANEL_SIZE, PANEL_SIZE, Rgb([70, 70, 76]));
    for b in buttons {
        fill(&mut img, &b.bbox, b.rgb);
    }
    img
}

/// Video frame: the panel, the active button outlined and brightened, and
/// a progress bar along the bottom edge.
fn render_frame(
    panel: &RgbImage,
    buttons: &[PanelButton],
    active: Option<u32>,
    second: usize,
    total: usize,
) -> RgbImage {
    let mut img = panel.clone();
    if let Some(b) = active.and_then(|id| buttons.iter().find(|b| b.id == id)) {
        let r = &b.bbox;
        let outer = BoundingBox::new(
            (r.x1 - 3).max(0),
            (r.y1 - 3).max(0),
            (r.x2 + 3).min(PANEL_SIZE as i64),
            (r.y2 + 3).min(PANEL_SIZE as i64),
        );
        fill(&mut img, &outer, [255, 255, 255]);
        let bright = b.rgb.map(|c| c.saturating_add(20));
        fill(&mut img, r, bright);
    }
    let bar = ((second + 1) * PANEL_SIZE as usize / total.max(1)) as i64;
    fill(
        &mut img,
        &BoundingBox::new(0, PANEL_SIZE as i64 - 4, bar.max(1), PANEL_SIZE as i64),
        [250, 250, 120],
    );
    img
}

fn candidate_text(verb: &str, button: u32, purpose: &str) -> String {
    format!("{verb} <button{button}> to {purpose}")
}

fn decoy_purposes(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let mut all: Vec<(usize, usize)> = (0..DECOY_VERBS.len())
        .flat_map(|v| (0..DECOY_OBJECTS.len()).map(move |o| (v, o)))
        .collect();
    all.shuffle(rng);
    all.into_iter()
        .take(n)
        .map(|(v, o)| format!("{} {}", DECOY_VERBS[v], DECOY_OBJECTS[o]))
        .collect()
}

/// Buttons for wrong candidates: every button not already used, then
/// random fill.
fn distractor_buttons(
    rng: &mut ChaCha8Rng,
    used: &[u32],
    n_buttons: usize,
    count: usize,
) -> Vec<u32> {
    let mut rest: Vec<u32> = (0..n_buttons as u32)
        .filter(|b| !used.contains(b))
        .collect();
    rest.shuffle(rng);
    while rest.len() < count {
        rest.push(rng.random_range(0..n_buttons as u32));
    }
    rest.truncate(count);
    rest
}

fn sample_step_count(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> usize {
    if cfg.max_steps == 1 {
        return 1;
    }
    if !cfg.history_dependent && rng.random_bool(SINGLE_STEP_PROBABILITY) {
        return 1;
    }
    rng.random_range(2..=cfg.max_steps)
}

fn build_device(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> DeviceSpec {
    let device = DEVICES.choose(rng).expect("non-empty").to_string();
    let buttons = layout_panel(rng, cfg.buttons);
    let mut goals: Vec<&str> = GOALS.to_vec();
    goals.shuffle(rng);
    let mut pools: Vec<Vec<&str>> = ROLE_PURPOSES.iter().map(|p| p.to_vec()).collect();
    pools.iter_mut().for_each(|p| p.shuffle(rng));

    let functions = (0..cfg.functions)
        .map(|k| {
            let n_steps = sample_step_count(rng, cfg);
            let mut ids: Vec<u32> = (0..cfg.buttons as u32).collect();
            ids.shuffle(rng);
            let steps = (0..n_steps)
                .map(|role| StepAction {
                    button: ids[role],
                    verb: ACTION_VERBS.choose(rng).expect("non-empty").to_string(),
                    purpose: pools[role]
                        .pop()
                        .expect("role pool larger than functions")
                        .to_string(),
                })
                .collect();
            FunctionSpec {
                goal: goals[k].to_string(),
                steps,
            }
        })
        .collect();
    DeviceSpec {
        device,
        buttons,
        functions,
        history_dependent: cfg.history_dependent,
    }
}

/// Generate one task; `root` is where it will be written.
pub fn generate_task(
    cfg: &GeneratorConfig,
    index: usize,
    root: &Path,
) -> Result<GeneratedTask, SynthError> {
    cfg.validate()?;
    let mut rng = seed::rng(cfg.seed, seed::stream::GENERATOR_TASK, index as u64);
    let id = task_id(index);
    let dir = root.join(&id);
    let mut device = build_device(&mut rng, cfg);
    let n = cfg.candidates_per_step;

    // Narration, with the button each sentence shows.
    let mut script = vec![format!("this video shows how to use the {}", device.device)];
    let mut active: Vec<Option<u32>> = vec![None];
    let mut step_lines: Vec<Vec<usize>> = Vec::new();
    for f in &device.functions {
        script.push(format!("now let us {}", f.goal));
        active.push(None);
        let mut lines = Vec::new();
        for s in &f.steps {
            let color = &device.buttons[s.button as usize].color;
            lines.push(script.len());
            script.push(format!("{} the {color} button to {}", s.verb, s.purpose));
            active.push(Some(s.button));
        }
        step_lines.push(lines);
    }

    let mut qas = Vec::new();
    let mut oracle = Vec::new();
    for (k, f) in device.functions.iter_mut().enumerate() {
        let qa_id = format!("{id}_q{k}");
        let stem = QUESTION_STEMS.choose(&mut rng).expect("non-empty");
        let question = format!("{stem} {}?", f.goal);
        let (steps, correct) = if cfg.history_dependent {
            shared_candidates(&mut rng, f, cfg.buttons, n)
        } else {
            per_step_candidates(&mut rng, f, cfg.buttons, n)
        };
        oracle.push(QaOracle {
            qa_id: qa_id.clone(),
            goal: f.goal.clone(),
            buttons: f.steps.iter().map(|s| s.button).collect(),
            correct,
            sentences: step_lines[k].clone(),
        });
        qas.push(QaSample {
            qa_id,
            question,
            steps,
        });
    }

    let panel = render_panel(&device.buttons);
    let total = script.len() * SECONDS_PER_SENTENCE;
    let frames: Vec<RgbImage> = (0..total)
        .map(|sec| {
            render_frame(
                &panel,
                &device.buttons,
                active[sec / SECONDS_PER_SENTENCE],
                sec,
                total,
            )
        })
        .collect();

    let mut user_images = BTreeMap::new();
    user_images.insert(
        PANEL_IMAGE.to_string(),
        ImageRef {
            path: dir.join(dataset::IMAGES_DIR).join(PANEL_IMAGE),
            width: PANEL_SIZE,
            height: PANEL_SIZE,
        },
    );
    let task = TaskInstance {
        task_id: id.clone(),
        frames: (0..total)
            .map(|i| {
                dir.join(dataset::FRAMES_DIR)
                    .join(dataset::frame_file_name(i))
            })
            .collect(),
        script,
        user_images,
        buttons: device
            .buttons
            .iter()
            .map(|b| Button {
                button_id: b.id,
                image_id: PANEL_IMAGE.to_string(),
                bbox: b.bbox,
            })
            .collect(),
        qas,
    };
    Ok(GeneratedTask {
        task,
        panel,
        frames,
        meta: OracleMeta {
            task_id: id,
            device,
            qas: oracle,
        },
    })
}

/// Independent candidate lists per step.
fn per_step_candidates(
    rng: &mut ChaCha8Rng,
    f: &FunctionSpec,
    n_buttons: usize,
    n: usize,
) -> (Vec<StepSpec>, Vec<usize>) {
    let mut steps = Vec::new();
    let mut correct = Vec::new();
    for s in &f.steps {
        let buttons = distractor_buttons(rng, &[s.button], n_buttons, n - 1);
        let purposes = decoy_purposes(rng, n - 1);
        let mut cands = vec![Candidate::new(
            candidate_text(&s.verb, s.button, &s.purpose),
            Some(s.button),
        )];
        for (d, (b, p)) in buttons.iter().zip(&purposes).enumerate() {
            let verb = if d == 0 {
                s.verb.as_str()
            } else {
                ACTION_VERBS.choose(rng).expect("non-empty")
            };
            cands.push(Candidate::new(candidate_text(verb, *b, p), Some(*b)));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        correct.push(order.iter().position(|&o| o == 0).expect("present"));
        steps.push(StepSpec {
            candidates: order.iter().map(|&o| cands[o].clone()).collect(),
            correct: 0,
        });
    }
    for (s, &c) in steps.iter_mut().zip(&correct) {
        s.correct = c;
    }
    (steps, correct)
}

/// One candidate list shared by every step of the question.
fn shared_candidates(
    rng: &mut ChaCha8Rng,
    f: &mut FunctionSpec,
    n_buttons: usize,
    n: usize,
) -> (Vec<StepSpec>, Vec<usize>) {
    let n_steps = f.steps.len();
    let n_decoys = n - n_steps;
    // Every step verb must be shared by some decoy.
    let mut verbs: Vec<String> = Vec::new();
    for s in f.steps.iter_mut() {
        if !verbs.contains(&s.verb) {
            if verbs.len() == n_decoys {
                s.verb = verbs[0].clone();
            } else {
                verbs.push(s.verb.clone());
            }
        }
    }
    let used: Vec<u32> = f.steps.iter().map(|s| s.button).collect();
    let buttons = distractor_buttons(rng, &used, n_buttons, n_decoys);
    let purposes = decoy_purposes(rng, n_decoys);
    let mut cands: Vec<Candidate> = f
        .steps
        .iter()
        .map(|s| {
            Candidate::new(
                candidate_text(&s.verb, s.button, &s.purpose),
                Some(s.button),
            )
        })
        .collect();
    for (d, (b, p)) in buttons.iter().zip(&purposes).enumerate() {
        let verb = verbs
            .get(d)
            .map(String::as_str)
            .unwrap_or_else(|| ACTION_VERBS.choose(rng).expect("non-empty"));
        cands.push(Candidate::new(candidate_text(verb, *b, p), Some(*b)));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let shuffled: Vec<Candidate> = order.iter().map(|&o| cands[o].clone()).collect();
    let correct: Vec<usize> = (0..n_steps)
        .map(|k| order.iter().position(|&o| o == k).expect("present"))
        .collect();
    let steps = correct
        .iter()
        .map(|&c| StepSpec {
            candidates: shuffled.clone(),
            correct: c,
        })
        .collect();
    (steps, correct)
}

fn write_err(path: &Path, e: impl ToString) -> SynthError {
    SynthError::Write {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

fn save_png(path: &Path, img: &RgbImage) -> Result<(), SynthError> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| write_err(path, e))
}

/// Write a generated task into `root/<task_id>/`.
pub fn write_generated(root: &Path, g: &GeneratedTask) -> Result<(), SynthError> {
    let dir = root.join(&g.task.task_id);
    dataset::write_task(&dir, &g.task)?;
    save_png(&dir.join(dataset::IMAGES_DIR).join(PANEL_IMAGE), &g.panel)?;
    for (i, f) in g.frames.iter().enumerate() {
        save_png(
            &dir.join(dataset::FRAMES_DIR)
                .join(dataset::frame_file_name(i)),
            f,
        )?;
    }
    let meta = serde_json::to_string_pretty(&g.meta).map_err(|e| write_err(&dir, e))? + "\n";
    let path = dir.join(META_FILE);
    fs::write(&path, meta).map_err(|e| write_err(&path, e))
}

/// Counts emitted by the generator; the reference for dataset statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GenerationSummary {
    pub task_ids: Vec<String>,
    pub total_qa: usize,
    pub total_steps: usize,
    pub total_frames: usize,
    pub step_histogram: BTreeMap<usize, usize>,
    pub candidate_histogram: BTreeMap<usize, usize>,
}

impl GenerationSummary {
    fn add(&mut self, g: &GeneratedTask) {
        self.task_ids.push(g.task.task_id.clone());
        self.total_frames += g.frames.len();
        for qa in &g.task.qas {
            self.total_qa += 1;
            self.total_steps += qa.steps.len();
            *self.step_histogram.entry(qa.steps.len()).or_default() += 1;
            for s in &qa.steps {
                *self
                    .candidate_histogram
                    .entry(s.candidates.len())
                    .or_default() += 1;
            }
        }
    }

    /// Fraction of questions with more than one step.
    pub fn multi_step_fraction(&self) -> f64 {
        let multi: usize = self
            .step_histogram
            .iter()
            .filter(|(k, _)| **k >= 2)
            .map(|(_, v)| v)
            .sum();
        multi as f64 / self.total_qa.max(1) as f64
    }

    pub fn matches(&self, stats: &DatasetStats) -> bool {
        stats.total_tasks == self.task_ids.len()
            && stats.total_qa == self.total_qa
            && stats.total_steps == self.total_steps
            && stats.tasks.iter().map(|t| t.video_seconds).sum::<usize>() == self.total_frames
            && stats.step_histogram == self.step_histogram
            && stats.candidate_histogram == self.candidate_histogram
    }
}

/// Generate every task in memory (no disk access).
pub fn generate_in_memory(
    cfg: &GeneratorConfig,
    root: &Path,
    exec: Execution,
) -> Result<Vec<GeneratedTask>, SynthError> {
    cfg.validate()?;
    par::map_range(exec, cfg.tasks, |i| generate_task(cfg, i, root))
        .into_iter()
        .collect()
}

/// Write a full dataset under `root`: task directories, `meta.json` per
/// task, `manifest.json` (8:2 split) and `generator.json`.
pub fn generate_dataset(
    cfg: &GeneratorConfig,
    root: &Path,
    exec: Execution,
) -> Result<GenerationSummary, SynthError> {
    cfg.validate()?;
    fs::create_dir_all(root).map_err(|e| write_err(root, e))?;
    let results = par::map_range(exec, cfg.tasks, |i| -> Result<GeneratedTask, SynthError> {
        let g = generate_task(cfg, i, root)?;
        write_generated(root, &g)?;
        Ok(g)
    });
    let mut summary = GenerationSummary::default();
    for g in results {
        summary.add(&g?);
    }
    if summary.task_ids.len() >= 2 {
        let manifest = dataset::split_dataset(&summary.task_ids, TRAIN_FRACTION, cfg.seed)?;
        manifest.save(&root.join(MANIFEST_FILE))?;
    }
    let config_json = serde_json::to_string_pretty(cfg).map_err(|e| write_err(root, e))? + "\n";
    fs::write(root.join(CONFIG_FILE), config_json).map_err(|e| write_err(root, e))?;
    Ok(summary)
}

pub fn summarize(tasks: &[GeneratedTask]) -> GenerationSummary {
    let mut s = GenerationSummary::default();
    tasks.iter().for_each(|g| s.add(g));
    s
}

pub fn load_meta(task_dir: &Path) -> Result<OracleMeta, SynthError> {
    let path = task_dir.join(META_FILE);
    let text =
        fs::read_to_string(&path).map_err(|_| DatasetError::MissingFile(META_FILE.into()))?;
    serde_json::from_str(&text).map_err(|e| {
        DatasetError::SchemaError {
            file: META_FILE.into(),
            detail: e.to_string(),
        }
        .into()
    })
}

/// The ground-truth `(step, candidate index)` sequence of a question.
pub fn oracle_answer(meta: &OracleMeta, qa_id: &str) -> Result<Vec<(usize, usize)>, SynthError> {
    let qa = meta
        .qas
        .iter()
        .find(|q| q.qa_id == qa_id)
        .ok_or_else(|| SynthError::UnknownQa(qa_id.to_string()))?;
    Ok(qa.correct.iter().copied().enumerate().collect())
}

/// Disagreements between a task's `correct` fields and its oracle.
pub fn check_consistency(task: &TaskInstance, meta: &OracleMeta) -> Vec<String> {
    let mut out = Vec::new();
    if task.task_id != meta.task_id {
        out.push(format!(
            "task id {} differs from oracle {}",
            task.task_id, meta.task_id
        ));
    }
    for qa in &task.qas {
        match oracle_answer(meta, &qa.qa_id) {
            Err(_) => out.push(format!("{}: no oracle entry", qa.qa_id)),
            Ok(truth) => {
                let got: Vec<(usize, usize)> = qa.ground_truth().into_iter().enumerate().collect();
                if got != truth {
                    out.push(format!(
                        "{}: correct indices {:?} differ from oracle {:?}",
                        qa.qa_id, got, truth
                    ));
                }
            }
        }
    }
    if meta.qas.len() != task.qas.len() {
        out.push(format!(
            "oracle lists {} questions, task has {}",
            meta.qas.len(),
            task.qas.len()
        ));
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ProbeReport {
    pub steps: usize,
    pub passed: usize,
    pub pass_rate: f64,
}

/// Is there a text signal to learn? For every step, the narration sentence
/// of that step must be closer (cosine) to `question + labeled candidate`
/// than to `question + other candidate` on average.
pub fn learnability_probe(
    tasks: &[(TaskInstance, OracleMeta)],
    backend: &dyn EmbeddingBackend,
) -> Result<ProbeReport, SynthError> {
    let mut report = ProbeReport::default();
    for (task, meta) in tasks {
        for qa in &task.qas {
            let oracle = meta
                .qas
                .iter()
                .find(|q| q.qa_id == qa.qa_id)
                .ok_or_else(|| SynthError::UnknownQa(qa.qa_id.clone()))?;
            for (i, step) in qa.steps.iter().enumerate() {
                let sentence = backend.embed_text(&task.script[oracle.sentences[i]])?;
                let sims: Vec<f64> = step
                    .candidates
                    .iter()
                    .map(|c| {
                        let text = format!(
                            "{} {}",
                            qa.question,
                            c.text_with_placeholder(PLACEHOLDER_WORDS)
                        );
                        backend.embed_text(&text).map(|v| cosine(&sentence, &v))
                    })
                    .collect::<Result<_, _>>()?;
                let others: Vec<f64> = sims
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != step.correct)
                    .map(|(_, s)| *s)
                    .collect();
                let mean_other = others.iter().sum::<f64>() / others.len().max(1) as f64;
                report.steps += 1;
                if sims[step.correct] > mean_other {
                    report.passed += 1;
                }
            }
        }
    }
    report.pass_rate = report.passed as f64 / report.steps.max(1) as f64;
    Ok(report)
}

/// Load `(task, meta)` pairs for the given ids.
pub fn load_with_meta(
    root: &Path,
    ids: &[String],
    exec: Execution,
) -> Result<Vec<(TaskInstance, OracleMeta)>, SynthError> {
    par::try_map(exec, ids, |id| {
        let dir = root.join(id);
        Ok((dataset::load_task(&dir)?, load_meta(&dir)?))
    })
}

/// Manifest written next to a generated dataset.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest, SynthError> {
    Ok(DatasetManifest::load(&root.join(MANIFEST_FILE))?)
}
