//! Corpus preparation and the ablation grid.
//!
//! Shared by the command-line driver, the bench suite and the acceptance
//! tests so that all of them run exactly the same pipeline.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::dataset::{self, DatasetManifest, Split};
use crate::decoder::StepsKind;
use crate::embedding::{self, ButtonEncodingMode, EmbeddingBackend, EmbeddingError};
use crate::evaluation::{self, format_table, EvalMode, EvalReport, Labels};
use crate::model::ModelConfig;
use crate::par::{self, Execution};
use crate::synth::{self, GeneratedTask, GeneratorConfig, SynthError, PANEL_IMAGE};
use crate::training::{self, TrainConfig, TrainError};
use crate::types::{FeatureBundle, TaskInstance};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] evaluation::EvalError),
}

/// Bundle generated tasks from their in-memory rasters.
pub fn bundle_generated(
    generated: &[GeneratedTask],
    backend: &dyn EmbeddingBackend,
    mode: ButtonEncodingMode,
    exec: Execution,
) -> Result<Vec<FeatureBundle>, EmbeddingError> {
    par::try_map(exec, generated, |g| {
        let images = BTreeMap::from([(PANEL_IMAGE.to_string(), g.panel.clone())]);
        embedding::bundle_with_rasters(&g.task, &g.frames, images, backend, mode)
    })
}

/// Tasks, their features, the train/val split and the labels.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub tasks: Vec<TaskInstance>,
    pub bundles: Vec<FeatureBundle>,
    pub manifest: DatasetManifest,
    pub labels: Labels,
}

impl Corpus {
    pub fn new(
        tasks: Vec<TaskInstance>,
        bundles: Vec<FeatureBundle>,
        manifest: DatasetManifest,
    ) -> Self {
        let labels = evaluation::labels_of(&tasks);
        Self {
            tasks,
            bundles,
            manifest,
            labels,
        }
    }

    /// Bundles of one split, in manifest order.
    pub fn split(&self, split: Split) -> Vec<FeatureBundle> {
        let by_id: BTreeMap<&str, &FeatureBundle> = self
            .bundles
            .iter()
            .map(|b| (b.task_id.as_str(), b))
            .collect();
        self.manifest
            .ids(split)
            .iter()
            .filter_map(|id| by_id.get(id.as_str()).map(|b| (*b).clone()))
            .collect()
    }

    /// Same corpus with every bundle narrowed to `mode` (bundles must be `both`).
    pub fn with_button_mode(&self, mode: ButtonEncodingMode) -> Self {
        let bundles = self
            .bundles
            .iter()
            .map(|b| embedding::select_button_mode(b, mode))
            .collect();
        Self {
            bundles,
            ..self.clone()
        }
    }
}

/// Generate a synthetic corpus in memory and featurize it. The split is the
/// one `generate_dataset` writes for the same config.
pub fn synthetic_corpus(
    cfg: &GeneratorConfig,
    backend: &dyn EmbeddingBackend,
    mode: ButtonEncodingMode,
    exec: Execution,
) -> Result<Corpus, ExperimentError> {
    let generated = synth::generate_in_memory(cfg, Path::new(""), exec)?;
    let bundles = bundle_generated(&generated, backend, mode, exec)?;
    let tasks: Vec<TaskInstance> = generated.into_iter().map(|g| g.task).collect();
    let ids: Vec<String> = tasks.iter().map(|t| t.task_id.clone()).collect();
    let manifest = dataset::split_dataset(&ids, synth::TRAIN_FRACTION, cfg.seed)?;
    Ok(Corpus::new(tasks, bundles, manifest))
}

/// Load a dataset from disk and featurize every task in the manifest.
pub fn disk_corpus(
    root: &Path,
    manifest: DatasetManifest,
    backend: &dyn EmbeddingBackend,
    mode: ButtonEncodingMode,
    exec: Execution,
) -> Result<Corpus, ExperimentError> {
    let tasks = dataset::load_tasks(root, &manifest.task_ids(), exec)?;
    let bundles = embedding::bundle_all(&tasks, backend, mode, exec)?;
    Ok(Corpus::new(tasks, bundles, manifest))
}

/// Train on the corpus' train split, then evaluate on its val split.
pub fn train_and_eval(
    corpus: &Corpus,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    mode: EvalMode,
    exec: Execution,
) -> Result<(training::TrainOutcome, EvalReport), ExperimentError> {
    let train = corpus.split(Split::Train);
    let val = corpus.split(Split::Val);
    let outcome = training::train(
        model_config,
        train_config,
        &train,
        &val,
        &corpus.labels,
        exec,
    )?;
    let report = evaluation::evaluate(&outcome.model, &val, &corpus.labels, mode, exec)?;
    Ok((outcome, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    Button,
    Modality,
    Grounding,
    Steps,
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Grid::Button => "button",
            Grid::Modality => "modality",
            Grid::Grounding => "grounding",
            Grid::Steps => "steps",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationCell {
    pub grid: Grid,
    pub name: String,
    pub config: ModelConfig,
}

fn mark(on: bool) -> &'static str {
    if on {
        "y"
    } else {
        "n"
    }
}

/// The four ablation grids around `base`: button encoding (4), input
/// modalities (4), grounding attention (5) and steps network (4).
///
/// Cells that drop a modality also drop the attention terms that need it.
pub fn ablation_cells(base: &ModelConfig) -> Vec<AblationCell> {
    let mut cells = Vec::with_capacity(17);
    let cell = |grid, name: String, config: ModelConfig| AblationCell { grid, name, config };

    for (mask, reverse, mode) in [
        (false, false, ButtonEncodingMode::None),
        (true, false, ButtonEncodingMode::Mask),
        (false, true, ButtonEncodingMode::Reverse),
        (true, true, ButtonEncodingMode::Both),
    ] {
        let name = format!("mask={} reverse={}", mark(mask), mark(reverse));
        cells.push(cell(
            Grid::Button,
            name,
            ModelConfig {
                button_mode: mode,
                ..base.clone()
            },
        ));
    }

    for (video, script) in [(false, false), (true, false), (false, true), (true, true)] {
        let config = ModelConfig {
            use_video: video,
            use_script: script,
            att_qa_s: script && base.att_qa_s,
            att_s_v: script && video && base.att_s_v,
            att_transfer: script && video && base.att_transfer,
            ..base.clone()
        };
        cells.push(cell(
            Grid::Modality,
            format!("video={} script={}", mark(video), mark(script)),
            config,
        ));
    }

    for (qa_s, s_v, transfer) in [
        (false, false, false),
        (true, false, false),
        (false, true, false),
        (true, true, false),
        (true, true, true),
    ] {
        let config = ModelConfig {
            use_video: true,
            use_script: true,
            att_qa_s: qa_s,
            att_s_v: s_v,
            att_transfer: transfer,
            ..base.clone()
        };
        let name = format!(
            "qa_s={} s_v={} transfer={}",
            mark(qa_s),
            mark(s_v),
            mark(transfer)
        );
        cells.push(cell(Grid::Grounding, name, config));
    }

    for kind in [StepsKind::Mlp, StepsKind::Gru] {
        for history in [false, true] {
            let config = ModelConfig {
                steps_kind: kind,
                use_history: history,
                ..base.clone()
            };
            cells.push(cell(
                Grid::Steps,
                format!("{} history={}", kind.name(), mark(history)),
                config,
            ));
        }
    }
    cells
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationResult {
    pub cell: AblationCell,
    pub report: EvalReport,
}

/// Train and evaluate every cell. `corpus` must carry `both`-mode button
/// features; each cell narrows them to its own mode.
pub fn run_ablation(
    cells: &[AblationCell],
    corpus: &Corpus,
    train_config: &TrainConfig,
    mode: EvalMode,
    exec: Execution,
) -> Result<Vec<AblationResult>, ExperimentError> {
    let mut by_mode: BTreeMap<&'static str, Corpus> = BTreeMap::new();
    let mut results = Vec::with_capacity(cells.len());
    for cell in cells {
        let narrowed = by_mode
            .entry(cell.config.button_mode.name())
            .or_insert_with(|| corpus.with_button_mode(cell.config.button_mode));
        let (_, report) = train_and_eval(narrowed, &cell.config, train_config, mode, exec)?;
        results.push(AblationResult {
            cell: cell.clone(),
            report,
        });
    }
    Ok(results)
}

/// One table section per grid.
pub fn ablation_table(results: &[AblationResult]) -> String {
    let mut out = String::new();
    for grid in [Grid::Button, Grid::Modality, Grid::Grounding, Grid::Steps] {
        let rows: Vec<(String, EvalReport)> = results
            .iter()
            .filter(|r| r.cell.grid == grid)
            .map(|r| (r.cell.name.clone(), r.report.clone()))
            .collect();
        if rows.is_empty() {
            continue;
        }
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(&format!("[{grid}]\n"));
        out.push_str(&format_table(&rows));
    }
    out
}
