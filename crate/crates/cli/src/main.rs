//! `aqtc`: generate, validate, featurize, train, evaluate and ablate.
//!
//! Exit codes: 0 success, 1 data or validation error, 2 usage error,
//! 3 numeric failure during training.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aqtc::dataset::{self, DatasetError, DatasetManifest, Split};
use aqtc::embedding::{self, ButtonEncodingMode, EmbeddingError, SyntheticBackend};
use aqtc::evaluation::{self, EvalError, EvalMode, EvalReport};
use aqtc::experiment::{self, Corpus, ExperimentError};
use aqtc::model::{ModelConfig, ModelError};
use aqtc::synth::{self, GeneratorConfig, SynthError};
use aqtc::training::{self, Checkpoint, TrainConfig, TrainError};
use aqtc::types::FeatureBundle;
use aqtc::{par, Execution};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

const CHECKPOINT_FILE: &str = "checkpoint.aqc";
const TRAIN_LOG_FILE: &str = "train_log.jsonl";
const EVAL_FILE: &str = "eval_report.json";
const BASELINE_FILE: &str = "baseline.json";
const TABLE_FILE: &str = "ablation_table.txt";
const FEATURES_DIR: &str = "features";
const FEATURES_META: &str = "features.json";

#[derive(Debug, Parser)]
#[command(
    name = "aqtc",
    version,
    about = "Question-driven task completion toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset with oracle metadata.
    Generate(GenerateArgs),
    /// Check every task directory and list violations.
    Validate(DataArgs),
    /// Print dataset statistics as JSON.
    Stats(DataArgs),
    /// Compute feature caches for all tasks.
    Features(FeaturesArgs),
    /// Train a model and write a checkpoint plus the epoch log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Analytic and Monte Carlo random-guess baselines.
    Baseline(BaselineArgs),
    /// Run the four ablation grids (17 trained models).
    Ablate(TrainArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Output dataset directory.
    #[arg(long, default_value = "data")]
    out: PathBuf,
    /// JSON generator config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    buttons: Option<usize>,
    #[arg(long)]
    functions: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    history: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Defaults to `<data>/manifest.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Backend {
    /// Compute features on the fly with the synthetic encoder.
    Synthetic,
    /// Read caches written by `features`.
    Cache,
}

#[derive(Debug, Args)]
struct BackendArgs {
    #[arg(long, value_enum, default_value = "synthetic")]
    backend: Backend,
    /// Cache directory; defaults to `<data>/features`.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long, default_value_t = SyntheticBackend::DEFAULT_TEXT_DIM)]
    text_dim: usize,
    #[arg(long, default_value_t = SyntheticBackend::DEFAULT_IMAGE_DIM)]
    image_dim: usize,
    /// Seed of the synthetic image projection.
    #[arg(long, default_value_t = 0)]
    backend_seed: u64,
}

#[derive(Debug, Args)]
struct FeaturesArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Cache directory; defaults to `<data>/features`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Button rasters to encode; `both` serves every model mode.
    #[arg(long, value_parser = parse_mode, default_value = "both")]
    button_mode: ButtonEncodingMode,
    #[arg(long, default_value_t = SyntheticBackend::DEFAULT_TEXT_DIM)]
    text_dim: usize,
    #[arg(long, default_value_t = SyntheticBackend::DEFAULT_IMAGE_DIM)]
    image_dim: usize,
    #[arg(long, default_value_t = 0)]
    backend_seed: u64,
    /// Only `synthetic` can produce features.
    #[arg(long, value_enum, default_value = "synthetic")]
    backend: Backend,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Overrides the train config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Metric mode for the final report.
    #[arg(long, value_enum, default_value = "free")]
    eval_mode: ModeArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Free,
    Forced,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Free => EvalMode::FreeRunning,
            ModeArg::Forced => EvalMode::TeacherForced,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long, required = true)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "free")]
    eval_mode: ModeArg,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    /// Also write the report to `<out>/eval_report.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    /// Also write both reports to `<out>/baseline.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<ButtonEncodingMode, String> {
    ButtonEncodingMode::ALL
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| format!("expected one of none, mask, reverse, both; got `{s}`"))
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0} violation(s) found")]
    Violations(usize),
    #[error("dataset_io: {0}")]
    Dataset(#[from] DatasetError),
    #[error("synthbench: {0}")]
    Synth(#[from] SynthError),
    #[error("embedding: {0}")]
    Embedding(#[from] EmbeddingError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
    #[error("cannot parse {path}: {detail}")]
    Config { path: PathBuf, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Synth(e) => e.into(),
            ExperimentError::Embedding(e) => e.into(),
            ExperimentError::Dataset(e) => e.into(),
            ExperimentError::Train(e) => e.into(),
            ExperimentError::Eval(e) => e.into(),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_)
            | CliError::Config { .. }
            | CliError::Synth(SynthError::ConfigError(_))
            | CliError::Model(ModelError::ConfigError(_))
            | CliError::Train(
                TrainError::Config(_) | TrainError::Model(ModelError::ConfigError(_)),
            ) => 2,
            CliError::Train(TrainError::NonFiniteLoss { .. }) => 3,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data") + "\n"
}

fn optional_json<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T, CliError> {
    path.as_deref()
        .map(read_json)
        .transpose()
        .map(Option::unwrap_or_default)
}

impl DataArgs {
    fn manifest(&self) -> Result<DatasetManifest, CliError> {
        match &self.manifest {
            Some(p) => Ok(DatasetManifest::load(p)?),
            None => Ok(synth::load_manifest(&self.data)?),
        }
    }

    /// Manifest ids when a manifest exists, else every task directory.
    fn task_ids(&self) -> Result<Vec<String>, CliError> {
        let default = self.data.join(synth::MANIFEST_FILE);
        if self.manifest.is_some() || default.is_file() {
            Ok(self.manifest()?.task_ids())
        } else {
            Ok(dataset::list_task_ids(&self.data)?)
        }
    }
}

/// What a feature cache directory holds.
#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct FeaturesMeta {
    backend: String,
    text_dim: usize,
    image_dim: usize,
    backend_seed: u64,
    button_mode: ButtonEncodingMode,
}

fn narrow(
    bundle: FeatureBundle,
    held: ButtonEncodingMode,
    want: ButtonEncodingMode,
) -> Result<FeatureBundle, CliError> {
    if held == want {
        Ok(bundle)
    } else if held == ButtonEncodingMode::Both {
        Ok(embedding::select_button_mode(&bundle, want))
    } else {
        Err(CliError::Usage(format!(
            "feature cache holds `{}` button features, model needs `{}`; rerun `features --button-mode both`",
            held.name(),
            want.name()
        )))
    }
}

fn load_corpus(
    data: &DataArgs,
    b: &BackendArgs,
    mode: ButtonEncodingMode,
    exec: Execution,
) -> Result<Corpus, CliError> {
    let manifest = data.manifest()?;
    match b.backend {
        Backend::Synthetic => {
            let backend = SyntheticBackend::new(b.text_dim, b.image_dim, b.backend_seed);
            Ok(experiment::disk_corpus(
                &data.data, manifest, &backend, mode, exec,
            )?)
        }
        Backend::Cache => {
            let dir = b
                .features
                .clone()
                .unwrap_or_else(|| data.data.join(FEATURES_DIR));
            let meta: FeaturesMeta = read_json(&dir.join(FEATURES_META))?;
            let ids = manifest.task_ids();
            let tasks = dataset::load_tasks(&data.data, &ids, exec)?;
            let bundles = par::try_map(exec, &ids, |id| -> Result<FeatureBundle, CliError> {
                narrow(embedding::read_cache(&dir, id)?, meta.button_mode, mode)
            })?;
            Ok(Corpus::new(tasks, bundles, manifest))
        }
    }
}

fn split_bundles(corpus: &Corpus, split: SplitArg) -> Vec<FeatureBundle> {
    match split {
        SplitArg::Train => corpus.split(Split::Train),
        SplitArg::Val => corpus.split(Split::Val),
        SplitArg::All => [corpus.split(Split::Train), corpus.split(Split::Val)].concat(),
    }
}

fn cmd_generate(a: &GenerateArgs) -> Result<(), CliError> {
    let mut cfg: GeneratorConfig = optional_json(&a.config)?;
    cfg.tasks = a.tasks.unwrap_or(cfg.tasks);
    cfg.buttons = a.buttons.unwrap_or(cfg.buttons);
    cfg.functions = a.functions.unwrap_or(cfg.functions);
    cfg.max_steps = a.max_steps.unwrap_or(cfg.max_steps);
    cfg.candidates_per_step = a.candidates.unwrap_or(cfg.candidates_per_step);
    cfg.history_dependent |= a.history;
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    let summary = synth::generate_dataset(&cfg, &a.out, Execution::default())?;
    eprintln!(
        "wrote {} tasks, {} questions, {} steps ({:.1}% multi-step) to {}",
        summary.task_ids.len(),
        summary.total_qa,
        summary.total_steps,
        100.0 * summary.multi_step_fraction(),
        a.out.display()
    );
    Ok(())
}

fn cmd_validate(a: &DataArgs) -> Result<(), CliError> {
    let ids = a.task_ids()?;
    let mut problems = Vec::new();
    for id in &ids {
        let dir = a.data.join(id);
        match dataset::load_task(&dir) {
            Err(DatasetError::ValidationError { violations, .. }) => {
                problems.extend(violations.iter().map(|v| format!("{id}: {v}")));
            }
            Err(e) => problems.push(format!("{id}: {e}")),
            Ok(task) => {
                if dir.join(synth::META_FILE).is_file() {
                    let meta = synth::load_meta(&dir)?;
                    problems.extend(
                        synth::check_consistency(&task, &meta)
                            .into_iter()
                            .map(|p| format!("{id}: {p}")),
                    );
                }
            }
        }
    }
    for p in &problems {
        println!("{p}");
    }
    eprintln!(
        "checked {} tasks, {} violation(s)",
        ids.len(),
        problems.len()
    );
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::Violations(problems.len()))
    }
}

fn cmd_stats(a: &DataArgs) -> Result<(), CliError> {
    let tasks = dataset::load_tasks(&a.data, &a.task_ids()?, Execution::default())?;
    print!("{}", to_json(&dataset::stats_of(&tasks)));
    Ok(())
}

fn cmd_features(a: &FeaturesArgs) -> Result<(), CliError> {
    if a.backend != Backend::Synthetic {
        return Err(CliError::Usage(
            "features can only be computed with --backend synthetic".into(),
        ));
    }
    let exec = Execution::default();
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.data.data.join(FEATURES_DIR));
    let backend = SyntheticBackend::new(a.text_dim, a.image_dim, a.backend_seed);
    let ids = a.data.task_ids()?;
    par::try_map(exec, &ids, |id| -> Result<(), CliError> {
        let task = dataset::load_task(&a.data.data.join(id))?;
        embedding::write_cache(&out, &embedding::bundle(&task, &backend, a.button_mode)?)?;
        Ok(())
    })?;
    let meta = FeaturesMeta {
        backend: "synthetic".into(),
        text_dim: a.text_dim,
        image_dim: a.image_dim,
        backend_seed: a.backend_seed,
        button_mode: a.button_mode,
    };
    write_text(&out.join(FEATURES_META), &to_json(&meta))?;
    eprintln!("wrote {} feature caches to {}", ids.len(), out.display());
    Ok(())
}

fn configs(a: &TrainArgs) -> Result<(ModelConfig, TrainConfig), CliError> {
    let model: ModelConfig = optional_json(&a.model_config)?;
    let mut train: TrainConfig = optional_json(&a.train_config)?;
    train.seed = a.seed.unwrap_or(train.seed);
    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let exec = Execution::default();
    let (model_config, train_config) = configs(a)?;
    let corpus = load_corpus(&a.data, &a.backend, model_config.button_mode, exec)?;
    let train = corpus.split(Split::Train);
    let val = corpus.split(Split::Val);
    let outcome = training::train(
        &model_config,
        &train_config,
        &train,
        &val,
        &corpus.labels,
        exec,
    )?;
    let checkpoint = Checkpoint {
        model: outcome.model,
        train_config: train_config.clone(),
        epoch: train_config.max_epochs,
    };
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    checkpoint.save(&a.out.join(CHECKPOINT_FILE))?;
    let log = training::log_jsonl(&outcome.log);
    write_text(&a.out.join(TRAIN_LOG_FILE), &log)?;
    print!("{log}");
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let exec = Execution::default();
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let model = checkpoint.model;
    let corpus = load_corpus(&a.data, &a.backend, model.config.button_mode, exec)?;
    let bundles = split_bundles(&corpus, a.split);
    let report = evaluation::evaluate(&model, &bundles, &corpus.labels, a.eval_mode.into(), exec)?;
    emit(&report.to_json(), a.out.as_deref(), EVAL_FILE)
}

fn emit(json: &str, out: Option<&Path>, file: &str) -> Result<(), CliError> {
    let json = format!("{json}\n");
    if let Some(dir) = out {
        write_text(&dir.join(file), &json)?;
    }
    print!("{json}");
    Ok(())
}

#[derive(Serialize)]
struct Baselines {
    analytic: EvalReport,
    monte_carlo: EvalReport,
}

fn cmd_baseline(a: &BaselineArgs) -> Result<(), CliError> {
    let manifest = a.data.manifest()?;
    let ids: Vec<String> = match a.split {
        SplitArg::Train => manifest.train.clone(),
        SplitArg::Val => manifest.val.clone(),
        SplitArg::All => manifest.task_ids(),
    };
    if a.trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    let tasks = dataset::load_tasks(&a.data.data, &ids, Execution::default())?;
    let counts = evaluation::candidate_counts(&tasks);
    let report = Baselines {
        analytic: evaluation::random_baseline_expectation(&counts)?,
        monte_carlo: evaluation::monte_carlo_random(
            &counts,
            a.trials,
            a.seed,
            Execution::default(),
        )?,
    };
    emit(
        &serde_json::to_string(&report).expect("plain data"),
        a.out.as_deref(),
        BASELINE_FILE,
    )
}

fn cmd_ablate(a: &TrainArgs) -> Result<(), CliError> {
    let exec = Execution::default();
    let (base, train_config) = configs(a)?;
    let corpus = load_corpus(&a.data, &a.backend, ButtonEncodingMode::Both, exec)?;
    let cells = experiment::ablation_cells(&base);
    let results =
        experiment::run_ablation(&cells, &corpus, &train_config, a.eval_mode.into(), exec)?;
    for (i, r) in results.iter().enumerate() {
        write_text(
            &a.out.join(format!("cell{i:02}_{}.json", r.cell.grid)),
            &to_json(r),
        )?;
    }
    let table = experiment::ablation_table(&results);
    write_text(&a.out.join(TABLE_FILE), &table)?;
    print!("{table}");
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Features(a) => cmd_features(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
