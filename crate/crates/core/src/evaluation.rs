//! Pessimistic ranking, R@1 / R@3 / MR / MRR aggregation, random-guess
//! baselines and model evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, Q2AModel, Unroll};
use crate::par::{self, Execution};
use crate::seed;
use crate::types::{FeatureBundle, TaskInstance};

pub const MODE_FREE: &str = "free_running";
pub const MODE_FORCED: &str = "teacher_forced";
pub const MODE_RANDOM_ANALYTIC: &str = "random_analytic";
pub const MODE_RANDOM_MONTE_CARLO: &str = "random_monte_carlo";

/// Monte Carlo trials per independently seeded chunk.
pub const TRIALS_PER_CHUNK: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    EmptyEval,
    #[error("ground-truth index {gt} out of range for {n} scores")]
    IndexError { gt: usize, n: usize },
    #[error("no labels for QA {0}")]
    MissingLabels(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Rank of the ground truth, counting every tie against it.
pub fn rank_of(scores: &[f64], gt: usize) -> Result<usize, EvalError> {
    let s = *scores.get(gt).ok_or(EvalError::IndexError {
        gt,
        n: scores.len(),
    })?;
    Ok(1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, v)| j != gt && *v >= s)
        .count())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub qa_id: String,
    pub step: usize,
    pub rank: usize,
    pub n_candidates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percentages.
    pub r1: f64,
    pub r3: f64,
    pub mr: f64,
    pub mrr: f64,
    pub steps: Vec<StepRecord>,
    pub mode: String,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data") + "\n"
    }

    /// Recomputing the aggregates from `steps` gives the header values.
    pub fn is_self_consistent(&self) -> bool {
        match aggregate(&self.steps, &self.mode) {
            Ok(r) => r.r1 == self.r1 && r.r3 == self.r3 && r.mr == self.mr && r.mrr == self.mrr,
            Err(_) => false,
        }
    }
}

/// Uniform per-step averages over all records.
pub fn aggregate(records: &[StepRecord], mode: &str) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyEval);
    }
    let n = records.len() as f64;
    let hits = |k: usize| records.iter().filter(|r| r.rank <= k).count() as f64;
    Ok(EvalReport {
        r1: 100.0 * hits(1) / n,
        r3: 100.0 * hits(3) / n,
        mr: records.iter().map(|r| r.rank as f64).sum::<f64>() / n,
        mrr: records.iter().map(|r| 1.0 / r.rank as f64).sum::<f64>() / n,
        steps: records.to_vec(),
        mode: mode.to_string(),
    })
}

fn harmonic(n: usize) -> f64 {
    (1..=n).map(|k| 1.0 / k as f64).sum()
}

/// Exact expectations under a uniformly random scorer.
pub fn random_baseline_expectation(counts: &[usize]) -> Result<EvalReport, EvalError> {
    if counts.is_empty() {
        return Err(EvalError::EmptyEval);
    }
    let m = counts.len() as f64;
    let mean = |f: &dyn Fn(f64) -> f64| counts.iter().map(|&n| f(n as f64)).sum::<f64>() / m;
    Ok(EvalReport {
        r1: 100.0 * mean(&|n| 1.0 / n),
        r3: 100.0 * mean(&|n| n.min(3.0) / n),
        mr: mean(&|n| (n + 1.0) / 2.0),
        mrr: counts.iter().map(|&n| harmonic(n) / n as f64).sum::<f64>() / m,
        steps: Vec::new(),
        mode: MODE_RANDOM_ANALYTIC.into(),
    })
}

/// Empirical twin of [`random_baseline_expectation`]: uniform random
/// scores for every step, `trials` times.
///
/// Trials are split into chunks of [`TRIALS_PER_CHUNK`], each with its own
/// derived seed, and only integer rank counts are summed, so the result
/// does not depend on the execution mode.
pub fn monte_carlo_random(
    counts: &[usize],
    trials: usize,
    seed: u64,
    exec: Execution,
) -> Result<EvalReport, EvalError> {
    if counts.is_empty() || trials == 0 {
        return Err(EvalError::EmptyEval);
    }
    let max_n = *counts.iter().max().expect("non-empty");
    let chunks = trials.div_ceil(TRIALS_PER_CHUNK);
    let histograms = par::map_range(exec, chunks, |c| {
        let mut rng = seed::rng(seed, seed::stream::MONTE_CARLO, c as u64);
        let mut hist = vec![0u64; max_n + 1];
        let todo = TRIALS_PER_CHUNK.min(trials - c * TRIALS_PER_CHUNK);
        let mut scores = Vec::with_capacity(max_n);
        for _ in 0..todo {
            for &n in counts {
                scores.clear();
                scores.extend((0..n).map(|_| rng.random::<f64>()));
                let gt = rng.random_range(0..n);
                hist[rank_of(&scores, gt).expect("gt in range")] += 1;
            }
        }
        hist
    });
    let mut hist = vec![0u64; max_n + 1];
    for h in histograms {
        hist.iter_mut().zip(h).for_each(|(a, b)| *a += b);
    }
    let total = hist.iter().sum::<u64>() as f64;
    let sum = |f: &dyn Fn(usize) -> f64| {
        hist.iter()
            .enumerate()
            .map(|(r, &c)| c as f64 * f(r))
            .sum::<f64>()
            / total
    };
    Ok(EvalReport {
        r1: 100.0 * sum(&|r| (r == 1) as u8 as f64),
        r3: 100.0 * sum(&|r| (1..=3).contains(&r) as u8 as f64),
        mr: sum(&|r| r as f64),
        mrr: sum(&|r| if r == 0 { 0.0 } else { 1.0 / r as f64 }),
        steps: Vec::new(),
        mode: MODE_RANDOM_MONTE_CARLO.into(),
    })
}

/// Candidate count of every step, in dataset order.
pub fn candidate_counts(tasks: &[TaskInstance]) -> Vec<usize> {
    tasks
        .iter()
        .flat_map(|t| {
            t.qas
                .iter()
                .flat_map(|q| q.steps.iter().map(|s| s.candidates.len()))
        })
        .collect()
}

/// Ground-truth indices per QA id.
pub type Labels = BTreeMap<String, Vec<usize>>;

pub fn labels_of(tasks: &[TaskInstance]) -> Labels {
    tasks
        .iter()
        .flat_map(|t| t.qas.iter().map(|q| (q.qa_id.clone(), q.ground_truth())))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    #[default]
    FreeRunning,
    TeacherForced,
}

impl EvalMode {
    pub fn tag(self) -> &'static str {
        match self {
            EvalMode::FreeRunning => MODE_FREE,
            EvalMode::TeacherForced => MODE_FORCED,
        }
    }
}

/// Rank every step of every QA in `bundles`; QAs are evaluated in
/// parallel when enabled, records keep dataset order.
pub fn evaluate(
    model: &Q2AModel,
    bundles: &[FeatureBundle],
    labels: &Labels,
    mode: EvalMode,
    exec: Execution,
) -> Result<EvalReport, EvalError> {
    let items: Vec<(usize, usize)> = bundles
        .iter()
        .enumerate()
        .flat_map(|(b, bundle)| (0..bundle.qas.len()).map(move |q| (b, q)))
        .collect();
    for b in bundles {
        model.check_bundle(b)?;
    }
    let per_qa = par::try_map(
        exec,
        &items,
        |&(b, q)| -> Result<Vec<StepRecord>, EvalError> {
            let bundle = &bundles[b];
            let qa = &bundle.qas[q];
            let gt = labels
                .get(&qa.qa_id)
                .ok_or_else(|| EvalError::MissingLabels(qa.qa_id.clone()))?;
            let unroll = match mode {
                EvalMode::FreeRunning => Unroll::FreeRunning,
                EvalMode::TeacherForced => Unroll::TeacherForced(gt),
            };
            crate::model::check_labels(qa, gt)?;
            let trace = model.trace(model.task_context(bundle), qa, unroll)?;
            trace
                .steps
                .iter()
                .enumerate()
                .map(|(i, (_, out))| {
                    Ok(StepRecord {
                        qa_id: qa.qa_id.clone(),
                        step: i,
                        rank: rank_of(out.scores.as_slice().expect("contiguous"), gt[i])?,
                        n_candidates: out.scores.len(),
                    })
                })
                .collect()
        },
    )?;
    aggregate(&per_qa.concat(), mode.tag())
}

/// Fixed-width table with recalls at one decimal.
pub fn format_table(rows: &[(String, EvalReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(4);
    let mut out = format!(
        "{:<width$}  {:>6}  {:>6}  {:>5}  {:>6}\n",
        "cell", "R@1", "R@3", "MR", "MRR"
    );
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{name:<width$}  {:>6.1}  {:>6.1}  {:>5.2}  {:>6.3}",
            r.r1, r.r3, r.mr, r.mrr
        );
    }
    out
}
