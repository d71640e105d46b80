//! Acceptance suite: nine criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so every line is printed even when an
//! earlier criterion fails. Exits non-zero if any criterion fails.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use aqtc::decoder::StepsKind;
use aqtc::embedding::{self, ButtonEncodingMode, SyntheticBackend};
use aqtc::evaluation::{self, monte_carlo_random, random_baseline_expectation, rank_of, EvalMode};
use aqtc::experiment::{self, synthetic_corpus};
use aqtc::grounding::{attention, transfer_mask, AttentionProj};
use aqtc::model::{Dims, InputDims, ModelConfig, Q2AModel};
use aqtc::nn::Linear;
use aqtc::synth::{self, GeneratorConfig};
use aqtc::training::{self, Checkpoint, TrainConfig};
use aqtc::types::{validate_task, CandidateFeatures, FeatureBundle, QaFeatures};
use aqtc::{dataset, Execution};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

/// Position of `gt` after sorting by descending score with `gt` placed
/// after every tied competitor.
fn sort_rank(scores: &[f64], gt: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then((a == gt).cmp(&(b == gt)))
    });
    order.iter().position(|&i| i == gt).unwrap() + 1
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let mut cases = 0;
    for p in permutations(4) {
        let scores: Vec<f64> = p.iter().map(|&v| 0.1 + v as f64 * 0.2).collect();
        for gt in 0..4 {
            let got = rank_of(&scores, gt).map_err(|e| e.to_string())?;
            if got != sort_rank(&scores, gt) {
                return Err(format!(
                    "scores {scores:?} gt {gt}: rank {got}, oracle {}",
                    sort_rank(&scores, gt)
                ));
            }
            cases += 1;
        }
    }
    // Every assignment of n values drawn from n levels covers all tie patterns.
    for n in 1..=4usize {
        for code in 0..n.pow(n as u32) {
            let scores: Vec<f64> = (0..n)
                .map(|i| ((code / n.pow(i as u32)) % n) as f64 / n as f64)
                .collect();
            for gt in 0..n {
                let got = rank_of(&scores, gt).map_err(|e| e.to_string())?;
                if got != sort_rank(&scores, gt) {
                    return Err(format!(
                        "scores {scores:?} gt {gt}: rank {got}, oracle {}",
                        sort_rank(&scores, gt)
                    ));
                }
                cases += 1;
            }
        }
    }
    Ok(format!(
        "{cases} (scores, gt) cases agree with the sort oracle"
    ))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let gen = synth::generate_in_memory(
        &GeneratorConfig::default(),
        Path::new(""),
        Execution::default(),
    )
    .map_err(|e| e.to_string())?;
    let tasks: Vec<_> = gen.into_iter().map(|g| g.task).collect();
    let counts = evaluation::candidate_counts(&tasks);
    if counts.iter().any(|&n| n != 6) {
        return Err("default corpus has a step without 6 candidates".into());
    }
    // Enumeration oracle: under a uniform scorer the correct answer lands
    // on each of the 6! orderings equally often.
    let perms = permutations(6);
    let (mut r1, mut r3, mut mr, mut mrr) = (0.0, 0.0, 0.0, 0.0);
    for p in &perms {
        let rank = p[0] + 1;
        r1 += (rank <= 1) as u8 as f64;
        r3 += (rank <= 3) as u8 as f64;
        mr += rank as f64;
        mrr += 1.0 / rank as f64;
    }
    let m = perms.len() as f64;
    let oracle = (100.0 * r1 / m, 100.0 * r3 / m, mr / m, mrr / m);
    let analytic = random_baseline_expectation(&counts).map_err(|e| e.to_string())?;
    let exact = (analytic.r1 - oracle.0).abs() < 1e-9
        && (analytic.r3 - oracle.1).abs() < 1e-9
        && (analytic.mr - oracle.2).abs() < 1e-9
        && (analytic.mrr - oracle.3).abs() < 1e-9;
    let mc =
        monte_carlo_random(&counts, 10_000, 0, Execution::default()).map_err(|e| e.to_string())?;
    let close = (mc.r1 - analytic.r1).abs() <= 1.0
        && (mc.r3 - analytic.r3).abs() <= 1.0
        && (mc.mr - analytic.mr).abs() <= 0.05
        && (mc.mrr - analytic.mrr).abs() <= 0.01;
    check(
        exact && close,
        format!(
            "{} steps; analytic R@1 {:.2} R@3 {:.2} MR {:.3} MRR {:.4} (enumeration {:.2}/{:.2}/{:.3}/{:.4}); \
             Monte Carlo R@1 {:.2} R@3 {:.2} MR {:.3} MRR {:.4}",
            counts.len(),
            analytic.r1,
            analytic.r3,
            analytic.mr,
            analytic.mrr,
            oracle.0,
            oracle.1,
            oracle.2,
            oracle.3,
            mc.r1,
            mc.r3,
            mc.mr,
            mc.mrr
        ),
    )
}

// ---------------------------------------------------------------- 3

fn random_stochastic(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((rows, cols), |_| rng.random_range(0.0..1.0f64));
    for mut r in m.rows_mut() {
        let s = r.sum();
        r /= s;
    }
    m
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_sum = 0.0f64;
    for _ in 0..100 {
        let (m, e, f) = (
            rng.random_range(1..8),
            rng.random_range(1..12),
            rng.random_range(1..40),
        );
        let t = transfer_mask(
            random_stochastic(&mut rng, m, e).view(),
            random_stochastic(&mut rng, e, f).view(),
        )
        .map_err(|e| e.to_string())?;
        for r in t.rows() {
            worst_sum = worst_sum.max((r.sum() - 1.0).abs());
        }
    }
    let proj = AttentionProj {
        query: Linear::init(&mut rng, 5, 4),
        key: Linear::init(&mut rng, 5, 4),
    };
    let query = Array2::from_shape_fn((3, 5), |_| rng.random_range(-1.0..1.0));
    let key_row: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let keys = Array2::from_shape_fn((6, 5), |(_, j)| key_row[j]);
    let values = Array2::from_shape_fn((6, 2), |_| rng.random_range(-1.0..1.0));
    let (w, _) =
        attention(query.view(), keys.view(), values.view(), &proj).map_err(|e| e.to_string())?;
    let worst_uniform = w.iter().map(|x| (x - 1.0 / 6.0).abs()).fold(0.0, f64::max);
    let one_key = keys.slice(ndarray::s![..1, ..]).to_owned();
    let one_value = values.slice(ndarray::s![..1, ..]).to_owned();
    let (w1, ctx1) = attention(query.view(), one_key.view(), one_value.view(), &proj)
        .map_err(|e| e.to_string())?;
    let single_exact =
        w1.iter().all(|&x| x == 1.0) && ctx1.rows().into_iter().all(|r| r == one_value.row(0));
    check(
        worst_sum <= 1e-5 && worst_uniform <= 1e-6 && single_exact,
        format!(
            "max |row sum - 1| = {worst_sum:.2e}; identical keys max |w - 1/6| = {worst_uniform:.2e}; \
             single key exact: {single_exact}"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn lin(l: &Linear, x: &[f64]) -> Vec<f64> {
    (0..l.w.nrows())
        .map(|i| l.b[i] + (0..l.w.ncols()).map(|j| l.w[[i, j]] * x[j]).sum::<f64>())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn relu(x: Vec<f64>) -> Vec<f64> {
    x.into_iter().map(|v| v.max(0.0)).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn weighted_rows(w: &[f64], rows: &[Vec<f64>]) -> Vec<f64> {
    (0..rows[0].len())
        .map(|c| w.iter().zip(rows).map(|(a, r)| a * r[c]).sum())
        .collect()
}

fn layer<'a>(model: &'a Q2AModel, name: &str) -> &'a Linear {
    model
        .params
        .layers()
        .into_iter()
        .find(|(n, _)| *n == name)
        .map(|(_, l)| l)
        .unwrap()
}

/// Straight-line forward of the full model (QA→S, S→V, transfer, GRU with
/// history) for one question: per-step contexts and scores.
fn scalar_oracle(
    model: &Q2AModel,
    b: &FeatureBundle,
    gt: &[usize],
) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
    let rows = |a: &Array2<f32>| -> Vec<Vec<f64>> {
        a.rows()
            .into_iter()
            .map(|r| r.iter().map(|&x| x as f64).collect())
            .collect()
    };
    let s = rows(&b.script);
    let v = rows(&b.video);
    let d_a = layer(model, "grounding.qa_s.query").w.nrows() as f64;
    let ks: Vec<Vec<f64>> = s
        .iter()
        .map(|r| lin(layer(model, "grounding.qa_s.key"), r))
        .collect();
    let qsv: Vec<Vec<f64>> = s
        .iter()
        .map(|r| lin(layer(model, "grounding.s_v.query"), r))
        .collect();
    let kv: Vec<Vec<f64>> = v
        .iter()
        .map(|r| lin(layer(model, "grounding.s_v.key"), r))
        .collect();
    let wsv: Vec<Vec<f64>> = qsv
        .iter()
        .map(|q| {
            softmax(
                &kv.iter()
                    .map(|k| dot(q, k) / d_a.sqrt())
                    .collect::<Vec<_>>(),
            )
        })
        .collect();

    let mut h: Vec<f64> = model.params.decoder.h0.to_vec();
    let (mut contexts, mut scores) = (Vec::new(), Vec::new());
    for (i, step) in b.qas[0].steps.iter().enumerate() {
        let (mut cs, mut states, mut logits) = (Vec::new(), Vec::new(), Vec::new());
        for cand in step {
            let t: Vec<f64> = cand.text.iter().map(|&x| x as f64).collect();
            let btn: Vec<f64> = cand.button.iter().map(|&x| x as f64).collect();
            let q = lin(layer(model, "grounding.qa_s.query"), &t);
            let a = softmax(
                &ks.iter()
                    .map(|k| dot(&q, k) / d_a.sqrt())
                    .collect::<Vec<_>>(),
            );
            let qs = weighted_rows(&a, &s);
            let m: Vec<f64> = (0..v.len())
                .map(|tt| (0..s.len()).map(|r| a[r] * wsv[r][tt]).sum())
                .collect();
            let tv = weighted_rows(&m, &v);
            let x: Vec<f64> = [t, btn, qs, tv].concat();
            let c = lin(
                layer(model, "grounding.fuse_out"),
                &relu(lin(layer(model, "grounding.fuse_hidden"), &x)),
            );
            let hr = lin(layer(model, "decoder.gru.hr"), &h);
            let hz = lin(layer(model, "decoder.gru.hz"), &h);
            let hn = lin(layer(model, "decoder.gru.hn"), &h);
            let ir = lin(layer(model, "decoder.gru.ir"), &c);
            let iz = lin(layer(model, "decoder.gru.iz"), &c);
            let inn = lin(layer(model, "decoder.gru.in"), &c);
            let state: Vec<f64> = (0..h.len())
                .map(|k| {
                    let r = sigmoid(ir[k] + hr[k]);
                    let z = sigmoid(iz[k] + hz[k]);
                    let n = (inn[k] + r * hn[k]).tanh();
                    (1.0 - z) * n + z * h[k]
                })
                .collect();
            let head = relu(lin(layer(model, "decoder.head_hidden"), &state));
            logits.push(lin(layer(model, "decoder.head_out"), &head)[0]);
            states.push(state);
            cs.push(c);
        }
        scores.push(softmax(&logits));
        contexts.push(cs);
        h = states[gt[i]].clone();
    }
    (contexts, scores)
}

fn grid(rows: usize, cols: usize, salt: usize) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        (((i * 5 + j * 3 + salt * 7) % 11) as f32 - 5.0) / 8.0
    })
}

fn row(len: usize, salt: usize) -> Array1<f32> {
    grid(1, len, salt).row(0).to_owned()
}

fn criterion_4() -> Outcome {
    let d = 4;
    let steps: Vec<Vec<CandidateFeatures>> = (0..2)
        .map(|i| {
            (0..2)
                .map(|j| CandidateFeatures {
                    text: row(d, 10 + 2 * i + j),
                    button: row(d, 20 + 3 * i + j),
                })
                .collect()
        })
        .collect();
    let bundle = FeatureBundle {
        task_id: "oracle".into(),
        video: grid(2, d, 1),
        script: grid(2, d, 2),
        qas: vec![QaFeatures {
            qa_id: "oracle_q0".into(),
            question: row(d, 3),
            steps,
        }],
    };
    let config = ModelConfig {
        dims: Dims {
            d_a: d,
            d_h: d,
            d_c: d,
            d_r: d,
            head_hidden: d,
        },
        ..ModelConfig::default()
    };
    let mut model = Q2AModel::new(config, InputDims::of(&bundle), 0).map_err(|e| e.to_string())?;
    let hand: Vec<f64> = (0..model.params.num_params())
        .map(|k| 0.6 * (0.37 * k as f64 + 0.5).sin())
        .collect();
    model.params.assign_flat(&hand);
    model.params.decoder.h0 = Array1::from(vec![0.3, -0.2, 0.1, 0.5]);

    let gt = [1, 0];
    let (contexts, oracle_scores) = scalar_oracle(&model, &bundle, &gt);
    let qa = &bundle.qas[0];
    let mut worst = 0.0f64;
    for (i, cs) in contexts.iter().enumerate() {
        for (j, c) in cs.iter().enumerate() {
            let got = model.ground(&bundle, qa, i, j).map_err(|e| e.to_string())?;
            worst = c
                .iter()
                .zip(got.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(worst, f64::max);
        }
    }
    let preds = model
        .teacher_forced_unroll(&bundle, qa, &gt)
        .map_err(|e| e.to_string())?;
    for (p, o) in preds.iter().zip(&oracle_scores) {
        worst = p
            .scores
            .iter()
            .zip(o)
            .map(|(a, b)| (a - b).abs())
            .fold(worst, f64::max);
    }
    let spread = oracle_scores
        .iter()
        .flatten()
        .map(|p| (p - 0.5).abs())
        .fold(0.0, f64::max);
    check(
        worst <= 1e-10 && preds.len() == 2,
        format!("max |model - scalar oracle| = {worst:.2e} over contexts and scores (max |p - 1/2| = {spread:.3})"),
    )
}

// ---------------------------------------------------------------- 5

fn random_bundle(rng: &mut ChaCha8Rng, d_s: usize, d_v: usize, d_b: usize) -> FeatureBundle {
    let mut m =
        |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0f32));
    let video = m(4, d_v);
    let script = m(3, d_s);
    let question = m(1, d_s).row(0).to_owned();
    let steps = (0..2)
        .map(|_| {
            (0..3)
                .map(|_| CandidateFeatures {
                    text: m(1, d_s).row(0).to_owned(),
                    button: m(1, d_b).row(0).to_owned(),
                })
                .collect()
        })
        .collect();
    FeatureBundle {
        task_id: "fd".into(),
        video,
        script,
        qas: vec![QaFeatures {
            qa_id: "fd_q0".into(),
            question,
            steps,
        }],
    }
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bundle = random_bundle(&mut rng, 4, 4, 4);
    let gt = [2, 0];
    let base = ModelConfig {
        dims: Dims {
            d_a: 4,
            d_h: 4,
            d_c: 4,
            d_r: 4,
            head_hidden: 4,
        },
        ..ModelConfig::default()
    };
    let variants = [
        ("full", base.clone()),
        (
            "mlp",
            ModelConfig {
                steps_kind: StepsKind::Mlp,
                ..base.clone()
            },
        ),
        (
            "no-history",
            ModelConfig {
                use_history: false,
                ..base.clone()
            },
        ),
        (
            "question",
            ModelConfig {
                append_question: true,
                ..base.clone()
            },
        ),
        (
            "s_v-summary",
            ModelConfig {
                att_transfer: false,
                ..base.clone()
            },
        ),
        (
            "video-only",
            ModelConfig {
                use_script: false,
                att_qa_s: false,
                att_s_v: false,
                att_transfer: false,
                ..base.clone()
            },
        ),
    ];
    let mut lines = Vec::new();
    let mut ok = true;
    for (name, config) in variants {
        let model = Q2AModel::new(config, InputDims::of(&bundle), 11).map_err(|e| e.to_string())?;
        let n = model.params.num_params();
        let (_, grad) = model
            .loss_and_grad(&bundle, &bundle.qas[0], &gt)
            .map_err(|e| e.to_string())?;
        let analytic = grad.flatten();
        let theta = model.params.flatten();
        let eps = 1e-6;
        let mut probe = model.clone();
        let mut loss_at = |k: usize, delta: f64| {
            let mut p = theta.clone();
            p[k] += delta;
            probe.params.assign_flat(&p);
            probe.qa_loss(&bundle, &bundle.qas[0], &gt).unwrap()
        };
        let fd: Vec<f64> = (0..n)
            .map(|k| (loss_at(k, eps) - loss_at(k, -eps)) / (2.0 * eps))
            .collect();
        let diff = analytic
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = analytic
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(fd.iter().map(|a| a * a).sum::<f64>().sqrt());
        let rel = diff / norm.max(1e-300);
        // A dead ReLU head gives an all-zero gradient and a vacuous check.
        ok &= rel < 1e-3 && n <= 1000 && norm > 1e-4;
        lines.push(format!("{name}: {n} params |g| {norm:.1e} rel {rel:.1e}"));
    }
    check(ok, lines.join("; "))
}

// ---------------------------------------------------------------- 6, 7

fn criterion_6() -> Outcome {
    let exec = Execution::default();
    let corpus = synthetic_corpus(
        &GeneratorConfig::default(),
        &SyntheticBackend::default(),
        ButtonEncodingMode::Reverse,
        exec,
    )
    .map_err(|e| e.to_string())?;
    let train_qa: usize = corpus
        .split(dataset::Split::Train)
        .iter()
        .map(|b| b.qas.len())
        .sum();
    let val_qa: usize = corpus
        .split(dataset::Split::Val)
        .iter()
        .map(|b| b.qas.len())
        .sum();
    let (outcome, report) = experiment::train_and_eval(
        &corpus,
        &ModelConfig::default(),
        &TrainConfig::default(),
        EvalMode::FreeRunning,
        exec,
    )
    .map_err(|e| e.to_string())?;
    let curve: Vec<String> = outcome
        .log
        .iter()
        .map(|l| format!("{:.1}", l.val_r1.unwrap_or(f64::NAN)))
        .collect();
    let (first, last) = (
        outcome.log[0].train_loss,
        outcome.log.last().unwrap().train_loss,
    );
    check(
        report.r1 >= 50.0,
        format!(
            "{train_qa}/{val_qa} QA; val R@1 {:.1} (need >= 50.0, random 16.7); R@1 by epoch [{}]; \
             train loss {first:.4} -> {last:.4}",
            report.r1,
            curve.join(", ")
        ),
    )
}

fn criterion_7() -> Outcome {
    let exec = Execution::default();
    let mut with = Vec::new();
    let mut without = Vec::new();
    for seed in 0..3u64 {
        let gen = GeneratorConfig {
            history_dependent: true,
            seed,
            ..Default::default()
        };
        let corpus = synthetic_corpus(
            &gen,
            &SyntheticBackend::default(),
            ButtonEncodingMode::Reverse,
            exec,
        )
        .map_err(|e| e.to_string())?;
        let tc = TrainConfig {
            seed,
            ..Default::default()
        };
        for (history, out) in [(true, &mut with), (false, &mut without)] {
            let mc = ModelConfig {
                steps_kind: StepsKind::Gru,
                use_history: history,
                ..Default::default()
            };
            let (_, report) =
                experiment::train_and_eval(&corpus, &mc, &tc, EvalMode::FreeRunning, exec)
                    .map_err(|e| e.to_string())?;
            out.push(report.r1);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.1}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    check(
        mean(&with) > mean(&without),
        format!(
            "GRU+history mean R@1 {:.2} [{}] vs GRU without history {:.2} [{}]",
            mean(&with),
            fmt(&with),
            mean(&without),
            fmt(&without)
        ),
    )
}

// ---------------------------------------------------------------- 8

fn aqtc(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_aqtc"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "aqtc {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn pipeline(root: &Path) -> Result<Vec<u8>, String> {
    let data = root.join("data");
    let runs = root.join("runs");
    let (data, runs) = (data.to_str().unwrap(), runs.to_str().unwrap());
    let checkpoint = format!("{runs}/checkpoint.aqc");
    aqtc(&["generate", "--out", data, "--seed", "7"])?;
    aqtc(&["features", "--data", data])?;
    aqtc(&[
        "train",
        "--data",
        data,
        "--backend",
        "cache",
        "--out",
        runs,
        "--seed",
        "7",
    ])?;
    aqtc(&[
        "eval",
        "--data",
        data,
        "--backend",
        "cache",
        "--checkpoint",
        &checkpoint,
        "--out",
        runs,
    ])?;
    fs::read(root.join("runs/eval_report.json")).map_err(|e| e.to_string())
}

fn criterion_8() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = pipeline(a.path())?;
    let second = pipeline(b.path())?;
    let ckpt_same = fs::read(a.path().join("runs/checkpoint.aqc")).ok()
        == fs::read(b.path().join("runs/checkpoint.aqc")).ok();
    check(
        first == second && ckpt_same && !first.is_empty(),
        format!(
            "EvalReport JSON {} bytes, identical: {}; checkpoints identical: {ckpt_same}",
            first.len(),
            first == second
        ),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path().join("data");
    let mut violations = Vec::new();
    let mut tasks = Vec::new();
    for (sub, cfg) in [
        (
            "plain",
            GeneratorConfig {
                tasks: 10,
                ..Default::default()
            },
        ),
        (
            "history",
            GeneratorConfig {
                tasks: 5,
                history_dependent: true,
                seed: 1,
                ..Default::default()
            },
        ),
    ] {
        let r = root.join(sub);
        let summary =
            synth::generate_dataset(&cfg, &r, Execution::default()).map_err(|e| e.to_string())?;
        for id in &summary.task_ids {
            match dataset::load_task(&r.join(id)) {
                Ok(task) => {
                    violations.extend(validate_task(&task).iter().map(|v| format!("{id}: {v}")));
                    let meta = synth::load_meta(&r.join(id)).map_err(|e| e.to_string())?;
                    violations.extend(synth::check_consistency(&task, &meta));
                    tasks.push(task);
                }
                Err(e) => violations.push(format!("{id}: {e}")),
            }
        }
    }

    let backend = SyntheticBackend::new(16, 16, 0);
    let caches = [dir.path().join("c1"), dir.path().join("c2")];
    let mut cache_mismatch = 0;
    for task in &tasks[..4] {
        let b = embedding::bundle(task, &backend, ButtonEncodingMode::Both)
            .map_err(|e| e.to_string())?;
        let p1 = embedding::write_cache(&caches[0], &b).map_err(|e| e.to_string())?;
        let back = embedding::read_cache(&caches[0], &task.task_id).map_err(|e| e.to_string())?;
        let p2 = embedding::write_cache(&caches[1], &back).map_err(|e| e.to_string())?;
        if back != b || fs::read(p1).ok() != fs::read(p2).ok() {
            cache_mismatch += 1;
        }
    }

    let plain = &tasks[..10];
    let bundles: Vec<FeatureBundle> = plain[..4]
        .iter()
        .map(|t| embedding::bundle(t, &backend, ButtonEncodingMode::Reverse))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let labels = evaluation::labels_of(plain);
    let mut ckpt_same = true;
    for kind in [StepsKind::Gru, StepsKind::Mlp] {
        let mc = ModelConfig {
            steps_kind: kind,
            ..ModelConfig::tiny(8)
        };
        let tc = TrainConfig {
            max_epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let out = training::train(&mc, &tc, &bundles, &[], &labels, Execution::default())
            .map_err(|e| e.to_string())?;
        let ck = Checkpoint {
            model: out.model,
            train_config: tc,
            epoch: 2,
        };
        let (p1, p2) = (dir.path().join("a.aqc"), dir.path().join("b.aqc"));
        ck.save(&p1).map_err(|e| e.to_string())?;
        let loaded = Checkpoint::load(&p1).map_err(|e| e.to_string())?;
        loaded.save(&p2).map_err(|e| e.to_string())?;
        ckpt_same &= loaded == ck && fs::read(&p1).ok() == fs::read(&p2).ok();
    }
    check(
        violations.is_empty() && cache_mismatch == 0 && ckpt_same,
        format!(
            "{} generated tasks, {} violation(s){}; cache round-trip mismatches {cache_mismatch}; \
             checkpoint round-trip identical: {ckpt_same}",
            tasks.len(),
            violations.len(),
            violations
                .first()
                .map(|v| format!(" (first: {v})"))
                .unwrap_or_default()
        ),
    )
}

// ----------------------------------------------------------------

struct Criterion {
    id: u8,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion {
            id: 1,
            name: "metric oracle",
            budget: Duration::from_secs(1),
            run: criterion_1,
        },
        Criterion {
            id: 2,
            name: "random baseline",
            budget: Duration::from_secs(30),
            run: criterion_2,
        },
        Criterion {
            id: 3,
            name: "transfer attention stochasticity",
            budget: Duration::from_secs(1),
            run: criterion_3,
        },
        Criterion {
            id: 4,
            name: "scalar oracle equivalence",
            budget: Duration::from_secs(1),
            run: criterion_4,
        },
        Criterion {
            id: 5,
            name: "gradient check",
            budget: Duration::from_secs(30),
            run: criterion_5,
        },
        Criterion {
            id: 6,
            name: "learnability",
            budget: Duration::from_secs(600),
            run: criterion_6,
        },
        Criterion {
            id: 7,
            name: "history ablation direction",
            budget: Duration::from_secs(1800),
            run: criterion_7,
        },
        Criterion {
            id: 8,
            name: "determinism",
            budget: Duration::from_secs(900),
            run: criterion_8,
        },
        Criterion {
            id: 9,
            name: "format round-trips",
            budget: Duration::from_secs(60),
            run: criterion_9,
        },
    ];
    let only: Vec<u8> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for c in criteria
        .iter()
        .filter(|c| only.is_empty() || only.contains(&c.id))
    {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            Err(format!(
                "panicked: {}",
                p.downcast_ref::<String>()
                    .cloned()
                    .or(p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            ))
        });
        let elapsed = start.elapsed();
        let (status, detail) = match result {
            Ok(d) if elapsed <= c.budget => ("PASS", d),
            Ok(d) => (
                "FAIL",
                format!("{d}; took {elapsed:.1?}, budget {:?}", c.budget),
            ),
            Err(d) => ("FAIL", d),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!(
            "criterion {} {:<34} {status} [{elapsed:.2?}] {detail}",
            c.id, c.name
        );
    }
    println!("{failed} criterion/criteria failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
