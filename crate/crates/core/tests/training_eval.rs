use aqtc::dataset::Split;
use aqtc::decoder::StepsKind;
use aqtc::embedding::{ButtonEncodingMode, SyntheticBackend};
use aqtc::evaluation::{evaluate, EvalMode, Labels};
use aqtc::experiment::{synthetic_corpus, Corpus};
use aqtc::model::{ModelConfig, Q2AModel};
use aqtc::synth::GeneratorConfig;
use aqtc::training::{train, Checkpoint, TrainConfig};
use aqtc::types::FeatureBundle;
use aqtc::Execution;

fn corpus(tasks: usize) -> Corpus {
    let cfg = GeneratorConfig {
        tasks,
        ..Default::default()
    };
    synthetic_corpus(
        &cfg,
        &SyntheticBackend::new(16, 16, 0),
        ButtonEncodingMode::Reverse,
        Execution::Parallel,
    )
    .unwrap()
}

#[test]
fn default_recipe_lowers_training_loss() {
    let c = corpus(20);
    let train_b = c.split(Split::Train);
    let val_b = c.split(Split::Val);
    let before = train_b.clone();
    let out = train(
        &ModelConfig::tiny(16),
        &TrainConfig::default(),
        &train_b,
        &val_b,
        &c.labels,
        Execution::Parallel,
    )
    .unwrap();
    assert_eq!(out.log.len(), 7);
    assert_eq!(
        out.log.iter().map(|l| l.epoch).collect::<Vec<_>>(),
        (0..7).collect::<Vec<_>>()
    );
    assert!(
        out.log[6].train_loss < out.log[0].train_loss,
        "{:?}",
        out.log
    );
    assert!(out.log.iter().all(|l| l.val_r1.is_some()));
    assert_eq!(train_b, before);
}

#[test]
fn larger_step_size_learns_the_corpus() {
    let c = corpus(40);
    let cfg = TrainConfig {
        base_lr: 0.1,
        max_epochs: 20,
        batch_size: 8,
        ..Default::default()
    };
    let (out, report) = aqtc::experiment::train_and_eval(
        &c,
        &ModelConfig::tiny(32),
        &cfg,
        EvalMode::FreeRunning,
        Execution::Parallel,
    )
    .unwrap();
    let (first, last) = (out.log[0].train_loss, out.log.last().unwrap().train_loss);
    assert!(last < 0.5 * first, "{first} -> {last}");
    assert!(report.r1 > 50.0, "{}", report.r1);
}

fn self_labels(
    model: &Q2AModel,
    bundles: &[FeatureBundle],
    pick: impl Fn(&[usize]) -> usize,
) -> Labels {
    let mut out = Labels::new();
    for b in bundles {
        for qa in &b.qas {
            // Free-running: each step conditions on the model's own choice,
            // so the chosen path is the one the labels must follow.
            let preds = model.free_running_infer(b, qa).unwrap();
            out.insert(
                qa.qa_id.clone(),
                preds.iter().map(|p| pick(&p.ranks)).collect(),
            );
        }
    }
    out
}

#[test]
fn labels_equal_to_predictions_rank_first() {
    let c = corpus(6);
    let model = Q2AModel::new(
        ModelConfig::tiny(8),
        aqtc::model::InputDims::of(&c.bundles[0]),
        5,
    )
    .unwrap();
    let best = self_labels(&model, &c.bundles, |ranks| {
        ranks.iter().position(|&r| r == 1).unwrap()
    });
    let r = evaluate(
        &model,
        &c.bundles,
        &best,
        EvalMode::FreeRunning,
        Execution::Parallel,
    )
    .unwrap();
    assert_eq!((r.r1, r.r3, r.mr, r.mrr), (100.0, 100.0, 1.0, 1.0));
    let forced = evaluate(
        &model,
        &c.bundles,
        &best,
        EvalMode::TeacherForced,
        Execution::Parallel,
    )
    .unwrap();
    assert_eq!(forced.r1, 100.0);

    // Worst candidate only at the first step: later steps are scored after a
    // different history, so only step 0 is pinned.
    let worst = self_labels(&model, &c.bundles, |ranks| {
        ranks.iter().enumerate().max_by_key(|(_, r)| **r).unwrap().0
    });
    let r = evaluate(
        &model,
        &c.bundles,
        &worst,
        EvalMode::TeacherForced,
        Execution::Parallel,
    )
    .unwrap();
    assert!(r
        .steps
        .iter()
        .filter(|s| s.step == 0)
        .all(|s| s.rank == s.n_candidates));
    assert!(r.is_self_consistent());
}

#[test]
fn checkpoint_reload_reproduces_outputs() {
    let c = corpus(8);
    let train_b = c.split(Split::Train);
    for kind in [StepsKind::Gru, StepsKind::Mlp] {
        let mc = ModelConfig {
            steps_kind: kind,
            ..ModelConfig::tiny(8)
        };
        let tc = TrainConfig {
            max_epochs: 2,
            base_lr: 0.05,
            ..Default::default()
        };
        let out = train(&mc, &tc, &train_b, &[], &c.labels, Execution::Sequential).unwrap();
        let ck = Checkpoint {
            model: out.model.clone(),
            train_config: tc.clone(),
            epoch: 2,
        };
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("m.aqc");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.model, out.model);
        assert_eq!(back.epoch, 2);
        for b in &c.bundles {
            for qa in &b.qas {
                let a = out.model.free_running_infer(b, qa).unwrap();
                let z = back.model.free_running_infer(b, qa).unwrap();
                assert_eq!(a, z);
            }
        }
        let e1 = evaluate(
            &out.model,
            &c.bundles,
            &c.labels,
            EvalMode::FreeRunning,
            Execution::Parallel,
        )
        .unwrap();
        let e2 = evaluate(
            &back.model,
            &c.bundles,
            &c.labels,
            EvalMode::FreeRunning,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(e1.to_json(), e2.to_json());
    }
}

#[test]
fn evaluation_rejects_wrong_widths() {
    let c = corpus(4);
    let mut model = Q2AModel::new(
        ModelConfig::tiny(8),
        aqtc::model::InputDims::of(&c.bundles[0]),
        0,
    )
    .unwrap();
    model.input.d_s += 1;
    assert!(evaluate(
        &model,
        &c.bundles,
        &c.labels,
        EvalMode::FreeRunning,
        Execution::Sequential
    )
    .is_err());
}
