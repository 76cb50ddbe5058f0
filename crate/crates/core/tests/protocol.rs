use fsl_core::baseline::{evaluate_finetuned, BaselineConfig, FineTuneModel};
use fsl_core::data::{EpisodeSpec, LabeledDataset, Phase};
use fsl_core::meta::{
    general_stage, meta_test, meta_train, repeat_experiment, train_scenario, DataSource, Learner, PhaseData,
    ReportMeta, ScenarioKind, ScenarioSpec, SplitSizes, TrainBudget, Trained,
};
use fsl_core::methods::{FewShotModel, Method, MethodConfig};
use fsl_core::nn::Conv4Config;
use fsl_core::optim::AdamConfig;
use fsl_core::synthetic::{generate_synthetic_dataset, SyntheticConfig};

fn backbone() -> Conv4Config {
    Conv4Config {
        blocks: 2,
        filters: 4,
        kernel: 3,
        padding: 1,
        input_size: 16,
        in_channels: 1,
    }
}

fn dataset(seed: u64) -> LabeledDataset<f32> {
    generate_synthetic_dataset(&SyntheticConfig {
        n_classes: 9,
        per_class: 12,
        image_size: 16,
        channels: 1,
        noise_level: 0.3,
        seed,
    })
    .unwrap()
}

fn episode() -> EpisodeSpec {
    EpisodeSpec {
        shots: 2,
        ways: 3,
        targets: 2,
        unlabeled: 2,
        distractors: 0,
    }
}

fn budget(total: usize) -> TrainBudget {
    TrainBudget {
        total_tasks: total,
        validation_period: 2,
        validation_tasks: 3,
    }
}

fn sizes() -> SplitSizes {
    SplitSizes {
        train: 3,
        val: 3,
        test: 3,
    }
}

fn spec<'a>(
    kind: ScenarioKind,
    general: &'a LabeledDataset<f32>,
    target: &'a LabeledDataset<f32>,
) -> ScenarioSpec<'a, f32> {
    let source = |name, dataset| DataSource {
        name,
        dataset,
        sizes: sizes(),
        labeled_fraction: 0.5,
    };
    ScenarioSpec {
        kind,
        general: Some(source("general", general)),
        target: source("target", target),
        general_budget: budget(4),
        target_budget: budget(4),
        general_episode: episode(),
        target_episode: episode(),
        eval_episode: episode(),
        test_tasks: 5,
        backbone: backbone(),
        method: MethodConfig::default(),
        baseline: BaselineConfig {
            batches: 4,
            batch_size: 6,
            decay_every: 2,
            validation_period: 2,
            validation_tasks: 3,
            finetune_iterations: 2,
            ..BaselineConfig::default()
        },
        optimizer: AdamConfig::default(),
        min_class_size: 1,
    }
}

#[test]
fn zero_budget_returns_the_initialization() {
    let ds = dataset(1);
    let data = PhaseData::prepare(&ds, sizes(), 0.5, 1, 3).unwrap();
    for method in Method::ALL {
        let model = FewShotModel::<f32>::new(method, backbone(), MethodConfig::default(), 5).unwrap();
        let out = meta_train(
            model.clone(),
            &data,
            &budget(0),
            &episode(),
            &episode(),
            AdamConfig::default(),
            2,
        )
        .unwrap();
        assert_eq!(out.best, model, "{method}");
        assert!(out.log.is_empty() && out.best_val.is_none());
    }
}

#[test]
fn training_log_and_best_checkpoint_agree() {
    let ds = dataset(2);
    let data = PhaseData::prepare(&ds, sizes(), 0.5, 1, 3).unwrap();
    let model = FewShotModel::<f32>::new(Method::Pn, backbone(), MethodConfig::default(), 5).unwrap();
    let out = meta_train(
        model,
        &data,
        &budget(7),
        &episode(),
        &episode(),
        AdamConfig::default(),
        2,
    )
    .unwrap();
    assert_eq!(out.log.len(), 7);
    assert!(out
        .log
        .iter()
        .enumerate()
        .all(|(i, r)| r.task == i && r.loss.is_finite()));
    let vals: Vec<f64> = out.log.iter().filter_map(|r| r.val_acc).collect();
    assert_eq!(vals.len(), 3);
    let best = vals.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(out.best_val, Some(best));
    // The first validation reaching the maximum wins; later ties do not replace it.
    let first_best = out.log.iter().position(|r| r.val_acc == Some(best)).unwrap();
    let again = meta_train(
        FewShotModel::<f32>::new(Method::Pn, backbone(), MethodConfig::default(), 5).unwrap(),
        &data,
        &budget(first_best + 1),
        &episode(),
        &episode(),
        AdamConfig::default(),
        2,
    )
    .unwrap();
    assert_eq!(again.best, out.best);
}

#[test]
fn general_then_target_starts_from_the_general_checkpoint() {
    let (general, target) = (dataset(3), dataset(4));
    let mut s = spec(ScenarioKind::GeneralThenTarget, &general, &target);
    for learner in [Learner::FewShot(Method::SkmMask), Learner::FineTune] {
        let ckpt = general_stage(&s, learner, 11).unwrap().model;
        s.target_budget.total_tasks = 0;
        s.baseline.batches = 0;
        let stages = train_scenario(&s, learner, 11, Some(ckpt.clone())).unwrap();
        assert_eq!(stages[0].model.checksum(), ckpt.checksum(), "{}", learner.key());
        s.target_budget.total_tasks = 4;
        s.baseline.batches = 4;
        let stages = train_scenario(&s, learner, 11, Some(ckpt.clone())).unwrap();
        assert_ne!(stages[0].model.checksum(), ckpt.checksum());
    }
}

#[test]
fn general_then_target_requires_a_matching_checkpoint() {
    let (general, target) = (dataset(3), dataset(4));
    let s = spec(ScenarioKind::GeneralThenTarget, &general, &target);
    assert!(train_scenario(&s, Learner::FewShot(Method::Pn), 1, None).is_err());
    let other = Trained::FewShot(FewShotModel::new(Method::Rn, backbone(), MethodConfig::default(), 1).unwrap());
    assert!(train_scenario(&s, Learner::FewShot(Method::Pn), 1, Some(other)).is_err());
}

#[test]
fn frozen_checkpoint_evaluates_identically() {
    let ds = dataset(5);
    let data = PhaseData::prepare(&ds, sizes(), 0.5, 1, 8).unwrap();
    let model = FewShotModel::<f32>::new(Method::CpnSkm, backbone(), MethodConfig::default(), 2).unwrap();
    let a = meta_test(&model, &data, 20, &episode(), 4, ReportMeta::default()).unwrap();
    let b = meta_test(&model, &data, 20, &episode(), 4, ReportMeta::default()).unwrap();
    assert_eq!(a, b);
    let c = meta_test(&model, &data, 20, &episode(), 5, ReportMeta::default()).unwrap();
    assert_ne!(a.accuracies, c.accuracies);
}

#[test]
fn fine_tuning_leaves_the_backbone_untouched() {
    let ds = dataset(6);
    let data = PhaseData::prepare(&ds, sizes(), 0.5, 1, 8).unwrap();
    let model = FineTuneModel::<f32>::new(backbone(), BaselineConfig::default(), 3).unwrap();
    let before = model.backbone_checksum();
    let ep = data.episode(Phase::Test, &episode(), 1, 0).unwrap().tensors(&ds);
    let a = evaluate_finetuned(&model, &ep, 9).unwrap();
    assert_eq!(model.backbone_checksum(), before);
    assert_eq!(evaluate_finetuned(&model, &ep, 9).unwrap(), a);
}

#[test]
fn repeats_resample_splits() {
    let (general, target) = (dataset(7), dataset(8));
    let s = spec(ScenarioKind::TargetOnly, &general, &target);
    let reports = repeat_experiment(&s, Learner::FewShot(Method::Pn), 3, 21).unwrap();
    assert_eq!(reports.len(), 3);
    assert_eq!(reports.iter().map(|r| r.meta.repeat).collect::<Vec<_>>(), vec![0, 1, 2]);
    let seeds: std::collections::HashSet<u64> = reports.iter().map(|r| r.meta.seed).collect();
    assert_eq!(seeds.len(), 3);
    assert_eq!(
        repeat_experiment(&s, Learner::FewShot(Method::Pn), 3, 21).unwrap(),
        reports
    );
}
