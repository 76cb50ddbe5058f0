//! Episodic meta-training with validation checkpointing, meta-testing,
//! training scenarios and repeated experiments.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::baseline::{evaluate_finetuned, pretrain_classifier, BaselineConfig, FineTuneModel, PretrainRow};
use crate::data::{
    make_split, sample_episode, Episode, EpisodeSpec, EpisodeTensors, LabeledDataset, LabeledUnlabeledPartition, Phase,
    SplitSpec,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::methods::{FewShotModel, Method, MethodConfig};
use crate::nn::Conv4Config;
use crate::optim::{collect_grads, Adam, AdamConfig};
use crate::rng::{derive_seed, rng_from};
use crate::stats::{ci95_half_width, mean};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainBudget {
    pub total_tasks: usize,
    /// Tasks between meta-validations.
    pub validation_period: usize,
    /// Tasks per meta-validation pass.
    pub validation_tasks: usize,
}

impl Default for TrainBudget {
    fn default() -> Self {
        Self {
            total_tasks: 5_000,
            validation_period: 250,
            validation_tasks: 100,
        }
    }
}

impl TrainBudget {
    /// Period and validation size must be positive; the period may not
    /// exceed a non-zero total.
    pub fn validate(&self) -> Result<()> {
        if self.validation_period == 0 || self.validation_tasks == 0 {
            return Err(Error::Config(
                "validation period and task count must be positive".into(),
            ));
        }
        if self.total_tasks > 0 && self.validation_period > self.total_tasks {
            return Err(Error::Config(format!(
                "validation period {} exceeds the {} training tasks",
                self.validation_period, self.total_tasks
            )));
        }
        Ok(())
    }
}

/// Identifying data attached to an [`EvalReport`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReportMeta {
    pub method: String,
    pub scenario: String,
    pub dataset: String,
    pub repeat: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub ci_half_width: f64,
    pub meta: ReportMeta,
}

impl EvalReport {
    pub fn from_accuracies(accuracies: Vec<f64>, meta: ReportMeta) -> Self {
        Self {
            mean: mean(&accuracies),
            ci_half_width: ci95_half_width(&accuracies),
            accuracies,
            meta,
        }
    }
}

/// A dataset prepared for episodic sampling: class split and labeled/unlabeled partition.
#[derive(Debug, Clone)]
pub struct PhaseData<'a, T> {
    pub dataset: &'a LabeledDataset<T>,
    pub split: SplitSpec,
    pub partition: LabeledUnlabeledPartition,
}

/// Classes per phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl<'a, T: Real> PhaseData<'a, T> {
    pub fn prepare(
        dataset: &'a LabeledDataset<T>,
        sizes: SplitSizes,
        labeled_fraction: f64,
        min_class_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let split = make_split(
            dataset,
            sizes.train,
            sizes.val,
            sizes.test,
            derive_seed(seed, "split", 0),
            min_class_size,
        )?;
        let partition = if labeled_fraction >= 1.0 {
            LabeledUnlabeledPartition::all_labeled(dataset)
        } else {
            LabeledUnlabeledPartition::new(dataset, labeled_fraction, derive_seed(seed, "partition", 0))?
        };
        Ok(Self {
            dataset,
            split,
            partition,
        })
    }

    /// Episode `index` of the stream identified by `seed`.
    pub fn episode(&self, phase: Phase, spec: &EpisodeSpec, seed: u64, index: u64) -> Result<Episode> {
        let mut rng = rng_from(seed, index);
        sample_episode(&self.partition, self.split.classes(phase), spec, &mut rng)
    }
}

/// Anything that can be scored on a single task.
pub trait TaskEvaluator<T: Real> {
    /// Target accuracy; `task_seed` seeds any per-task randomness.
    fn task_accuracy(&self, episode: &EpisodeTensors<T>, task_seed: u64) -> Result<f64>;
}

impl<T: Real> TaskEvaluator<T> for FewShotModel<T> {
    fn task_accuracy(&self, episode: &EpisodeTensors<T>, _task_seed: u64) -> Result<f64> {
        self.accuracy(episode)
    }
}

impl<T: Real> TaskEvaluator<T> for FineTuneModel<T> {
    fn task_accuracy(&self, episode: &EpisodeTensors<T>, task_seed: u64) -> Result<f64> {
        evaluate_finetuned(self, episode, task_seed)
    }
}

/// Accuracy on task `index` of a meta-test stream. Independent of every
/// other task, so tasks may be evaluated in any order or in parallel.
pub fn meta_test_task<T: Real, E: TaskEvaluator<T> + ?Sized>(
    model: &E,
    data: &PhaseData<'_, T>,
    phase: Phase,
    spec: &EpisodeSpec,
    seed: u64,
    index: usize,
) -> Result<f64> {
    let ep = data.episode(phase, spec, seed, index as u64)?;
    model.task_accuracy(&ep.tensors(data.dataset), derive_seed(seed, "head", index as u64))
}

/// Per-task accuracies of a frozen model on `n_tasks` test-phase tasks.
pub fn meta_test<T: Real, E: TaskEvaluator<T> + ?Sized>(
    model: &E,
    data: &PhaseData<'_, T>,
    n_tasks: usize,
    spec: &EpisodeSpec,
    seed: u64,
    meta: ReportMeta,
) -> Result<EvalReport> {
    let acc = (0..n_tasks)
        .map(|i| meta_test_task(model, data, Phase::Test, spec, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_accuracies(acc, meta))
}

/// Mean accuracy over a fixed set of validation tasks.
pub fn validation_accuracy<T: Real, E: TaskEvaluator<T> + ?Sized>(
    model: &E,
    data: &PhaseData<'_, T>,
    tasks: usize,
    spec: &EpisodeSpec,
    seed: u64,
) -> Result<f64> {
    let acc = (0..tasks)
        .map(|i| meta_test_task(model, data, Phase::Val, spec, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&acc))
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub task: usize,
    pub loss: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Model with the highest validation accuracy seen; the final model if
    /// validation never ran.
    pub best: FewShotModel<T>,
    pub best_val: Option<f64>,
    pub log: Vec<LogRow>,
}

/// One optimizer step on one task.
pub fn train_step<T: Real>(
    model: &mut FewShotModel<T>,
    adam: &mut Adam<T>,
    ep: &EpisodeTensors<T>,
    seed: u64,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.store().bind(&mut g);
    let mut rng = rng_from(seed, 0);
    let out = model.episode_loss(&mut g, &bound, ep, &mut rng)?;
    let loss = g.value(out.loss).item().as_f64();
    g.backward(out.loss)?;
    let grads = collect_grads(&g, &bound);
    adam.step(model.store_mut(), &grads);
    Ok(loss)
}

/// Meta-trains `model` one task per step with Adam; validates every
/// `validation_period` tasks and keeps the strictly best model.
#[allow(clippy::too_many_arguments)]
pub fn meta_train<T: Real>(
    mut model: FewShotModel<T>,
    data: &PhaseData<'_, T>,
    budget: &TrainBudget,
    train_spec: &EpisodeSpec,
    val_spec: &EpisodeSpec,
    optimizer: AdamConfig,
    seed: u64,
) -> Result<TrainOutcome<T>> {
    budget.validate()?;
    let needed = train_spec.ways + train_spec.distractors;
    let available = data.split.classes(Phase::Train).len();
    if available < needed {
        return Err(Error::InsufficientClasses { needed, available });
    }
    let mut adam = Adam::new(model.store(), optimizer);
    let task_seed = derive_seed(seed, "train", 0);
    let step_seed = derive_seed(seed, "step", 0);
    let val_seed = derive_seed(seed, "val", 0);
    let mut log = Vec::with_capacity(budget.total_tasks);
    let mut best: Option<(f64, FewShotModel<T>)> = None;
    for task in 0..budget.total_tasks {
        let ep = data.episode(Phase::Train, train_spec, task_seed, task as u64)?;
        let loss = train_step(
            &mut model,
            &mut adam,
            &ep.tensors(data.dataset),
            derive_seed(step_seed, "", task as u64),
        )?;
        let mut val_acc = None;
        if (task + 1) % budget.validation_period == 0 {
            let acc = validation_accuracy(&model, data, budget.validation_tasks, val_spec, val_seed)?;
            val_acc = Some(acc);
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, model.clone()));
            }
        }
        log.push(LogRow { task, loss, val_acc });
    }
    Ok(match best {
        Some((acc, m)) => TrainOutcome {
            best: m,
            best_val: Some(acc),
            log,
        },
        None => TrainOutcome {
            best: model,
            best_val: None,
            log,
        },
    })
}

/// The three training scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScenarioKind {
    /// Train on the general dataset only.
    GeneralOnly,
    /// Train on the target dataset from random initialization.
    TargetOnly,
    /// Continue training a general-only checkpoint on the target dataset.
    GeneralThenTarget,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [Self::GeneralOnly, Self::TargetOnly, Self::GeneralThenTarget];

    pub fn key(self) -> &'static str {
        match self {
            Self::GeneralOnly => "general-only",
            Self::TargetOnly => "target-only",
            Self::GeneralThenTarget => "general-then-target",
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Self::GeneralOnly => 1,
            Self::TargetOnly => 2,
            Self::GeneralThenTarget => 3,
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.key() == key)
    }
}

/// Either a meta-learned method or the fine-tuning baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Learner {
    FewShot(Method),
    FineTune,
}

impl Learner {
    pub const FINE_TUNE_KEY: &'static str = "convnet-ft";

    pub fn key(self) -> &'static str {
        match self {
            Learner::FewShot(m) => m.key(),
            Learner::FineTune => Self::FINE_TUNE_KEY,
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        if key == Self::FINE_TUNE_KEY {
            return Some(Learner::FineTune);
        }
        Method::from_key(key).map(Learner::FewShot)
    }
}

/// A trained model of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Trained<T> {
    FewShot(FewShotModel<T>),
    FineTune(FineTuneModel<T>),
}

impl<T: Real> Trained<T> {
    pub fn learner(&self) -> Learner {
        match self {
            Trained::FewShot(m) => Learner::FewShot(m.method()),
            Trained::FineTune(_) => Learner::FineTune,
        }
    }

    pub fn checksum(&self) -> u64 {
        match self {
            Trained::FewShot(m) => m.store().checksum(),
            Trained::FineTune(m) => m.store().checksum(),
        }
    }
}

impl<T: Real> TaskEvaluator<T> for Trained<T> {
    fn task_accuracy(&self, episode: &EpisodeTensors<T>, task_seed: u64) -> Result<f64> {
        match self {
            Trained::FewShot(m) => m.task_accuracy(episode, task_seed),
            Trained::FineTune(m) => m.task_accuracy(episode, task_seed),
        }
    }
}

/// A dataset reference plus how to split it.
#[derive(Debug, Clone, Copy)]
pub struct DataSource<'a, T> {
    pub name: &'a str,
    pub dataset: &'a LabeledDataset<T>,
    pub sizes: SplitSizes,
    pub labeled_fraction: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ScenarioSpec<'a, T> {
    pub kind: ScenarioKind,
    pub general: Option<DataSource<'a, T>>,
    pub target: DataSource<'a, T>,
    pub general_budget: TrainBudget,
    pub target_budget: TrainBudget,
    /// Training episodes on the general dataset.
    pub general_episode: EpisodeSpec,
    /// Training episodes on the target dataset.
    pub target_episode: EpisodeSpec,
    /// Validation and test episodes.
    pub eval_episode: EpisodeSpec,
    pub test_tasks: usize,
    pub backbone: Conv4Config,
    pub method: MethodConfig,
    pub baseline: BaselineConfig,
    pub optimizer: AdamConfig,
    pub min_class_size: usize,
}

/// Result of one training stage.
#[derive(Debug, Clone)]
pub struct Stage<T> {
    pub name: &'static str,
    pub model: Trained<T>,
    pub best_val: Option<f64>,
    pub log: Vec<LogRow>,
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome<T> {
    pub report: EvalReport,
    pub stages: Vec<Stage<T>>,
}

fn baseline_log(rows: Vec<PretrainRow>) -> Vec<LogRow> {
    rows.into_iter()
        .map(|r| LogRow {
            task: r.batch,
            loss: r.loss,
            val_acc: r.val_acc,
        })
        .collect()
}

/// Trains `start` (or a fresh model) on one dataset.
#[allow(clippy::too_many_arguments)]
pub fn train_stage<T: Real>(
    spec: &ScenarioSpec<'_, T>,
    learner: Learner,
    start: Option<Trained<T>>,
    data: &PhaseData<'_, T>,
    budget: &TrainBudget,
    train_episode: &EpisodeSpec,
    seed: u64,
    name: &'static str,
) -> Result<Stage<T>> {
    let init_seed = derive_seed(seed, "model", 0);
    match learner {
        Learner::FewShot(method) => {
            let model = match start {
                Some(Trained::FewShot(m)) if m.method() == method => m,
                Some(_) => return Err(Error::Config("checkpoint was trained with a different method".into())),
                None => FewShotModel::new(method, spec.backbone, spec.method, init_seed)?,
            };
            let out = meta_train(
                model,
                data,
                budget,
                train_episode,
                &spec.eval_episode,
                spec.optimizer,
                seed,
            )?;
            Ok(Stage {
                name,
                model: Trained::FewShot(out.best),
                best_val: out.best_val,
                log: out.log,
            })
        }
        Learner::FineTune => {
            let model = match start {
                Some(Trained::FineTune(mut m)) => {
                    m.set_config(spec.baseline);
                    m
                }
                Some(_) => return Err(Error::Config("checkpoint is not a fine-tune baseline".into())),
                None => FineTuneModel::new(spec.backbone, spec.baseline, init_seed)?,
            };
            let val_seed = derive_seed(seed, "val", 0);
            let tasks = spec.baseline.validation_tasks;
            let out = pretrain_classifier(
                model,
                data.dataset,
                &data.partition,
                &data.split,
                spec.optimizer,
                seed,
                |m| validation_accuracy(m, data, tasks, &spec.eval_episode, val_seed),
            )?;
            Ok(Stage {
                name,
                model: Trained::FineTune(out.best),
                best_val: out.best_val,
                log: baseline_log(out.log),
            })
        }
    }
}

/// Seed of repeat `index` under `master`.
pub fn repeat_seed(master: u64, index: usize) -> u64 {
    derive_seed(master, "repeat", index as u64)
}

/// Trains a fresh model on the general dataset (the first stage of
/// general-only and general-then-target).
pub fn general_stage<T: Real>(spec: &ScenarioSpec<'_, T>, learner: Learner, seed: u64) -> Result<Stage<T>> {
    let data = general_data(spec, seed)?;
    train_stage(
        spec,
        learner,
        None,
        &data,
        &spec.general_budget,
        &spec.general_episode,
        derive_seed(seed, "general-train", 0),
        "general",
    )
}

/// The general dataset of a scenario, split and partitioned for `seed`.
pub fn general_data<'a, T: Real>(spec: &ScenarioSpec<'a, T>, seed: u64) -> Result<PhaseData<'a, T>> {
    let general = spec
        .general
        .ok_or_else(|| Error::Config("this scenario needs a general dataset".into()))?;
    PhaseData::prepare(
        general.dataset,
        general.sizes,
        general.labeled_fraction,
        spec.min_class_size,
        derive_seed(seed, "general-data", 0),
    )
}

/// The target dataset of a scenario, split and partitioned for `seed`.
pub fn target_data<'a, T: Real>(spec: &ScenarioSpec<'a, T>, seed: u64) -> Result<PhaseData<'a, T>> {
    PhaseData::prepare(
        spec.target.dataset,
        spec.target.sizes,
        spec.target.labeled_fraction,
        spec.min_class_size,
        derive_seed(seed, "target-data", 0),
    )
}

/// Seed of the meta-test task stream of a scenario run.
pub fn test_seed(seed: u64) -> u64 {
    derive_seed(seed, "test", 0)
}

/// Trains on the target dataset, from `start` when continuing a
/// general-only checkpoint or from scratch otherwise.
pub fn target_stage<T: Real>(
    spec: &ScenarioSpec<'_, T>,
    learner: Learner,
    seed: u64,
    start: Option<Trained<T>>,
) -> Result<Stage<T>> {
    let target = target_data(spec, seed)?;
    train_stage(
        spec,
        learner,
        start,
        &target,
        &spec.target_budget,
        &spec.target_episode,
        derive_seed(seed, "target-train", 0),
        "target",
    )
}

/// Trains every stage of `spec.kind` and returns them in order. The model
/// to evaluate is the last stage's.
pub fn train_scenario<T: Real>(
    spec: &ScenarioSpec<'_, T>,
    learner: Learner,
    seed: u64,
    general_checkpoint: Option<Trained<T>>,
) -> Result<Vec<Stage<T>>> {
    match spec.kind {
        ScenarioKind::GeneralOnly => Ok(alloc::vec![general_stage(spec, learner, seed)?]),
        ScenarioKind::TargetOnly => Ok(alloc::vec![target_stage(spec, learner, seed, None)?]),
        ScenarioKind::GeneralThenTarget => {
            let ckpt = general_checkpoint.ok_or_else(|| {
                Error::Config("general-then-target needs the best checkpoint of a general-only run".into())
            })?;
            if ckpt.learner() != learner {
                return Err(Error::Config(format!(
                    "general checkpoint was trained with `{}`, not `{}`",
                    ckpt.learner().key(),
                    learner.key()
                )));
            }
            Ok(alloc::vec![target_stage(spec, learner, seed, Some(ckpt))?])
        }
    }
}

/// Runs one scenario end to end and meta-tests on the target test split.
///
/// `general_checkpoint` must hold the best model of a general-only run for
/// [`ScenarioKind::GeneralThenTarget`] and is ignored otherwise.
pub fn run_scenario<T: Real>(
    spec: &ScenarioSpec<'_, T>,
    learner: Learner,
    seed: u64,
    general_checkpoint: Option<Trained<T>>,
) -> Result<ScenarioOutcome<T>> {
    let stages = train_scenario(spec, learner, seed, general_checkpoint)?;
    let model = &stages.last().expect("at least one stage").model;
    let meta = ReportMeta {
        method: learner.key().to_string(),
        scenario: spec.kind.key().to_string(),
        dataset: spec.target.name.to_string(),
        repeat: 0,
        seed,
    };
    let target = target_data(spec, seed)?;
    let report = meta_test(
        model,
        &target,
        spec.test_tasks,
        &spec.eval_episode,
        test_seed(seed),
        meta,
    )?;
    Ok(ScenarioOutcome { report, stages })
}

/// Runs a scenario `n_repeats` times with fresh splits and seeds per repeat.
/// General-then-target repeats first run their own general-only stage.
pub fn repeat_experiment<T: Real>(
    spec: &ScenarioSpec<'_, T>,
    learner: Learner,
    n_repeats: usize,
    master_seed: u64,
) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::with_capacity(n_repeats);
    for r in 0..n_repeats {
        let seed = repeat_seed(master_seed, r);
        let checkpoint = if spec.kind == ScenarioKind::GeneralThenTarget {
            Some(general_stage(spec, learner, seed)?.model)
        } else {
            None
        };
        let mut out = run_scenario(spec, learner, seed, checkpoint)?;
        out.report.meta.repeat = r;
        reports.push(out.report);
    }
    Ok(reports)
}
