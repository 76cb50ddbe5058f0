//! The `train`, `eval` and `generate-data` commands.
//!
//! Every repeat of an experiment owns one run directory,
//! `<out>/<method>__<scenario>__r<repeat>__s<seed>`, holding the effective
//! config, the class splits, the training log, the best checkpoint and,
//! after evaluation, the report.

use std::fs;
use std::path::{Path, PathBuf};

use fsl_core::data::{EpisodeSpec, LabeledDataset, Phase};
use fsl_core::meta::{
    general_data, meta_test_task, repeat_seed, target_data, test_seed, train_scenario, EvalReport, LogRow, PhaseData,
    ReportMeta, ScenarioKind, TaskEvaluator, Trained,
};
use fsl_core::rng::derive_seed;
use fsl_core::{Precision, Real};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_trained, save_trained};
use crate::config::{DatasetConfig, ExperimentConfig};
use crate::dataset::{export_synthetic, load_dataset, Manifest, SplitFile};
use crate::error::{io_err, HarnessError, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const SPLIT_FILE: &str = "split.toml";
pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REPORT_FILE: &str = "report.json";

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, mut config: ExperimentConfig) -> ExperimentConfig {
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        config
    }
}

pub fn run_dir_name(method: &str, scenario: &str, repeat: usize, seed: u64) -> String {
    format!("{method}__{scenario}__r{repeat}__s{seed}")
}

pub fn run_dir(config: &ExperimentConfig, repeat: usize) -> PathBuf {
    config
        .output_dir
        .join(run_dir_name(&config.method, &config.scenario, repeat, config.seed))
}

/// Run directory of the general-only run a general-then-target repeat continues from.
pub fn general_run_dir(config: &ExperimentConfig, repeat: usize) -> PathBuf {
    config.output_dir.join(run_dir_name(
        &config.method,
        ScenarioKind::GeneralOnly.key(),
        repeat,
        config.seed,
    ))
}

/// Evaluation result as written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFile {
    pub method: String,
    pub scenario: String,
    pub dataset: String,
    pub repeat: usize,
    pub seed: u64,
    pub repeat_seed: u64,
    pub n_tasks: usize,
    pub mean_accuracy: f64,
    pub ci_half_width: f64,
    pub accuracies: Vec<f64>,
}

impl ReportFile {
    pub fn new(report: &EvalReport, master_seed: u64) -> Self {
        Self {
            method: report.meta.method.clone(),
            scenario: report.meta.scenario.clone(),
            dataset: report.meta.dataset.clone(),
            repeat: report.meta.repeat,
            seed: master_seed,
            repeat_seed: report.meta.seed,
            n_tasks: report.accuracies.len(),
            mean_accuracy: report.mean,
            ci_half_width: report.ci_half_width,
            accuracies: report.accuracies.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| HarnessError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, text + "\n").map_err(io_err(path))
    }
}

/// Meta-tests `n_tasks` tasks in parallel. Each task depends only on its
/// index, so the result equals the sequential evaluation.
pub fn parallel_meta_test<T, E>(
    model: &E,
    data: &PhaseData<'_, T>,
    n_tasks: usize,
    spec: &EpisodeSpec,
    seed: u64,
    meta: ReportMeta,
) -> Result<EvalReport>
where
    T: Real,
    E: TaskEvaluator<T> + Sync + ?Sized,
{
    let acc = (0..n_tasks)
        .into_par_iter()
        .map(|i| meta_test_task(model, data, Phase::Test, spec, seed, i))
        .collect::<fsl_core::Result<Vec<f64>>>()?;
    Ok(EvalReport::from_accuracies(acc, meta))
}

struct Loaded<T> {
    general: Option<LabeledDataset<T>>,
    target: LabeledDataset<T>,
}

fn load_all<T: Real>(config: &ExperimentConfig) -> Result<Loaded<T>> {
    let base = Path::new(".");
    let load = |d: &DatasetConfig| load_dataset::<T>(d, base);
    let general = if config.scenario_kind()? == ScenarioKind::TargetOnly {
        None
    } else {
        config.general.as_ref().map(load).transpose()?
    };
    Ok(Loaded {
        general,
        target: load(&config.target)?,
    })
}

fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let csv_err = |source| HarnessError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["task", "loss", "val_acc"]).map_err(csv_err)?;
    for r in rows {
        let val = r.val_acc.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([r.task.to_string(), r.loss.to_string(), val])
            .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Serialize)]
struct SplitRecord {
    general: Option<SplitFile>,
    target: SplitFile,
}

/// Outcome of training one repeat.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub dir: PathBuf,
    pub best_val: Option<f64>,
    pub checksum: u64,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn train_typed<T: Real>(config: &ExperimentConfig) -> Result<Vec<TrainedRun>> {
    let learner = config.learner()?;
    let kind = config.scenario_kind()?;
    // Fail early rather than after the first repeats have trained.
    if kind == ScenarioKind::GeneralThenTarget {
        for r in 0..config.repeats {
            let ckpt = general_run_dir(config, r).join(CHECKPOINT_FILE);
            if !ckpt.is_file() {
                return Err(HarnessError::Missing(format!(
                    "general-then-target needs the general-only checkpoint {}; run `train` with scenario = \"general-only\" first",
                    ckpt.display()
                )));
            }
        }
    }
    let data = load_all::<T>(config)?;
    let spec = config.scenario_spec(data.general.as_ref(), &data.target)?;
    let mut runs = Vec::with_capacity(config.repeats);
    for r in 0..config.repeats {
        let seed = repeat_seed(config.seed, r);
        let start = match kind {
            ScenarioKind::GeneralThenTarget => {
                Some(load_trained::<T>(&general_run_dir(config, r).join(CHECKPOINT_FILE))?)
            }
            _ => None,
        };
        let stages = train_scenario(&spec, learner, seed, start)?;
        let stage = stages.last().expect("one stage per scenario");

        let dir = run_dir(config, r);
        create_dir(&dir)?;
        let cfg_path = dir.join(CONFIG_FILE);
        fs::write(&cfg_path, config.to_toml()).map_err(io_err(&cfg_path))?;
        let split = SplitRecord {
            general: match (kind, &config.general, data.general.as_ref()) {
                (ScenarioKind::GeneralOnly, Some(g), Some(ds)) => {
                    let d = general_data(&spec, seed)?;
                    Some(SplitFile::new(
                        &g.name,
                        ds,
                        &d.split,
                        derive_seed(seed, "general-data", 0),
                    ))
                }
                _ => None,
            },
            target: {
                let d = target_data(&spec, seed)?;
                SplitFile::new(
                    &config.target.name,
                    &data.target,
                    &d.split,
                    derive_seed(seed, "target-data", 0),
                )
            },
        };
        let split_path = dir.join(SPLIT_FILE);
        let text = toml::to_string(&split).map_err(|e| HarnessError::Config(e.to_string()))?;
        fs::write(&split_path, text).map_err(io_err(&split_path))?;
        write_log(&dir.join(LOG_FILE), &stage.log)?;
        save_trained(&stage.model, &dir.join(CHECKPOINT_FILE))?;
        runs.push(TrainedRun {
            dir,
            best_val: stage.best_val,
            checksum: stage.model.checksum(),
        });
    }
    Ok(runs)
}

/// Trains every repeat of an experiment.
pub fn cmd_train(config: &ExperimentConfig) -> Result<Vec<TrainedRun>> {
    config.validate()?;
    match config.precision() {
        Precision::F32 => train_typed::<f32>(config),
        Precision::F64 => train_typed::<f64>(config),
    }
}

fn eval_typed<T: Real>(config: &ExperimentConfig) -> Result<Vec<ReportFile>> {
    let learner = config.learner()?;
    let checkpoints = (0..config.repeats)
        .map(|r| {
            let path = run_dir(config, r).join(CHECKPOINT_FILE);
            if path.is_file() {
                Ok(path)
            } else {
                Err(HarnessError::Missing(format!(
                    "no checkpoint at {}; run `train` with this config first",
                    path.display()
                )))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let data = load_all::<T>(config)?;
    let spec = config.scenario_spec(data.general.as_ref(), &data.target)?;
    let mut reports = Vec::with_capacity(config.repeats);
    for (r, path) in checkpoints.iter().enumerate() {
        let model: Trained<T> = load_trained(path)?;
        if model.learner() != learner {
            return Err(HarnessError::Checkpoint {
                path: path.clone(),
                message: format!(
                    "trained with `{}`, config says `{}`",
                    model.learner().key(),
                    learner.key()
                ),
            });
        }
        let seed = repeat_seed(config.seed, r);
        let target = target_data(&spec, seed)?;
        let meta = ReportMeta {
            method: learner.key().to_string(),
            scenario: spec.kind.key().to_string(),
            dataset: config.target.name.clone(),
            repeat: r,
            seed,
        };
        let report = parallel_meta_test(
            &model,
            &target,
            spec.test_tasks,
            &spec.eval_episode,
            test_seed(seed),
            meta,
        )?;
        let file = ReportFile::new(&report, config.seed);
        file.save(&run_dir(config, r).join(REPORT_FILE))?;
        reports.push(file);
    }
    Ok(reports)
}

/// Meta-tests the checkpoint of every repeat and writes `report.json`.
pub fn cmd_eval(config: &ExperimentConfig) -> Result<Vec<ReportFile>> {
    config.validate()?;
    match config.precision() {
        Precision::F32 => eval_typed::<f32>(config),
        Precision::F64 => eval_typed::<f64>(config),
    }
}

/// Exports every synthetic dataset of the config to `<output_dir>/<name>`.
pub fn cmd_generate_data(config: &ExperimentConfig) -> Result<Vec<(PathBuf, Manifest)>> {
    config.validate()?;
    let mut out = Vec::new();
    for ds in config.datasets() {
        if let Some(s) = ds.source.synthetic() {
            let dir = config.output_dir.join(&ds.name);
            create_dir(&dir)?;
            let manifest = export_synthetic(&s, &ds.name, &dir)?;
            out.push((dir, manifest));
        }
    }
    if out.is_empty() {
        return Err(HarnessError::Config("no synthetic dataset in the config".into()));
    }
    Ok(out)
}
