//! Experiment configuration: one TOML document per experiment.

use std::path::{Path, PathBuf};

use fsl_core::baseline::{BaselineConfig, FinetuneOptimizer};
use fsl_core::data::{EpisodeSpec, LabeledDataset, DEFAULT_MIN_CLASS_SIZE};
use fsl_core::graph::BatchNormConfig;
use fsl_core::meta::{DataSource, Learner, ScenarioKind, ScenarioSpec, SplitSizes, TrainBudget};
use fsl_core::methods::{CpnConfig, MethodConfig};
use fsl_core::nn::Conv4Config;
use fsl_core::optim::AdamConfig;
use fsl_core::synthetic::SyntheticConfig;
use fsl_core::{Precision, Real};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "defaults::method")]
    pub method: String,
    #[serde(default = "defaults::scenario")]
    pub scenario: String,
    #[serde(default)]
    pub precision: PrecisionKey,
    #[serde(default = "defaults::output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::repeats")]
    pub repeats: usize,
    #[serde(default = "defaults::test_tasks")]
    pub test_tasks: usize,
    #[serde(default = "defaults::min_class_size")]
    pub min_class_size: usize,
    #[serde(default)]
    pub general: Option<DatasetConfig>,
    #[serde(default)]
    pub target: DatasetConfig,
    #[serde(default)]
    pub episodes: EpisodesConfig,
    #[serde(default)]
    pub budget: BudgetsConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub methods: MethodsConfig,
    #[serde(default)]
    pub baseline: BaselineSection,
}

mod defaults {
    use std::path::PathBuf;

    pub fn method() -> String {
        "pn".into()
    }
    pub fn scenario() -> String {
        "target-only".into()
    }
    pub fn output_dir() -> PathBuf {
        PathBuf::from("runs")
    }
    pub fn repeats() -> usize {
        10
    }
    pub fn test_tasks() -> usize {
        1000
    }
    pub fn min_class_size() -> usize {
        super::DEFAULT_MIN_CLASS_SIZE
    }
    pub fn labeled_fraction() -> f64 {
        0.4
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty document uses defaults")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionKey {
    #[default]
    F32,
    F64,
}

impl From<PrecisionKey> for Precision {
    fn from(p: PrecisionKey) -> Self {
        match p {
            PrecisionKey::F32 => Precision::F32,
            PrecisionKey::F64 => Precision::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default = "DatasetConfig::default_name")]
    pub name: String,
    #[serde(default)]
    pub source: SourceConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default = "defaults::labeled_fraction")]
    pub labeled_fraction: f64,
}

impl DatasetConfig {
    fn default_name() -> String {
        "target".into()
    }
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            name: Self::default_name(),
            source: SourceConfig::default(),
            split: SplitConfig::default(),
            labeled_fraction: defaults::labeled_fraction(),
        }
    }
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SourceConfig {
    Synthetic {
        #[serde(default = "SynthDefaults::n_classes")]
        n_classes: usize,
        #[serde(default = "SynthDefaults::per_class")]
        per_class: usize,
        #[serde(default = "SynthDefaults::image_size")]
        image_size: usize,
        #[serde(default = "SynthDefaults::channels")]
        channels: usize,
        #[serde(default = "SynthDefaults::noise_level")]
        noise_level: f64,
        #[serde(default)]
        seed: u64,
    },
    /// `<path>/<class>/<image>` tree; images are resized to `image_size`.
    Directory {
        path: PathBuf,
        #[serde(default = "SynthDefaults::image_size")]
        image_size: usize,
        #[serde(default = "SynthDefaults::channels")]
        channels: usize,
    },
}

struct SynthDefaults;

impl SynthDefaults {
    fn base() -> SyntheticConfig {
        SyntheticConfig::default()
    }
    fn n_classes() -> usize {
        Self::base().n_classes
    }
    fn per_class() -> usize {
        Self::base().per_class
    }
    fn image_size() -> usize {
        Self::base().image_size
    }
    fn channels() -> usize {
        Self::base().channels
    }
    fn noise_level() -> f64 {
        Self::base().noise_level
    }
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig::from_synthetic(&SyntheticConfig::default())
    }
}

impl SourceConfig {
    pub fn from_synthetic(c: &SyntheticConfig) -> Self {
        SourceConfig::Synthetic {
            n_classes: c.n_classes,
            per_class: c.per_class,
            image_size: c.image_size,
            channels: c.channels,
            noise_level: c.noise_level,
            seed: c.seed,
        }
    }

    pub fn synthetic(&self) -> Option<SyntheticConfig> {
        match *self {
            SourceConfig::Synthetic {
                n_classes,
                per_class,
                image_size,
                channels,
                noise_level,
                seed,
            } => Some(SyntheticConfig {
                n_classes,
                per_class,
                image_size,
                channels,
                noise_level,
                seed,
            }),
            SourceConfig::Directory { .. } => None,
        }
    }

    pub fn image_size(&self) -> usize {
        match self {
            SourceConfig::Synthetic { image_size, .. } | SourceConfig::Directory { image_size, .. } => *image_size,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            SourceConfig::Synthetic { channels, .. } | SourceConfig::Directory { channels, .. } => *channels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 8,
            val: 5,
            test: 5,
        }
    }
}

impl From<SplitConfig> for SplitSizes {
    fn from(s: SplitConfig) -> Self {
        SplitSizes {
            train: s.train,
            val: s.val,
            test: s.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub shots: usize,
    pub ways: usize,
    pub targets: usize,
    pub unlabeled: usize,
    pub distractors: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            unlabeled: 5,
            ..EpisodeConfig::from(EpisodeSpec::default())
        }
    }
}

impl From<EpisodeSpec> for EpisodeConfig {
    fn from(e: EpisodeSpec) -> Self {
        Self {
            shots: e.shots,
            ways: e.ways,
            targets: e.targets,
            unlabeled: e.unlabeled,
            distractors: e.distractors,
        }
    }
}

impl From<EpisodeConfig> for EpisodeSpec {
    fn from(e: EpisodeConfig) -> Self {
        EpisodeSpec {
            shots: e.shots,
            ways: e.ways,
            targets: e.targets,
            unlabeled: e.unlabeled,
            distractors: e.distractors,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodesConfig {
    pub general_train: EpisodeConfig,
    pub target_train: EpisodeConfig,
    /// Validation and meta-test episodes.
    pub eval: EpisodeConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetConfig {
    pub total_tasks: usize,
    pub validation_period: usize,
    pub validation_tasks: usize,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        let b = TrainBudget::default();
        Self {
            total_tasks: b.total_tasks,
            validation_period: b.validation_period,
            validation_tasks: b.validation_tasks,
        }
    }
}

impl From<BudgetConfig> for TrainBudget {
    fn from(b: BudgetConfig) -> Self {
        TrainBudget {
            total_tasks: b.total_tasks,
            validation_period: b.validation_period,
            validation_tasks: b.validation_tasks,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetsConfig {
    pub general: BudgetConfig,
    pub target: BudgetConfig,
}

/// Backbone geometry; input size and channels come from the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub blocks: usize,
    pub filters: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let c = Conv4Config::default();
        Self {
            blocks: c.blocks,
            filters: c.filters,
            kernel: c.kernel,
            padding: c.padding,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CpnSection {
    pub epsilon: f64,
    pub xi: f64,
    pub power_iterations: usize,
    pub walk_length: usize,
    pub temperature: f64,
    pub ssl_weight: f64,
}

impl Default for CpnSection {
    fn default() -> Self {
        let c = CpnConfig::default();
        Self {
            epsilon: c.epsilon,
            xi: c.xi,
            power_iterations: c.power_iterations,
            walk_length: c.walk_length,
            temperature: c.temperature,
            ssl_weight: c.ssl_weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodsConfig {
    pub refine_iterations: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub cpn: CpnSection,
}

impl Default for MethodsConfig {
    fn default() -> Self {
        let m = MethodConfig::default();
        Self {
            refine_iterations: m.refine_iterations,
            bn_eps: m.bn.eps,
            bn_momentum: m.bn.momentum,
            cpn: CpnSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub batches: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub validation_period: usize,
    pub validation_tasks: usize,
    pub finetune_iterations: usize,
    pub finetune_lr: f64,
    pub finetune_decay: f64,
    pub finetune_optimizer: FinetuneOptimizerKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneOptimizerKey {
    #[default]
    Sgd,
    Adam,
}

impl From<FinetuneOptimizer> for FinetuneOptimizerKey {
    fn from(o: FinetuneOptimizer) -> Self {
        match o {
            FinetuneOptimizer::Sgd => Self::Sgd,
            FinetuneOptimizer::Adam => Self::Adam,
        }
    }
}

impl From<FinetuneOptimizerKey> for FinetuneOptimizer {
    fn from(o: FinetuneOptimizerKey) -> Self {
        match o {
            FinetuneOptimizerKey::Sgd => Self::Sgd,
            FinetuneOptimizerKey::Adam => Self::Adam,
        }
    }
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineConfig::default().into()
    }
}

impl From<BaselineConfig> for BaselineSection {
    fn from(b: BaselineConfig) -> Self {
        Self {
            batches: b.batches,
            batch_size: b.batch_size,
            lr: b.lr,
            decay: b.decay,
            decay_every: b.decay_every,
            validation_period: b.validation_period,
            validation_tasks: b.validation_tasks,
            finetune_iterations: b.finetune_iterations,
            finetune_lr: b.finetune_lr,
            finetune_decay: b.finetune_decay,
            finetune_optimizer: b.finetune_optimizer.into(),
        }
    }
}

impl From<BaselineSection> for BaselineConfig {
    fn from(b: BaselineSection) -> Self {
        BaselineConfig {
            batches: b.batches,
            batch_size: b.batch_size,
            lr: b.lr,
            decay: b.decay,
            decay_every: b.decay_every,
            validation_period: b.validation_period,
            validation_tasks: b.validation_tasks,
            finetune_iterations: b.finetune_iterations,
            finetune_lr: b.finetune_lr,
            finetune_decay: b.finetune_decay,
            finetune_optimizer: b.finetune_optimizer.into(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| invalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(m) => invalid(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn learner(&self) -> Result<Learner> {
        Learner::from_key(&self.method).ok_or_else(|| {
            invalid(format!(
                "unknown method `{}` (expected pn, rn, skm, skm-cluster, skm-mask, cpn, cpn-skm or convnet-ft)",
                self.method
            ))
        })
    }

    pub fn scenario_kind(&self) -> Result<ScenarioKind> {
        ScenarioKind::from_key(&self.scenario).ok_or_else(|| {
            invalid(format!(
                "unknown scenario `{}` (expected general-only, target-only or general-then-target)",
                self.scenario
            ))
        })
    }

    pub fn precision(&self) -> Precision {
        self.precision.into()
    }

    pub fn backbone_for(&self, image_size: usize, channels: usize) -> Conv4Config {
        Conv4Config {
            blocks: self.backbone.blocks,
            filters: self.backbone.filters,
            kernel: self.backbone.kernel,
            padding: self.backbone.padding,
            input_size: image_size,
            in_channels: channels,
        }
    }

    pub fn method_config(&self) -> MethodConfig {
        let c = self.methods.cpn;
        MethodConfig {
            refine_iterations: self.methods.refine_iterations,
            cpn: CpnConfig {
                epsilon: c.epsilon,
                xi: c.xi,
                power_iterations: c.power_iterations,
                walk_length: c.walk_length,
                temperature: c.temperature,
                ssl_weight: c.ssl_weight,
            },
            bn: BatchNormConfig {
                eps: self.methods.bn_eps,
                momentum: self.methods.bn_momentum,
            },
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.optimizer.lr,
            beta1: self.optimizer.beta1,
            beta2: self.optimizer.beta2,
            eps: self.optimizer.eps,
        }
    }

    /// Every dataset the scenario reads, general first.
    pub fn datasets(&self) -> Vec<&DatasetConfig> {
        self.general.iter().chain(std::iter::once(&self.target)).collect()
    }

    /// Checks everything that can be checked without touching the disk.
    pub fn validate(&self) -> Result<()> {
        let learner = self.learner()?;
        let kind = self.scenario_kind()?;
        if kind != ScenarioKind::TargetOnly && self.general.is_none() {
            return Err(invalid(format!(
                "scenario `{}` needs a [general] dataset",
                self.scenario
            )));
        }
        if self.repeats == 0 || self.test_tasks == 0 {
            return Err(invalid("repeats and test_tasks must be positive"));
        }
        if let Some(g) = &self.general {
            if (g.source.image_size(), g.source.channels())
                != (self.target.source.image_size(), self.target.source.channels())
            {
                return Err(invalid(
                    "general and target datasets must share image size and channels",
                ));
            }
            if g.name == self.target.name {
                return Err(invalid("general and target datasets need different names"));
            }
        }
        let backbone = self.backbone_for(self.target.source.image_size(), self.target.source.channels());
        backbone.validate()?;
        let eval: EpisodeSpec = self.episodes.eval.into();
        eval.validate()?;
        let stages: Vec<(&DatasetConfig, EpisodeConfig, BudgetConfig)> = match kind {
            ScenarioKind::GeneralOnly => vec![(
                self.general.as_ref().unwrap(),
                self.episodes.general_train,
                self.budget.general,
            )],
            ScenarioKind::TargetOnly => vec![(&self.target, self.episodes.target_train, self.budget.target)],
            ScenarioKind::GeneralThenTarget => vec![
                (
                    self.general.as_ref().unwrap(),
                    self.episodes.general_train,
                    self.budget.general,
                ),
                (&self.target, self.episodes.target_train, self.budget.target),
            ],
        };
        for (ds, episode, budget) in &stages {
            let spec: EpisodeSpec = (*episode).into();
            spec.validate()?;
            if matches!(learner, Learner::FewShot(_)) {
                TrainBudget::from(*budget).validate()?;
            }
            let needed = spec.ways + spec.distractors;
            if ds.split.train < needed {
                return Err(invalid(format!(
                    "dataset `{}`: {} training classes cannot fill {}-way episodes with {} distractor classes",
                    ds.name, ds.split.train, spec.ways, spec.distractors
                )));
            }
        }
        for ds in self.datasets() {
            if !(ds.labeled_fraction > 0.0 && ds.labeled_fraction <= 1.0) {
                return Err(invalid(format!(
                    "dataset `{}`: labeled_fraction must be in (0, 1]",
                    ds.name
                )));
            }
            if let Some(s) = ds.source.synthetic() {
                s.validate()?;
                let needed = ds.split.train + ds.split.val + ds.split.test;
                if needed > s.n_classes {
                    return Err(invalid(format!(
                        "dataset `{}`: split needs {} classes but only {} are generated",
                        ds.name, needed, s.n_classes
                    )));
                }
            }
            let needed = eval.ways + eval.distractors;
            if ds.split.val < needed || ds.split.test < needed {
                return Err(invalid(format!(
                    "dataset `{}`: validation and test splits need at least {} classes each",
                    ds.name, needed
                )));
            }
        }
        if learner == Learner::FineTune {
            BaselineConfig::from(self.baseline).validate()?;
        }
        let c = self.methods.cpn;
        if !(c.temperature > 0.0 && c.epsilon >= 0.0 && c.xi > 0.0) {
            return Err(invalid(
                "cpn: temperature and xi must be positive, epsilon non-negative",
            ));
        }
        Ok(())
    }

    /// Core scenario description over loaded datasets.
    pub fn scenario_spec<'a, T: Real>(
        &'a self,
        general: Option<&'a LabeledDataset<T>>,
        target: &'a LabeledDataset<T>,
    ) -> Result<ScenarioSpec<'a, T>> {
        let [c, h, _] = target.image_shape();
        let source = |cfg: &'a DatasetConfig, dataset: &'a LabeledDataset<T>| DataSource {
            name: cfg.name.as_str(),
            dataset,
            sizes: cfg.split.into(),
            labeled_fraction: cfg.labeled_fraction,
        };
        let general = match (&self.general, general) {
            (Some(cfg), Some(ds)) => {
                if ds.image_shape() != target.image_shape() {
                    return Err(invalid("general and target images differ in shape"));
                }
                Some(source(cfg, ds))
            }
            (None, Some(_)) => return Err(invalid("general dataset given without a [general] section")),
            (_, None) => None,
        };
        Ok(ScenarioSpec {
            kind: self.scenario_kind()?,
            general,
            target: source(&self.target, target),
            general_budget: self.budget.general.into(),
            target_budget: self.budget.target.into(),
            general_episode: self.episodes.general_train.into(),
            target_episode: self.episodes.target_train.into(),
            eval_episode: self.episodes.eval.into(),
            test_tasks: self.test_tasks,
            backbone: self.backbone_for(h, c),
            method: self.method_config(),
            baseline: self.baseline.into(),
            optimizer: self.adam(),
            min_class_size: self.min_class_size,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_protocol_constants() {
        let c = ExperimentConfig::default();
        assert_eq!(c.target.source.image_size(), 84);
        assert_eq!(c.episodes.eval.shots, 5);
        assert_eq!(c.episodes.eval.ways, 5);
        assert_eq!(c.test_tasks, 1000);
        assert_eq!(c.target.labeled_fraction, 0.4);
        assert_eq!(c.repeats, 10);
        assert_eq!(c.baseline.lr, 1e-3);
        assert_eq!(c.baseline.finetune_lr, 0.01);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("methd = \"pn\"").is_err());
        assert!(ExperimentConfig::from_toml("[backbone]\nfilter = 3").is_err());
        assert!(ExperimentConfig::from_toml("[target.source]\nkind = \"synthetic\"\nsize = 3").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = ExperimentConfig {
            method: "skm-mask".into(),
            general: Some(DatasetConfig {
                name: "general".into(),
                ..Default::default()
            }),
            ..Default::default()
        };
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn scenario_needs_general_dataset() {
        let c = ExperimentConfig::from_toml("scenario = \"general-then-target\"").unwrap();
        assert!(c.validate().is_err());
        let c = ExperimentConfig::from_toml("method = \"maml\"").unwrap();
        assert!(c.validate().is_err());
    }
}
