//! Pre-trained classifier whose last layer is re-fitted on each task's support set.

use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::data::{EpisodeTensors, LabeledDataset, LabeledUnlabeledPartition, Phase, SplitSpec};
use crate::error::{Error, Result};
use crate::graph::{BatchNormConfig, Graph};
use crate::methods::{accuracy_of, pn_loss};
use crate::nn::{BnState, Conv4, Conv4Config, ForwardMode, Linear, ParamId, ParamStore};
use crate::optim::{collect_grads, sgd_step, Adam, AdamConfig};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineConfig {
    /// Pre-training mini-batches.
    pub batches: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplicative decay applied after every `decay_every` batches.
    pub decay: f64,
    pub decay_every: usize,
    /// Batches between validations on few-shot tasks (0 disables validation).
    pub validation_period: usize,
    pub validation_tasks: usize,
    pub finetune_iterations: usize,
    pub finetune_lr: f64,
    pub finetune_decay: f64,
    pub finetune_optimizer: FinetuneOptimizer,
}

/// Update rule of the per-task head fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FinetuneOptimizer {
    /// Plain gradient descent.
    #[default]
    Sgd,
    /// Adam with fresh moments for every task.
    Adam,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            batches: 400_000,
            batch_size: 64,
            lr: 1e-3,
            decay: 0.9,
            decay_every: 40_000,
            validation_period: 40_000,
            validation_tasks: 100,
            finetune_iterations: 10,
            finetune_lr: 0.01,
            finetune_decay: 0.5,
            finetune_optimizer: FinetuneOptimizer::Sgd,
        }
    }
}

impl BaselineConfig {
    /// Pre-training learning rate in effect for the given (0-based) batch.
    pub fn pretrain_lr(&self, batch: usize) -> f64 {
        let steps = batch / self.decay_every.max(1);
        self.lr * Float::powi(self.decay, steps as i32)
    }

    /// Fine-tuning learning rate of iteration `i`.
    pub fn finetune_lr(&self, i: usize) -> f64 {
        self.finetune_lr * Float::powi(self.finetune_decay, i as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::Config("batch_size and decay_every must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.finetune_lr >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// Softmax classifier over backbone embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<T> {
    pub store: ParamStore<T>,
    pub layer: Linear,
}

impl<T: Real> ClassifierHead<T> {
    pub fn new(inputs: usize, outputs: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = rng_from(seed, 0);
        let layer = Linear::init("head", inputs, outputs, &mut store, &mut rng);
        Self { store, layer }
    }

    pub fn logits(&self, embeddings: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.store.bind_frozen(&mut g);
        let x = g.constant(embeddings.clone());
        let y = self.layer.forward(&mut g, &bound, x)?;
        Ok(g.value(y).clone())
    }

    /// Row-wise class distributions.
    pub fn probabilities(&self, embeddings: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.store.bind_frozen(&mut g);
        let x = g.constant(embeddings.clone());
        let y = self.layer.forward(&mut g, &bound, x)?;
        let p = g.softmax(y)?;
        Ok(g.value(p).clone())
    }
}

/// Backbone plus a classification layer over the pre-training classes.
#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneModel<T> {
    config: BaselineConfig,
    bn_config: BatchNormConfig,
    store: ParamStore<T>,
    bn: BnState<T>,
    backbone: Conv4,
    /// Present once the model has been sized for a set of training classes.
    head: Option<Linear>,
}

/// One pre-training log entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainRow {
    pub batch: usize,
    pub loss: f64,
    pub val_acc: Option<f64>,
}

impl<T: Real> FineTuneModel<T> {
    pub fn new(backbone: Conv4Config, config: BaselineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(derive_seed(seed, "init", 0), 0);
        let mut store = ParamStore::new();
        let mut bn = BnState::new();
        let conv = Conv4::init(backbone, &mut store, &mut bn, &mut rng)?;
        Ok(Self {
            config,
            bn_config: BatchNormConfig::default(),
            store,
            bn,
            backbone: conv,
            head: None,
        })
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.config
    }

    /// Replaces the training schedule, e.g. when a checkpoint continues on new data.
    pub fn set_config(&mut self, config: BaselineConfig) {
        self.config = config;
    }

    pub fn backbone_config(&self) -> &Conv4Config {
        self.backbone.config()
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn bn_state(&self) -> &BnState<T> {
        &self.bn
    }

    /// Parameters of the backbone only (the pre-training head excluded).
    pub fn backbone_checksum(&self) -> u64 {
        let mut frozen = ParamStore::new();
        for (name, t) in self.store.iter().filter(|(n, _)| n.starts_with("backbone.")) {
            frozen.add(name, t.clone());
        }
        frozen.checksum()
    }

    /// Number of pre-training classes the head currently outputs.
    pub fn head_outputs(&self) -> Option<usize> {
        self.head.map(|h| h.outputs)
    }

    /// Makes sure a head with `classes` outputs exists, drawing a new one if not.
    pub fn ensure_head(&mut self, classes: usize, seed: u64) {
        let dim = self.backbone.config().embedding_dim();
        match self.head {
            Some(h) if h.outputs == classes => {}
            Some(h) => {
                // Resize in place: replace the tensors under the same ids.
                let mut rng = rng_from(seed, 0);
                let resized = Linear { outputs: classes, ..h };
                resized.reinit(&mut self.store, &mut rng);
                self.head = Some(resized);
            }
            None => {
                let mut rng = rng_from(seed, 0);
                self.head = Some(Linear::init("classifier", dim, classes, &mut self.store, &mut rng));
            }
        }
    }

    /// Replaces parameters and running statistics (same names and shapes required).
    pub fn load_state(&mut self, params: Vec<(alloc::string::String, Tensor<T>)>, bn: BnState<T>) -> Result<()> {
        let names: Vec<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
        if let (Some(w), None) = (names.iter().position(|n| *n == "classifier.weight"), self.head) {
            let outputs = params[w].1.shape()[0];
            self.ensure_head(outputs, 0);
        }
        if params.len() != self.store.len() || bn.len() != self.bn.len() {
            return Err(Error::Checkpoint("parameter count mismatch".into()));
        }
        for ((name, value), (have, current)) in params.iter().zip(self.store.iter()) {
            if name != have || value.shape() != current.shape() {
                return Err(Error::Checkpoint(alloc::format!(
                    "tensor `{name}` does not match `{have}`"
                )));
            }
        }
        for (slot, (_, value)) in self.store.tensors_mut().iter_mut().zip(params) {
            *slot = value;
        }
        self.bn = bn;
        Ok(())
    }

    /// Embeddings `[B, M]` with the backbone frozen in evaluation mode.
    pub fn embed(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.store.bind_frozen(&mut g);
        let x = g.constant(images.clone());
        let mut bn = self.bn.clone();
        let e = self
            .backbone
            .embed(&mut g, &bound, &mut bn, x, ForwardMode::EVAL, self.bn_config)?;
        Ok(g.value(e).clone())
    }

    fn train_batch(&mut self, adam: &mut Adam<T>, images: Tensor<T>, labels: &[usize], lr: f64) -> Result<f64> {
        let head = self
            .head
            .ok_or_else(|| Error::Config("classifier head missing".into()))?;
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g);
        let x = g.constant(images);
        let e = self
            .backbone
            .embed(&mut g, &bound, &mut self.bn, x, ForwardMode::TRAIN, self.bn_config)?;
        let logits = head.forward(&mut g, &bound, e)?;
        let loss = pn_loss(&mut g, logits, labels)?;
        let value = g.value(loss).item().as_f64();
        g.backward(loss)?;
        let grads = collect_grads(&g, &bound);
        adam.set_lr(lr);
        adam.step(&mut self.store, &grads);
        Ok(value)
    }
}

/// Fits a freshly initialized `ways`-output head on fixed support embeddings
/// by full-batch gradient descent; the backbone is never touched.
pub fn finetune_last_layer<T: Real>(
    model: &FineTuneModel<T>,
    support_embeddings: &Tensor<T>,
    labels: &[usize],
    ways: usize,
    head_seed: u64,
) -> Result<ClassifierHead<T>> {
    if labels.is_empty() {
        return Err(Error::Config("fine-tuning needs a non-empty support set".into()));
    }
    let mut head = ClassifierHead::new(support_embeddings.shape()[1], ways, head_seed);
    let ids: Vec<ParamId> = [head.layer.weight, head.layer.bias].to_vec();
    let mut adam = match model.config.finetune_optimizer {
        FinetuneOptimizer::Sgd => None,
        FinetuneOptimizer::Adam => Some(Adam::new(&head.store, AdamConfig::default())),
    };
    for i in 0..model.config.finetune_iterations {
        let mut g = Graph::new();
        let bound = head.store.bind(&mut g);
        let x = g.constant(support_embeddings.clone());
        let logits = head.layer.forward(&mut g, &bound, x)?;
        let loss = pn_loss(&mut g, logits, labels)?;
        g.backward(loss)?;
        let grads = collect_grads(&g, &bound);
        let lr = model.config.finetune_lr(i);
        match adam.as_mut() {
            Some(adam) => {
                adam.set_lr(lr);
                adam.step(&mut head.store, &grads);
            }
            None => sgd_step(&mut head.store, &ids, &grads, lr),
        }
    }
    Ok(head)
}

/// Accuracy on the targets after fine-tuning a new head on the support set.
pub fn evaluate_finetuned<T: Real>(model: &FineTuneModel<T>, ep: &EpisodeTensors<T>, head_seed: u64) -> Result<f64> {
    let support = model.embed(&ep.support)?;
    let head = finetune_last_layer(model, &support, &ep.support_labels, ep.ways, head_seed)?;
    let target = model.embed(&ep.target)?;
    let logits = head.logits(&target)?;
    Ok(accuracy_of(&logits, &ep.target_labels))
}

/// Pre-training outcome: the best backbone by few-shot validation accuracy.
#[derive(Debug, Clone)]
pub struct PretrainOutcome<T> {
    pub best: FineTuneModel<T>,
    pub best_val: Option<f64>,
    pub log: Vec<PretrainRow>,
}

/// Cross-entropy training over the train-phase classes of `split`, with
/// periodic few-shot validation via `validate` (which receives the current
/// model and returns its mean validation accuracy).
pub fn pretrain_classifier<T, V>(
    mut model: FineTuneModel<T>,
    dataset: &LabeledDataset<T>,
    partition: &LabeledUnlabeledPartition,
    split: &SplitSpec,
    adam_config: AdamConfig,
    seed: u64,
    mut validate: V,
) -> Result<PretrainOutcome<T>>
where
    T: Real,
    V: FnMut(&FineTuneModel<T>) -> Result<f64>,
{
    let classes = split.classes(Phase::Train);
    if classes.len() < 2 {
        return Err(Error::InsufficientClasses {
            needed: 2,
            available: classes.len(),
        });
    }
    let pool: Vec<(usize, usize)> = classes
        .iter()
        .enumerate()
        .flat_map(|(label, &c)| partition.labeled(c).iter().map(move |&i| (i, label)))
        .collect();
    model.ensure_head(classes.len(), derive_seed(seed, "head", 0));
    let cfg = model.config;
    let mut adam = Adam::new(&model.store, adam_config);
    let mut rng = rng_from(derive_seed(seed, "batches", 0), 0);
    let mut log = Vec::with_capacity(cfg.batches);
    let mut best: Option<(f64, FineTuneModel<T>)> = None;
    for batch in 0..cfg.batches {
        let picks: Vec<(usize, usize)> = (0..cfg.batch_size)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect();
        let indices: Vec<usize> = picks.iter().map(|p| p.0).collect();
        let labels: Vec<usize> = picks.iter().map(|p| p.1).collect();
        let loss = model.train_batch(&mut adam, dataset.gather(&indices), &labels, cfg.pretrain_lr(batch))?;
        let mut val_acc = None;
        if cfg.validation_period > 0 && (batch + 1) % cfg.validation_period == 0 {
            let acc = validate(&model)?;
            val_acc = Some(acc);
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, model.clone()));
            }
        }
        log.push(PretrainRow { batch, loss, val_acc });
    }
    Ok(match best {
        Some((acc, m)) => PretrainOutcome {
            best: m,
            best_val: Some(acc),
            log,
        },
        None => PretrainOutcome {
            best: model,
            best_val: None,
            log,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        let cfg = BaselineConfig::default();
        assert_eq!(cfg.pretrain_lr(0), 1e-3);
        assert!((cfg.pretrain_lr(40_000) - 9e-4).abs() < 1e-15);
        assert!((cfg.pretrain_lr(39_999) - 1e-3).abs() < 1e-15);
        assert!((cfg.finetune_lr(3) - 0.00125).abs() < 1e-15);
    }

    #[test]
    fn head_rows_are_distributions() {
        let head = ClassifierHead::<f64>::new(4, 5, 3);
        let x = Tensor::from_fn(&[2, 4], |i| i as f64 * 0.1);
        let p = head.probabilities(&x).unwrap();
        for row in p.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_fits_separable_support() {
        let backbone = Conv4Config {
            blocks: 2,
            filters: 4,
            input_size: 16,
            in_channels: 1,
            ..Conv4Config::default()
        };
        let labels: Vec<usize> = (0..15).map(|i| i % 5).collect();
        let x = Tensor::from_fn(&[15, 60], |i| if i % 5 == labels[i / 60] { 1.0 } else { 0.0 });
        let fit = |opt| {
            let config = BaselineConfig {
                finetune_optimizer: opt,
                finetune_decay: 1.0,
                ..BaselineConfig::default()
            };
            let model = FineTuneModel::<f64>::new(backbone, config, 1).unwrap();
            let head = finetune_last_layer(&model, &x, &labels, 5, 9).unwrap();
            accuracy_of(&head.logits(&x).unwrap(), &labels)
        };
        assert_eq!(fit(FinetuneOptimizer::Adam), 1.0);
    }
}
