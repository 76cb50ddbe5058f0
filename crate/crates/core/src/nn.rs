//! Parameter storage and the network building blocks: the Conv-4 embedding
//! backbone, the relation module, the mask statistics network and plain
//! linear heads.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{BatchNormConfig, BnMode, Graph, RunningStats, Var};
use crate::tensor::{Real, Tensor};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the store, which is also the position in a [`Bound`].
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Puts every parameter on the tape as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }

    /// Puts every parameter on the tape as a constant.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.constant(t.clone())).collect())
    }

    /// Order-sensitive checksum of all values, for freeze checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for &v in t.data() {
                h ^= v.as_f64().to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Tape handles of a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Uniform initialization in `±bound`.
pub fn uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..=bound)))
}

/// Conv-4 backbone geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv4Config {
    pub blocks: usize,
    pub filters: usize,
    pub kernel: usize,
    pub padding: usize,
    pub input_size: usize,
    pub in_channels: usize,
}

impl Default for Conv4Config {
    fn default() -> Self {
        Self {
            blocks: 4,
            filters: 64,
            kernel: 3,
            padding: 0,
            input_size: 84,
            in_channels: 3,
        }
    }
}

impl Conv4Config {
    /// Spatial extent after each block: conv then 2×2 floor pooling.
    pub fn spatial_trace(&self) -> Vec<usize> {
        let mut trace = vec![self.input_size];
        let mut s = self.input_size as isize;
        for _ in 0..self.blocks {
            s = (s + 2 * self.padding as isize - self.kernel as isize + 1).max(0) / 2;
            trace.push(s as usize);
        }
        trace
    }

    pub fn final_spatial(&self) -> usize {
        *self.spatial_trace().last().unwrap_or(&0)
    }

    /// Flattened embedding width `M = filters · s²`.
    pub fn embedding_dim(&self) -> usize {
        let s = self.final_spatial();
        self.filters * s * s
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::Config(format!(
                "in_channels must be 1 or 3, got {}",
                self.in_channels
            )));
        }
        if self.blocks == 0 || self.filters == 0 || self.kernel == 0 {
            return Err(Error::Config("blocks, filters and kernel must be positive".into()));
        }
        // Every conv must see at least a kernel-sized input and every pool a 2×2 map.
        let trace = self.spatial_trace();
        for (i, w) in trace.windows(2).enumerate() {
            if w[0] + 2 * self.padding < self.kernel || w[1] == 0 {
                return Err(Error::Config(format!(
                    "input size {} collapses to zero at block {} (trace {:?})",
                    self.input_size,
                    i + 1,
                    trace
                )));
            }
        }
        Ok(())
    }
}

/// Smallest admissible input size for a configuration (everything else fixed).
pub fn min_input_size(config: &Conv4Config) -> usize {
    (1..)
        .find(|&s| {
            Conv4Config {
                input_size: s,
                ..*config
            }
            .validate()
            .is_ok()
        })
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvBlock {
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    bn_slot: usize,
}

/// Batch-norm running estimates for every block of a network.
pub type BnState<T> = Vec<RunningStats<T>>;

fn push_block<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    bn: &mut BnState<T>,
    prefix: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    rng: &mut R,
) -> ConvBlock {
    let fan_in = (in_ch * kernel * kernel) as f64;
    let weight = store.add(
        format!("{prefix}.conv.weight"),
        uniform(&[out_ch, in_ch, kernel, kernel], Float::sqrt(6.0 / fan_in), rng),
    );
    let gamma = store.add(format!("{prefix}.bn.gamma"), Tensor::ones(&[out_ch]));
    let beta = store.add(format!("{prefix}.bn.beta"), Tensor::zeros(&[out_ch]));
    bn.push(RunningStats::new(out_ch));
    ConvBlock {
        weight,
        gamma,
        beta,
        bn_slot: bn.len() - 1,
    }
}

/// How a forward pass treats batch-norm layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardMode {
    pub bn: BnMode,
    /// Keep the running-statistics update of this pass (train mode only).
    pub update_stats: bool,
}

impl ForwardMode {
    pub const TRAIN: Self = Self {
        bn: BnMode::Train,
        update_stats: true,
    };
    /// Batch statistics without touching the running estimates.
    pub const TRAIN_NO_UPDATE: Self = Self {
        bn: BnMode::Train,
        update_stats: false,
    };
    pub const EVAL: Self = Self {
        bn: BnMode::Eval,
        update_stats: false,
    };
}

#[allow(clippy::too_many_arguments)]
fn run_block<T: Real>(
    g: &mut Graph<T>,
    bound: &Bound,
    block: &ConvBlock,
    x: Var,
    padding: usize,
    pool: bool,
    bn: &mut BnState<T>,
    mode: ForwardMode,
    bn_config: BatchNormConfig,
) -> Result<Var> {
    let y = g.conv2d(x, bound.var(block.weight), padding)?;
    let (y, updated) = g.batch_norm(
        y,
        bound.var(block.gamma),
        bound.var(block.beta),
        &bn[block.bn_slot],
        mode.bn,
        bn_config,
    )?;
    if let (Some(stats), true) = (updated, mode.update_stats) {
        bn[block.bn_slot] = stats;
    }
    let y = g.relu(y);
    if pool {
        g.max_pool2x2(y)
    } else {
        Ok(y)
    }
}

/// The embedding network `f`: `blocks × [conv → batch norm → ReLU → 2×2 max-pool]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv4 {
    config: Conv4Config,
    blocks: Vec<ConvBlock>,
}

impl Conv4 {
    /// Registers freshly initialized backbone parameters in `store`.
    pub fn init<T: Real, R: Rng + ?Sized>(
        config: Conv4Config,
        store: &mut ParamStore<T>,
        bn: &mut BnState<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.blocks);
        let mut in_ch = config.in_channels;
        for i in 0..config.blocks {
            blocks.push(push_block(
                store,
                bn,
                &format!("backbone.block{i}"),
                in_ch,
                config.filters,
                config.kernel,
                rng,
            ));
            in_ch = config.filters;
        }
        Ok(Self { config, blocks })
    }

    pub fn config(&self) -> &Conv4Config {
        &self.config
    }

    /// Final feature maps `[B, F, s, s]`.
    #[allow(clippy::too_many_arguments)]
    pub fn feature_maps<T: Real>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        bn: &mut BnState<T>,
        images: Var,
        mode: ForwardMode,
        bn_config: BatchNormConfig,
    ) -> Result<Var> {
        let s = g.shape(images).to_vec();
        let expected = [self.config.in_channels, self.config.input_size, self.config.input_size];
        if s.len() != 4 || s[1..] != expected {
            return Err(shape_err(
                "embed",
                format!(
                    "expected [B, {}, {}, {}], got {:?}",
                    expected[0], expected[1], expected[2], s
                ),
            ));
        }
        let mut x = images;
        for block in &self.blocks {
            x = run_block(g, bound, block, x, self.config.padding, true, bn, mode, bn_config)?;
        }
        Ok(x)
    }

    /// Flattened embeddings `[B, M]`.
    pub fn embed<T: Real>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        bn: &mut BnState<T>,
        images: Var,
        mode: ForwardMode,
        bn_config: BatchNormConfig,
    ) -> Result<Var> {
        let maps = self.feature_maps(g, bound, bn, images, mode, bn_config)?;
        g.flatten(maps)
    }
}

/// Relation module geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelationConfig {
    pub conv_blocks: usize,
    /// Channels of each backbone feature map; pairs carry twice as many.
    pub feature_channels: usize,
    pub hidden_channels: usize,
    /// Spatial extent of the backbone feature maps.
    pub feature_size: usize,
}

impl RelationConfig {
    pub fn for_backbone(backbone: &Conv4Config) -> Self {
        Self {
            conv_blocks: 2,
            feature_channels: backbone.filters,
            hidden_channels: backbone.filters,
            feature_size: backbone.final_spatial(),
        }
    }

    /// Spatial extent after each relation block: same-padded conv, then a
    /// 2×2 pool whenever the map is at least 2×2.
    pub fn spatial_trace(&self) -> Vec<usize> {
        let mut trace = vec![self.feature_size];
        let mut s = self.feature_size;
        for _ in 0..self.conv_blocks {
            if s >= 2 {
                s /= 2;
            }
            trace.push(s);
        }
        trace
    }
}

/// The relation module `g`: scores a channel-concatenated
/// (prototype, target) feature-map pair in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationModule {
    config: RelationConfig,
    blocks: Vec<ConvBlock>,
    fc_weight: ParamId,
    fc_bias: ParamId,
}

impl RelationModule {
    pub fn init<T: Real, R: Rng + ?Sized>(
        config: RelationConfig,
        store: &mut ParamStore<T>,
        bn: &mut BnState<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if config.feature_size == 0 || config.conv_blocks == 0 {
            return Err(Error::Config("relation module needs non-empty feature maps".into()));
        }
        let mut blocks = Vec::new();
        let mut in_ch = 2 * config.feature_channels;
        for i in 0..config.conv_blocks {
            blocks.push(push_block(
                store,
                bn,
                &format!("relation.block{i}"),
                in_ch,
                config.hidden_channels,
                3,
                rng,
            ));
            in_ch = config.hidden_channels;
        }
        let s = *config.spatial_trace().last().unwrap_or(&1);
        let fan_in = config.hidden_channels * s * s;
        let bound = 1.0 / Float::sqrt(fan_in as f64);
        let fc_weight = store.add("relation.fc.weight", uniform(&[1, fan_in], bound, rng));
        let fc_bias = store.add("relation.fc.bias", uniform(&[1], bound, rng));
        Ok(Self {
            config,
            blocks,
            fc_weight,
            fc_bias,
        })
    }

    pub fn config(&self) -> &RelationConfig {
        &self.config
    }

    /// Scores `[P]` for pairs `[P, 2F, s, s]` whose first `F` channels are the
    /// prototype map and last `F` the target map.
    pub fn score_pairs<T: Real>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        bn: &mut BnState<T>,
        pairs: Var,
        mode: ForwardMode,
        bn_config: BatchNormConfig,
    ) -> Result<Var> {
        let s = g.shape(pairs).to_vec();
        if s.len() != 4 || s[1] != 2 * self.config.feature_channels {
            return Err(shape_err(
                "relation_score_pairs",
                format!("expected [P, {}, H, W], got {:?}", 2 * self.config.feature_channels, s),
            ));
        }
        let mut x = pairs;
        for block in &self.blocks {
            let pool = g.shape(x)[2] >= 2 && g.shape(x)[3] >= 2;
            x = run_block(g, bound, block, x, 1, pool, bn, mode, bn_config)?;
        }
        let flat = g.flatten(x)?;
        let logits = g.linear(flat, bound.var(self.fc_weight), bound.var(self.fc_bias))?;
        let scores = g.sigmoid(logits);
        g.reshape(scores, &[s[0]])
    }
}

/// Dense layer `[N, I] -> [N, O]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn init<T: Real, R: Rng + ?Sized>(
        prefix: &str,
        inputs: usize,
        outputs: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / Float::sqrt(inputs.max(1) as f64);
        let weight = store.add(format!("{prefix}.weight"), uniform(&[outputs, inputs], bound, rng));
        let bias = store.add(format!("{prefix}.bias"), uniform(&[outputs], bound, rng));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    /// Draws fresh values for this layer's tensors in place.
    pub fn reinit<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let bound = 1.0 / Float::sqrt(self.inputs.max(1) as f64);
        *store.get_mut(self.weight) = uniform(&[self.outputs, self.inputs], bound, rng);
        *store.get_mut(self.bias) = uniform(&[self.outputs], bound, rng);
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<Var> {
        g.linear(x, bound.var(self.weight), bound.var(self.bias))
    }
}

/// Number of distance statistics fed to the mask network.
pub const MASK_STATS: usize = 5;

/// Small network mapping per-class distance statistics to mask threshold
/// `β` (identity output) and slope `γ` (softplus output).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskNet {
    hidden: Linear,
    out: Linear,
}

impl MaskNet {
    pub const HIDDEN: usize = 16;

    pub fn init<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R) -> Self {
        Self {
            hidden: Linear::init("mask.hidden", MASK_STATS, Self::HIDDEN, store, rng),
            out: Linear::init("mask.out", Self::HIDDEN, 2, store, rng),
        }
    }

    /// `stats: [n, 5]` to `(β, γ)`, each `[n, 1]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, bound: &Bound, stats: Var) -> Result<(Var, Var)> {
        let h = self.hidden.forward(g, bound, stats)?;
        let h = g.tanh(h);
        let o = self.out.forward(g, bound, h)?;
        let beta = g.narrow(o, 1, 0, 1)?;
        let raw = g.narrow(o, 1, 1, 1)?;
        let gamma = g.softplus(raw);
        Ok((beta, gamma))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn shape_trace_for_84_pixels() {
        let c = Conv4Config::default();
        assert_eq!(c.spatial_trace(), vec![84, 41, 19, 8, 3]);
        assert_eq!(c.embedding_dim(), 576);
    }

    #[test]
    fn smallest_input_for_four_blocks() {
        let c = Conv4Config::default();
        assert_eq!(min_input_size(&c), 46);
        assert!(Conv4Config { input_size: 45, ..c }.validate().is_err());
        assert!(Conv4Config { input_size: 30, ..c }.validate().is_err());
    }

    #[test]
    fn init_is_seeded() {
        let cfg = Conv4Config {
            filters: 4,
            input_size: 46,
            in_channels: 1,
            ..Default::default()
        };
        let build = |seed| {
            let mut store = ParamStore::<f32>::new();
            let mut bn = BnState::new();
            Conv4::init(cfg, &mut store, &mut bn, &mut rng_from(seed, 0)).unwrap();
            store
        };
        assert_eq!(build(1), build(1));
        assert_ne!(build(1), build(2));
        let s = build(3);
        for (name, t) in s.iter() {
            if name.ends_with("gamma") {
                assert!(t.data().iter().all(|&v| v == 1.0));
            }
            if name.ends_with("beta") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }
}
