//! Few-shot classifiers built on a shared embedding backbone.

pub mod cpn;
pub mod proto;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

pub use cpn::{kl_from_probs, rw_loss, vat_loss, vat_loss_from, CpnConfig};
pub use proto::{
    classify_by_distance, compute_masks, compute_prototypes, distance_logits, distance_statistics, distractor_assign,
    length_scale_offset, masks_from_params, normalized_distances, one_hot, pn_loss, refine_masked, refine_soft_kmeans,
    refine_with_distractor, refine_with_masks, rn_loss, soft_assign, MaskOutput,
};

use crate::data::EpisodeTensors;
use crate::error::{Error, Result};
use crate::graph::{BatchNormConfig, Graph, Var};
use crate::nn::{
    BnState, Bound, Conv4, Conv4Config, ForwardMode, MaskNet, ParamId, ParamStore, RelationConfig, RelationModule,
};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{Real, Tensor};

/// Meta-learned few-shot methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Prototypical network.
    Pn,
    /// Relation network.
    Rn,
    /// Prototypes refined by soft k-means over the unlabeled set.
    Skm,
    /// Soft k-means with an extra distractor cluster.
    SkmCluster,
    /// Soft k-means with learned soft masks.
    SkmMask,
    /// Prototypical loss plus consistency and random-walk regularizers.
    Cpn,
    /// [`Method::Cpn`] on soft k-means refined prototypes.
    CpnSkm,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Pn,
        Method::Rn,
        Method::Skm,
        Method::SkmCluster,
        Method::SkmMask,
        Method::Cpn,
        Method::CpnSkm,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Method::Pn => "pn",
            Method::Rn => "rn",
            Method::Skm => "skm",
            Method::SkmCluster => "skm-cluster",
            Method::SkmMask => "skm-mask",
            Method::Cpn => "cpn",
            Method::CpnSkm => "cpn-skm",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|m| m.key() == key)
    }

    /// Whether episodes for this method carry an unlabeled set.
    pub fn uses_unlabeled(self) -> bool {
        !matches!(self, Method::Pn | Method::Rn)
    }
}

impl core::fmt::Display for Method {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.key())
    }
}

impl core::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_key(s).ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodConfig {
    pub refine_iterations: usize,
    pub cpn: CpnConfig,
    pub bn: BatchNormConfig,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            refine_iterations: 1,
            cpn: CpnConfig::default(),
            bn: BatchNormConfig::default(),
        }
    }
}

/// Graph handles produced by one episode pass.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeOutput {
    pub loss: Var,
    /// `[t, n]` class scores of the targets: logits, or relation scores.
    pub scores: Var,
}

/// A backbone plus whatever extra parameters a method needs.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotModel<T> {
    method: Method,
    config: MethodConfig,
    store: ParamStore<T>,
    bn: BnState<T>,
    backbone: Conv4,
    relation: Option<RelationModule>,
    mask: Option<MaskNet>,
    log_q: Option<ParamId>,
}

struct Embedded {
    support: Var,
    unlabeled: Var,
    target: Var,
}

fn concat_images<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts[0].shape();
    let mut shape = first.to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(&shape, data)
}

impl<T: Real> FewShotModel<T> {
    /// Freshly initialized model; identical seeds give identical parameters.
    pub fn new(method: Method, backbone: Conv4Config, config: MethodConfig, seed: u64) -> Result<Self> {
        let mut rng = rng_from(derive_seed(seed, "init", 0), 0);
        let mut store = ParamStore::new();
        let mut bn = BnState::new();
        let conv = Conv4::init(backbone, &mut store, &mut bn, &mut rng)?;
        let relation = match method {
            Method::Rn => Some(RelationModule::init(
                RelationConfig::for_backbone(&backbone),
                &mut store,
                &mut bn,
                &mut rng,
            )?),
            _ => None,
        };
        let mask = (method == Method::SkmMask).then(|| MaskNet::init(&mut store, &mut rng));
        let log_q = (method == Method::SkmCluster).then(|| store.add("distractor.log_q", Tensor::zeros(&[1])));
        Ok(Self {
            method,
            config,
            store,
            bn,
            backbone: conv,
            relation,
            mask,
            log_q,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn config(&self) -> &MethodConfig {
        &self.config
    }

    pub fn backbone_config(&self) -> &Conv4Config {
        self.backbone.config()
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn bn_state(&self) -> &BnState<T> {
        &self.bn
    }

    /// Replaces all parameters and running statistics, checking names and shapes.
    pub fn load_state(&mut self, params: Vec<(String, Tensor<T>)>, bn: BnState<T>) -> Result<()> {
        if params.len() != self.store.len() || bn.len() != self.bn.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors and {} norm layers, got {} and {}",
                self.store.len(),
                self.bn.len(),
                params.len(),
                bn.len()
            )));
        }
        for ((name, value), (have, current)) in params.iter().zip(self.store.iter()) {
            if name != have || value.shape() != current.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` {:?} does not match `{have}` {:?}",
                    value.shape(),
                    current.shape()
                )));
            }
        }
        for (new, old) in bn.iter().zip(&self.bn) {
            if new.mean.len() != old.mean.len() || new.var.len() != old.var.len() {
                return Err(Error::Checkpoint("running statistics width mismatch".into()));
            }
        }
        for (slot, (_, value)) in self.store.tensors_mut().iter_mut().zip(params) {
            *slot = value;
        }
        self.bn = bn;
        Ok(())
    }

    /// Current distractor length scale, for [`Method::SkmCluster`].
    pub fn distractor_scale(&self) -> Option<T> {
        self.log_q.map(|id| self.store.get(id).item().exp())
    }

    fn embed_all(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        bn: &mut BnState<T>,
        ep: &EpisodeTensors<T>,
        mode: ForwardMode,
    ) -> Result<Embedded> {
        let (s, t) = (ep.support.shape()[0], ep.target.shape()[0]);
        let batch = if self.method.uses_unlabeled() {
            concat_images(&[&ep.support, &ep.unlabeled, &ep.target])?
        } else {
            concat_images(&[&ep.support, &ep.target])?
        };
        let u = batch.shape()[0] - s - t;
        let x = g.constant(batch);
        let all = self.backbone.embed(g, bound, bn, x, mode, self.config.bn)?;
        Ok(Embedded {
            support: g.narrow(all, 0, 0, s)?,
            unlabeled: g.narrow(all, 0, s, u)?,
            target: g.narrow(all, 0, s + u, t)?,
        })
    }

    fn prototypes(&self, g: &mut Graph<T>, bound: &Bound, e: &Embedded, ep: &EpisodeTensors<T>) -> Result<Var> {
        let (labels, n) = (&ep.support_labels, ep.ways);
        let iters = self.config.refine_iterations;
        match self.method {
            Method::Skm | Method::CpnSkm => refine_soft_kmeans(g, e.support, labels, n, e.unlabeled, iters),
            Method::SkmCluster => {
                let log_q = bound.var(self.log_q.expect("distractor scale"));
                let q = g.exp(log_q);
                let c = refine_with_distractor(g, e.support, labels, n, e.unlabeled, q, iters)?;
                g.narrow(c, 0, 0, n)
            }
            Method::SkmMask => {
                let net = self.mask.as_ref().expect("mask network");
                refine_with_masks(g, e.support, labels, n, e.unlabeled, net, bound)
            }
            _ => compute_prototypes(g, e.support, labels, n),
        }
    }

    fn relation_scores(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        bn: &mut BnState<T>,
        ep: &EpisodeTensors<T>,
        mode: ForwardMode,
    ) -> Result<Var> {
        let relation = self.relation.as_ref().expect("relation module");
        let (s, t, n) = (ep.support.shape()[0], ep.target.shape()[0], ep.ways);
        let batch = concat_images(&[&ep.support, &ep.target])?;
        let x = g.constant(batch);
        let maps = self.backbone.feature_maps(g, bound, bn, x, mode, self.config.bn)?;
        let map_shape = g.shape(maps)[1..].to_vec();
        let flat = g.flatten(maps)?;
        let support = g.narrow(flat, 0, 0, s)?;
        let target = g.narrow(flat, 0, s, t)?;
        let protos = compute_prototypes(g, support, &ep.support_labels, n)?;
        let proto_idx: Vec<usize> = (0..t * n).map(|i| i % n).collect();
        let target_idx: Vec<usize> = (0..t * n).map(|i| i / n).collect();
        let p = g.select(protos, &proto_idx)?;
        let q = g.select(target, &target_idx)?;
        let mut shape = alloc::vec![t * n];
        shape.extend_from_slice(&map_shape);
        let p = g.reshape(p, &shape)?;
        let q = g.reshape(q, &shape)?;
        let pairs = g.concat(&[p, q], 1)?;
        let scores = relation.score_pairs(g, bound, bn, pairs, mode, self.config.bn)?;
        g.reshape(scores, &[t, n])
    }

    fn scores_with(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        bn: &mut BnState<T>,
        ep: &EpisodeTensors<T>,
        mode: ForwardMode,
    ) -> Result<(Var, Option<(Embedded, Var)>)> {
        if self.method == Method::Rn {
            return Ok((self.relation_scores(g, bound, bn, ep, mode)?, None));
        }
        let e = self.embed_all(g, bound, bn, ep, mode)?;
        let protos = self.prototypes(g, bound, &e, ep)?;
        let logits = distance_logits(g, protos, e.target)?;
        Ok((logits, Some((e, protos))))
    }

    /// Records the training loss of one episode on `g`, whose parameters
    /// were bound from [`Self::store`]. Batch-norm running estimates are
    /// updated.
    pub fn episode_loss<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph<T>,
        bound: &Bound,
        ep: &EpisodeTensors<T>,
        rng: &mut R,
    ) -> Result<EpisodeOutput> {
        let mut bn = core::mem::take(&mut self.bn);
        let result = self.scores_with(g, bound, &mut bn, ep, ForwardMode::TRAIN);
        self.bn = bn;
        let (scores, parts) = result?;
        let labels = &ep.target_labels;
        let loss = match (self.method, parts) {
            (Method::Rn, _) => rn_loss(g, scores, labels)?,
            (Method::Cpn | Method::CpnSkm, Some((e, protos))) => {
                let base = pn_loss(g, scores, labels)?;
                let reg = self.cpn_regularizer(g, bound, ep, &e, protos, rng)?;
                let reg = g.scale(reg, T::lit(self.config.cpn.ssl_weight));
                g.add(base, reg)?
            }
            _ => pn_loss(g, scores, labels)?,
        };
        Ok(EpisodeOutput { loss, scores })
    }

    fn cpn_regularizer<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        ep: &EpisodeTensors<T>,
        e: &Embedded,
        protos: Var,
        rng: &mut R,
    ) -> Result<Var> {
        let cfg = self.config.cpn;
        let images = concat_images(&[&ep.unlabeled, &ep.target])?;
        let proto_values = g.value(protos).clone();
        let backbone = self.backbone.clone();
        let mut bn = self.bn.clone();
        let bn_config = self.config.bn;
        let predict = move |g: &mut Graph<T>, bound: &Bound, x: Var| {
            let emb = backbone.embed(g, bound, &mut bn, x, ForwardMode::TRAIN_NO_UPDATE, bn_config)?;
            let p = g.constant(proto_values.clone());
            distance_logits(g, p, emb)
        };
        let mut predict = predict;
        let clean = {
            let mut aux = Graph::new();
            let frozen = self.store.bind_frozen(&mut aux);
            let x = aux.constant(images.clone());
            let logits = predict(&mut aux, &frozen, x)?;
            aux.value(logits).clone()
        };
        let vat = vat_loss(g, bound, &self.store, predict, &images, &clean, &cfg, rng)?;
        let pool = if ep.unlabeled.shape()[0] > 0 {
            e.unlabeled
        } else {
            e.target
        };
        let rw = rw_loss(g, protos, pool, cfg.walk_length, cfg.temperature)?;
        g.add(vat, rw)
    }

    /// Target scores `[t, n]` in evaluation mode (running batch-norm statistics).
    pub fn predict(&self, ep: &EpisodeTensors<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.store.bind_frozen(&mut g);
        let mut bn = self.bn.clone();
        let (scores, _) = self.scores_with(&mut g, &bound, &mut bn, ep, ForwardMode::EVAL)?;
        Ok(g.value(scores).clone())
    }

    /// Fraction of targets whose highest score is the true class.
    pub fn accuracy(&self, ep: &EpisodeTensors<T>) -> Result<f64> {
        let scores = self.predict(ep)?;
        Ok(accuracy_of(&scores, &ep.target_labels))
    }
}

/// Fraction of rows whose argmax matches `labels`.
pub fn accuracy_of<T: Real>(scores: &Tensor<T>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = scores.argmax_rows().iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.key().parse::<Method>().unwrap(), m);
        }
        assert!("proto".parse::<Method>().is_err());
    }
}
