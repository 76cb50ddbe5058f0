//! Trained models on disk: the core parameter container with a JSON
//! description of the model in its metadata field.

use std::path::Path;

use fsl_core::baseline::FineTuneModel;
use fsl_core::checkpoint::Checkpoint;
use fsl_core::graph::{BatchNormConfig, RunningStats};
use fsl_core::meta::{Learner, Trained};
use fsl_core::methods::{CpnConfig, FewShotModel, MethodConfig};
use fsl_core::nn::{BnState, Conv4Config, ParamStore};
use fsl_core::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{BaselineSection, CpnSection, MethodsConfig};
use crate::error::{io_err, HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneMeta {
    pub blocks: usize,
    pub filters: usize,
    pub kernel: usize,
    pub padding: usize,
    pub input_size: usize,
    pub in_channels: usize,
}

impl From<&Conv4Config> for BackboneMeta {
    fn from(c: &Conv4Config) -> Self {
        Self {
            blocks: c.blocks,
            filters: c.filters,
            kernel: c.kernel,
            padding: c.padding,
            input_size: c.input_size,
            in_channels: c.in_channels,
        }
    }
}

impl From<BackboneMeta> for Conv4Config {
    fn from(b: BackboneMeta) -> Self {
        Conv4Config {
            blocks: b.blocks,
            filters: b.filters,
            kernel: b.kernel,
            padding: b.padding,
            input_size: b.input_size,
            in_channels: b.in_channels,
        }
    }
}

impl From<&MethodConfig> for MethodsConfig {
    fn from(m: &MethodConfig) -> Self {
        let c = m.cpn;
        Self {
            refine_iterations: m.refine_iterations,
            bn_eps: m.bn.eps,
            bn_momentum: m.bn.momentum,
            cpn: CpnSection {
                epsilon: c.epsilon,
                xi: c.xi,
                power_iterations: c.power_iterations,
                walk_length: c.walk_length,
                temperature: c.temperature,
                ssl_weight: c.ssl_weight,
            },
        }
    }
}

fn method_config(m: &MethodsConfig) -> MethodConfig {
    let c = m.cpn;
    MethodConfig {
        refine_iterations: m.refine_iterations,
        cpn: CpnConfig {
            epsilon: c.epsilon,
            xi: c.xi,
            power_iterations: c.power_iterations,
            walk_length: c.walk_length,
            temperature: c.temperature,
            ssl_weight: c.ssl_weight,
        },
        bn: BatchNormConfig {
            eps: m.bn_eps,
            momentum: m.bn_momentum,
        },
    }
}

/// Everything needed to rebuild the model skeleton before loading tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub learner: String,
    pub backbone: BackboneMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<MethodsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineSection>,
    pub bn_layers: usize,
    pub checksum: u64,
}

fn named_tensors<T: Real>(store: &ParamStore<T>, bn: &BnState<T>) -> Vec<(String, Tensor<T>)> {
    let mut out: Vec<(String, Tensor<T>)> = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    for (i, s) in bn.iter().enumerate() {
        let n = s.mean.len();
        out.push((
            format!("bn.{i}.mean"),
            Tensor::new(&[n], s.mean.clone()).expect("vector"),
        ));
        out.push((format!("bn.{i}.var"), Tensor::new(&[n], s.var.clone()).expect("vector")));
    }
    out
}

fn corrupt(path: &Path, message: impl Into<String>) -> HarnessError {
    HarnessError::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Serializes a model to bytes.
pub fn encode_trained<T: Real>(model: &Trained<T>) -> Result<Vec<u8>> {
    let (meta, tensors) = match model {
        Trained::FewShot(m) => (
            ModelMeta {
                learner: m.method().key().to_string(),
                backbone: m.backbone_config().into(),
                method: Some(m.config().into()),
                baseline: None,
                bn_layers: m.bn_state().len(),
                checksum: m.store().checksum(),
            },
            named_tensors(m.store(), m.bn_state()),
        ),
        Trained::FineTune(m) => (
            ModelMeta {
                learner: Learner::FineTune.key().to_string(),
                backbone: m.backbone_config().into(),
                method: None,
                baseline: Some((*m.config()).into()),
                bn_layers: m.bn_state().len(),
                checksum: m.store().checksum(),
            },
            named_tensors(m.store(), m.bn_state()),
        ),
    };
    let json = serde_json::to_string(&meta).expect("metadata serializes");
    Ok(Checkpoint::new(json, tensors).encode()?)
}

/// Rebuilds a model from bytes; `path` is only used in error messages.
pub fn decode_trained<T: Real>(bytes: &[u8], path: &Path) -> Result<Trained<T>> {
    let ckpt = Checkpoint::<T>::decode(bytes).map_err(|e| corrupt(path, e.to_string()))?;
    let meta: ModelMeta = serde_json::from_str(&ckpt.metadata).map_err(|e| corrupt(path, format!("metadata: {e}")))?;
    let mut tensors = ckpt.tensors;
    let n_params = tensors
        .len()
        .checked_sub(2 * meta.bn_layers)
        .ok_or_else(|| corrupt(path, "fewer tensors than norm statistics"))?;
    let stats = tensors.split_off(n_params);
    let mut bn = Vec::with_capacity(meta.bn_layers);
    for (i, pair) in stats.chunks_exact(2).enumerate() {
        let (mean_name, mean) = &pair[0];
        let (var_name, var) = &pair[1];
        if *mean_name != format!("bn.{i}.mean") || *var_name != format!("bn.{i}.var") {
            return Err(corrupt(
                path,
                format!("unexpected norm statistics `{mean_name}`, `{var_name}`"),
            ));
        }
        bn.push(RunningStats {
            mean: mean.data().to_vec(),
            var: var.data().to_vec(),
        });
    }
    let backbone: Conv4Config = meta.backbone.into();
    let learner =
        Learner::from_key(&meta.learner).ok_or_else(|| corrupt(path, format!("unknown learner `{}`", meta.learner)))?;
    let model = match learner {
        Learner::FewShot(method) => {
            let cfg = meta
                .method
                .as_ref()
                .ok_or_else(|| corrupt(path, "missing method settings"))?;
            let mut m = FewShotModel::new(method, backbone, method_config(cfg), 0)?;
            m.load_state(tensors, bn).map_err(|e| corrupt(path, e.to_string()))?;
            Trained::FewShot(m)
        }
        Learner::FineTune => {
            let cfg = meta
                .baseline
                .ok_or_else(|| corrupt(path, "missing baseline settings"))?;
            let mut m = FineTuneModel::new(backbone, cfg.into(), 0)?;
            m.load_state(tensors, bn).map_err(|e| corrupt(path, e.to_string()))?;
            Trained::FineTune(m)
        }
    };
    if model.checksum() != meta.checksum {
        return Err(corrupt(path, "parameter checksum mismatch"));
    }
    Ok(model)
}

pub fn save_trained<T: Real>(model: &Trained<T>, path: &Path) -> Result<()> {
    let bytes = encode_trained(model)?;
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_trained<T: Real>(path: &Path) -> Result<Trained<T>> {
    if !path.is_file() {
        return Err(HarnessError::Missing(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_trained(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fsl_core::baseline::BaselineConfig;
    use fsl_core::methods::Method;

    fn small() -> Conv4Config {
        Conv4Config {
            blocks: 2,
            filters: 4,
            kernel: 3,
            padding: 1,
            input_size: 8,
            in_channels: 1,
        }
    }

    #[test]
    fn few_shot_round_trip() {
        for method in Method::ALL {
            let m = FewShotModel::<f32>::new(method, small(), MethodConfig::default(), 7).unwrap();
            let t = Trained::FewShot(m);
            let back: Trained<f32> = decode_trained(&encode_trained(&t).unwrap(), Path::new("x")).unwrap();
            assert_eq!(back, t, "{method}");
        }
    }

    #[test]
    fn fine_tune_round_trip_with_head() {
        let mut m = FineTuneModel::<f32>::new(small(), BaselineConfig::default(), 3).unwrap();
        m.ensure_head(6, 1);
        let t = Trained::FineTune(m);
        let back: Trained<f32> = decode_trained(&encode_trained(&t).unwrap(), Path::new("x")).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn missing_file_is_reported() {
        let err = load_trained::<f32>(Path::new("/nonexistent/checkpoint")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/checkpoint"));
    }
}
