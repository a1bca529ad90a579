//! Binary checkpoints: 8-byte magic, `u32` version, `u64` manifest length,
//! JSON manifest, then the little-endian `f64` payload it describes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::TrainConfig;
use crate::data::NormalizationStats;
use crate::error::{Error, Result};
use crate::flowcore::{ParamEntry, Parameterized};
use crate::model::{ModelConfig, PointFlowModel};
use crate::rng::RngState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PFLOWCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Optimizer and generator state needed to resume training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub config: TrainConfig,
    pub epoch: usize,
    pub rng: RngState,
    pub adam: AdamState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: PointFlowModel,
    pub normalization: Option<NormalizationStats>,
    pub training: Option<TrainingState>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NormManifest {
    name: String,
    momentum: f64,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainingManifest {
    config: TrainConfig,
    epoch: usize,
    rng: RngState,
    adam_step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    model: ModelConfig,
    /// Every payload tensor, contiguous and in payload order: model
    /// parameters, then norm running statistics, then Adam moments.
    tensors: Vec<ParamEntry>,
    norms: Vec<NormManifest>,
    normalization: Option<NormalizationStats>,
    training: Option<TrainingManifest>,
    payload_len: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = self.model.manifest();
        let mut payload = self.model.flatten();
        let mut push = |name: String, values: &[f64], tensors: &mut Vec<ParamEntry>| {
            tensors.push(ParamEntry {
                name,
                shape: vec![values.len()],
                offset: payload.len(),
            });
            payload.extend_from_slice(values);
        };
        let mut norms = Vec::new();
        for (name, bn) in self.model.norms() {
            push(format!("{name}.running_mean"), &bn.running_mean, &mut tensors);
            push(format!("{name}.running_std"), &bn.running_std, &mut tensors);
            norms.push(NormManifest {
                name: name.to_string(),
                momentum: bn.momentum,
                frozen: bn.frozen,
            });
        }
        let training = self.training.as_ref().map(|t| {
            push("adam.m".into(), &t.adam.m, &mut tensors);
            push("adam.v".into(), &t.adam.v, &mut tensors);
            TrainingManifest {
                config: t.config.clone(),
                epoch: t.epoch,
                rng: t.rng.clone(),
                adam_step: t.adam.step,
            }
        });
        let manifest = Manifest {
            model: self.model.config.clone(),
            tensors,
            norms,
            normalization: self.normalization.clone(),
            training,
            payload_len: payload.len(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {version}; this build reads version {CHECKPOINT_VERSION}"
            )));
        }
        let json_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json_end = 20usize
            .checked_add(json_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[20..json_end])
            .map_err(|e| bad(format!("malformed manifest: {e}")))?;
        let raw = &bytes[json_end..];
        if raw.len() != 8 * manifest.payload_len {
            return Err(bad(format!(
                "payload holds {} bytes, manifest declares {} values",
                raw.len(),
                manifest.payload_len
            )));
        }
        let payload: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        let mut offset = 0;
        for t in &manifest.tensors {
            if t.offset != offset {
                return Err(bad(format!("tensor {} is not contiguous", t.name)));
            }
            offset += t.shape.iter().product::<usize>();
        }
        if offset != payload.len() {
            return Err(bad("manifest does not cover the payload exactly"));
        }
        let take = |name: &str| -> Result<&[f64]> {
            let t = manifest
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| bad(format!("missing tensor {name}")))?;
            let n: usize = t.shape.iter().product();
            Ok(&payload[t.offset..t.offset + n])
        };

        let mut model = PointFlowModel::new(manifest.model.clone(), &mut crate::rng::seeded(0))?;
        let expected = model.manifest();
        if manifest.tensors.len() < expected.len() || manifest.tensors[..expected.len()] != expected[..] {
            return Err(bad("parameter layout does not match the model configuration"));
        }
        model.unflatten(&payload[..model.num_params()])?;
        let norm_names: Vec<&str> = model.norms().iter().map(|(n, _)| *n).collect();
        if norm_names.len() != manifest.norms.len() {
            return Err(bad("norm layer count does not match the model configuration"));
        }
        for (name, bn) in model.norms_mut() {
            let meta = manifest
                .norms
                .iter()
                .find(|m| m.name == name)
                .ok_or_else(|| bad(format!("missing norm layer {name}")))?;
            bn.running_mean = take(&format!("{name}.running_mean"))?.to_vec();
            bn.running_std = take(&format!("{name}.running_std"))?.to_vec();
            if bn.running_mean.len() != bn.dim() || bn.running_std.len() != bn.dim() {
                return Err(bad(format!("running statistics of {name} have the wrong width")));
            }
            bn.momentum = meta.momentum;
            bn.frozen = meta.frozen;
        }
        let training = match manifest.training {
            None => None,
            Some(t) => Some(TrainingState {
                config: t.config,
                epoch: t.epoch,
                rng: t.rng,
                adam: AdamState {
                    m: take("adam.m")?.to_vec(),
                    v: take("adam.v")?.to_vec(),
                    step: t.adam_step,
                },
            }),
        };
        Ok(Checkpoint {
            model,
            normalization: manifest.normalization,
            training,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
