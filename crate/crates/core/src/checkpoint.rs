//! Checkpoint directories: a JSON manifest plus one little-endian binary32
//! blob per tensor (parameters, buffers and optimizer moments).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{AblationFlags, Model};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::{Adam, TrainConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "svfreg-checkpoint/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

impl TensorRole {
    fn tag(&self) -> &'static str {
        match self {
            TensorRole::Param => "param",
            TensorRole::Buffer => "buffer",
            TensorRole::AdamM => "adam_m",
            TensorRole::AdamV => "adam_v",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerMeta {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub step: u64,
    pub rng_seed: u64,
    pub ablation_flags: AblationFlags,
    pub config: TrainConfig,
    pub optimizer: Option<OptimizerMeta>,
    pub tensors: Vec<TensorEntry>,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub config: TrainConfig,
    pub params: ParamStore<f32>,
    pub optimizer: Option<Adam>,
}

fn write_blob(path: &Path, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 * data.len());
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_blob(path: &Path, shape: &[usize]) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected: usize = shape.iter().product();
    if bytes.len() != 4 * expected {
        return Err(Error::Metadata {
            path: path.to_path_buf(),
            message: format!("expected {} bytes for shape {shape:?}, found {}", 4 * expected, bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(shape, data)
}

impl Checkpoint {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = Vec::new();
        let mut put = |name: &str, role: TensorRole, t: &Tensor<f32>| -> Result<()> {
            let file = format!("{}.{name}.f32", role.tag());
            write_blob(&dir.join(&file), t.data())?;
            tensors.push(TensorEntry {
                name: name.to_string(),
                role,
                shape: t.shape().to_vec(),
                file,
            });
            Ok(())
        };
        for e in self.params.entries() {
            let role = if e.trainable { TensorRole::Param } else { TensorRole::Buffer };
            put(&e.name, role, &e.value)?;
        }
        if let Some(opt) = &self.optimizer {
            for (id, (m, v)) in self.params.trainable_ids().zip(opt.m.iter().zip(&opt.v)) {
                let name = &self.params.entry(id).name;
                put(name, TensorRole::AdamM, m)?;
                put(name, TensorRole::AdamV, v)?;
            }
        }
        let manifest = CheckpointManifest {
            format: FORMAT.into(),
            step: self.step,
            rng_seed: self.config.seed,
            ablation_flags: self.config.network.flags,
            config: self.config.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerMeta {
                learning_rate: o.learning_rate,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                t: o.t,
            }),
            tensors,
        };
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Metadata {
            path: path.clone(),
            message: e.to_string(),
        })?;
        if m.format != FORMAT {
            return Err(Error::Metadata {
                path,
                message: format!("unsupported checkpoint format `{}`", m.format),
            });
        }
        Ok(m)
    }

    /// Loads a checkpoint, validating every tensor against the shapes the
    /// stored configuration implies.
    pub fn load(dir: impl AsRef<Path>) -> Result<(Model, Self)> {
        let dir = dir.as_ref();
        let manifest = Self::read_manifest(dir)?;
        let mut config = manifest.config.clone();
        if config.network.flags != manifest.ablation_flags {
            return Err(Error::Metadata {
                path: dir.join(MANIFEST_FILE),
                message: "ablation flags disagree with the stored configuration".into(),
            });
        }
        config.seed = manifest.rng_seed;
        let (model, mut params) = Model::init::<f32>(&config.network, 0)?;
        let find = |name: &str, role: TensorRole| {
            manifest
                .tensors
                .iter()
                .find(|t| t.name == name && t.role == role)
                .ok_or_else(|| Error::Metadata {
                    path: dir.join(MANIFEST_FILE),
                    message: format!("missing {} tensor `{name}`", role.tag()),
                })
        };
        let ids: Vec<_> = params.ids().collect();
        for id in &ids {
            let e = params.entry(*id);
            let role = if e.trainable { TensorRole::Param } else { TensorRole::Buffer };
            let name = e.name.clone();
            let t = find(&name, role)?;
            if t.shape != e.value.shape() {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: e.value.shape().to_vec(),
                    found: t.shape.clone(),
                });
            }
            params.set(*id, read_blob(&dir.join(&t.file), &t.shape)?)?;
        }
        let expected_count = params.len() + manifest.optimizer.as_ref().map_or(0, |_| 2 * params.trainable_ids().count());
        if manifest.tensors.len() != expected_count {
            return Err(Error::Metadata {
                path: dir.join(MANIFEST_FILE),
                message: format!("expected {expected_count} tensors, manifest lists {}", manifest.tensors.len()),
            });
        }
        let optimizer = match &manifest.optimizer {
            None => None,
            Some(meta) => {
                let mut m = Vec::new();
                let mut v = Vec::new();
                for id in params.trainable_ids() {
                    let e = params.entry(id);
                    for (role, out) in [(TensorRole::AdamM, &mut m), (TensorRole::AdamV, &mut v)] {
                        let t = find(&e.name, role)?;
                        if t.shape != e.value.shape() {
                            return Err(Error::ShapeMismatch {
                                name: format!("{}:{}", role.tag(), e.name),
                                expected: e.value.shape().to_vec(),
                                found: t.shape.clone(),
                            });
                        }
                        out.push(read_blob(&dir.join(&t.file), &t.shape)?);
                    }
                }
                Some(Adam {
                    learning_rate: meta.learning_rate,
                    beta1: meta.beta1,
                    beta2: meta.beta2,
                    eps: meta.eps,
                    t: meta.t,
                    m,
                    v,
                })
            }
        };
        Ok((
            model,
            Self {
                step: manifest.step,
                config,
                params,
                optimizer,
            },
        ))
    }
}
