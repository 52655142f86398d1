//! Single-file checkpoint: the magic `HRVVSCK1`, a little-endian `u64`
//! manifest length, a JSON manifest, then every tensor as little-endian
//! `f32` in manifest order.

use std::path::Path;

use hrvvs_core::params::{Adam, ParamStore};
use hrvvs_core::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const MAGIC: &[u8; 8] = b"HRVVSCK1";
const FIRST_MOMENT: &str = "adam.m.";
const SECOND_MOMENT: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Optimizer steps taken.
    pub step: u64,
    pub params: ParamStore,
    pub adam: Adam,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamHeader {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: RunConfig,
    step: u64,
    adam: AdamHeader,
    tensors: Vec<TensorEntry>,
}

fn corrupt(reason: impl Into<String>) -> Error {
    Error::Contract(format!("corrupt checkpoint: {}", reason.into()))
}

impl Checkpoint {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self.params.iter().map(|(n, t)| (n.clone(), t)).collect();
        out.extend(self.adam.first.iter().map(|(n, t)| (format!("{FIRST_MOMENT}{n}"), t)));
        out.extend(self.adam.second.iter().map(|(n, t)| (format!("{SECOND_MOMENT}{n}"), t)));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let manifest = Manifest {
            config: self.config.clone(),
            step: self.step,
            adam: AdamHeader {
                step: self.adam.step,
                beta1: self.adam.beta1,
                beta2: self.adam.beta2,
                eps: self.adam.eps,
            },
            tensors: tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 4 * tensors.iter().map(|(_, t)| t.numel()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| corrupt("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(json)?;
        let mut data = &bytes[16 + len..];
        let mut params = ParamStore::new();
        let mut adam = Adam {
            beta1: manifest.adam.beta1,
            beta2: manifest.adam.beta2,
            eps: manifest.adam.eps,
            step: manifest.adam.step,
            ..Adam::default()
        };
        for entry in manifest.tensors {
            let n: usize = entry.shape.iter().product();
            if data.len() < 4 * n {
                return Err(corrupt(format!("tensor {} truncated", entry.name)));
            }
            let values = data[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            data = &data[4 * n..];
            let t = Tensor::new(&entry.shape, values);
            if let Some(name) = entry.name.strip_prefix(FIRST_MOMENT) {
                adam.first.insert(name.to_string(), t);
            } else if let Some(name) = entry.name.strip_prefix(SECOND_MOMENT) {
                adam.second.insert(name.to_string(), t);
            } else {
                params.insert(entry.name, t);
            }
        }
        if !data.is_empty() {
            return Err(corrupt(format!("{} trailing bytes", data.len())));
        }
        Ok(Self {
            config: manifest.config,
            step: manifest.step,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hrvvs_core::Model;
    use std::collections::BTreeMap;

    fn sample() -> Checkpoint {
        let config = RunConfig::desk();
        let model = Model::new(config.model.clone()).unwrap();
        let params = model.init_params(3);
        let mut adam = Adam::default();
        let mut store = params.clone();
        let grads: BTreeMap<String, Tensor> = params
            .iter()
            .filter(|(n, _)| n.starts_with("decoder."))
            .map(|(n, t)| (n.clone(), t.map(|v| v * 0.5 + 0.01)))
            .collect();
        adam.update(&mut store, &grads, 1e-3, |_, _| true);
        store.snap_to_f32();
        Checkpoint {
            config,
            step: 1,
            params: store,
            adam,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let bytes = sample().to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.params, sample().params);
        assert_eq!(back.config, sample().config);
        assert_eq!(back.adam.step, 1);
        assert_eq!(back.adam.first.len(), sample().adam.first.len());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.bin");
        let ck = sample();
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        back.save(&dir.path().join("again.bin")).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(dir.path().join("again.bin")).unwrap());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
