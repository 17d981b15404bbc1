//! Training checkpoints: parameters plus `__`-prefixed metadata entries
//! (network config, its hash, seed, progress counters and Adam moments).
//!
//! Integers and `f64`s are stored exactly as four 16-bit chunks, each held
//! in one `f32` element.

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{NetworkConfig, META_PREFIX};
use crate::optim::AdamState;
use crate::params::{read_checkpoint, write_checkpoint, ParameterSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub params: ParameterSet,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    pub best_val: f64,
    pub seed: u64,
    pub adam: Option<AdamState>,
}

fn u64_tensor(x: u64) -> Tensor {
    Tensor::from_fn(&[4], |i| ((x >> (16 * i)) & 0xFFFF) as f32)
}

fn tensor_u64(name: &str, t: &Tensor) -> Result<u64> {
    if t.shape() != [4] {
        return Err(Error::Checkpoint(format!("`{name}` must hold 4 chunks")));
    }
    let mut x = 0u64;
    for (i, &v) in t.data().iter().enumerate() {
        if !(0.0..=65535.0).contains(&v) || v.fract() != 0.0 {
            return Err(Error::Checkpoint(format!(
                "`{name}` has a corrupt chunk {v}"
            )));
        }
        x |= (v as u64) << (16 * i);
    }
    Ok(x)
}

fn text_tensor(s: &str) -> Tensor {
    let bytes = s.as_bytes();
    Tensor::from_fn(&[bytes.len().max(1)], |i| {
        bytes.get(i).copied().unwrap_or(b'\n') as f32
    })
}

fn tensor_text(t: &Tensor) -> Result<String> {
    let bytes: Vec<u8> = t.data().iter().map(|&v| v as u8).collect();
    String::from_utf8(bytes).map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))
}

impl Checkpoint {
    pub fn new(config: NetworkConfig, params: ParameterSet, seed: u64) -> Self {
        Self {
            config,
            params,
            epoch: 0,
            step: 0,
            best_val: f64::INFINITY,
            seed,
            adam: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta: Vec<(String, Tensor)> = vec![
            ("__config".into(), text_tensor(&self.config.to_text())),
            ("__config_hash".into(), u64_tensor(self.config.hash())),
            ("__seed".into(), u64_tensor(self.seed)),
            ("__epoch".into(), u64_tensor(self.epoch)),
            ("__step".into(), u64_tensor(self.step)),
            ("__best_val".into(), u64_tensor(self.best_val.to_bits())),
        ];
        if let Some(adam) = &self.adam {
            meta.push(("__adam.step".into(), u64_tensor(adam.step)));
            for (name, m, v) in adam.moments_as_tensors(&self.params) {
                meta.push((format!("__adam.m.{name}"), m));
                meta.push((format!("__adam.v.{name}"), v));
            }
        }
        let mut entries: Vec<(&str, &Tensor)> = self.params.iter().collect();
        entries.extend(meta.iter().map(|(n, t)| (n.as_str(), t)));
        write_checkpoint(path, &entries)
    }

    /// Loads a checkpoint and verifies that its stored config matches its hash.
    pub fn load(path: &Path) -> Result<Self> {
        let mut params = ParameterSet::new();
        let mut meta = std::collections::HashMap::new();
        for (name, t) in read_checkpoint(path)? {
            if name.starts_with(META_PREFIX) {
                meta.insert(name, t);
            } else {
                params.insert(name, t)?;
            }
        }
        let get = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing `{k}`", path.display())))
        };
        let config = NetworkConfig::from_text(&tensor_text(get("__config")?)?)?;
        let hash = tensor_u64("__config_hash", get("__config_hash")?)?;
        if hash != config.hash() {
            return Err(Error::Checkpoint(format!(
                "{}: config hash mismatch (stored {hash:016x}, computed {:016x})",
                path.display(),
                config.hash()
            )));
        }
        let adam = match meta.get("__adam.step") {
            None => None,
            Some(t) => {
                let mut state = AdamState::new(&params, 0.0);
                let (mut m, mut v) = (Vec::new(), Vec::new());
                for (name, _) in params.iter() {
                    m.push(get(&format!("__adam.m.{name}"))?.data().to_vec());
                    v.push(get(&format!("__adam.v.{name}"))?.data().to_vec());
                }
                state.restore(tensor_u64("__adam.step", t)?, m, v)?;
                Some(state)
            }
        };
        Ok(Self {
            config,
            params,
            epoch: tensor_u64("__epoch", get("__epoch")?)?,
            step: tensor_u64("__step", get("__step")?)?,
            best_val: f64::from_bits(tensor_u64("__best_val", get("__best_val")?)?),
            seed: tensor_u64("__seed", get("__seed")?)?,
            adam,
        })
    }

    /// Like [`Checkpoint::load`] but also requires the config to equal `expected`.
    pub fn load_for(path: &Path, expected: &NetworkConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.config.hash() != expected.hash() {
            return Err(Error::Checkpoint(format!(
                "{} was trained with a different network config",
                path.display()
            )));
        }
        Ok(ck)
    }
}
