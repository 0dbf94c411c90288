//! Minimal network toolkit on top of `candle-core` tensors: a seeded
//! parameter store, the layers used by the classifiers and the GAN, spectral
//! normalization and Adam.

mod adam;
mod conv;
mod layers;
mod resample;
mod spectral;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

pub use adam::{Adam, AdamConfig};
pub use conv::conv2d;
pub use resample::{avg_pool2x, upsample2x};
pub use layers::{global_avg_pool, BatchNorm2d, CondBatchNorm2d, Conv2d, Embedding, Linear};
pub use spectral::{spectral_norm_exact, SpectralNorm};

use crate::error::{Error, Result};

/// Forward-pass flags. `train` selects batch statistics in normalization
/// layers; `track` controls whether parameters join the autograd graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mode {
    pub train: bool,
    pub track: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode {
        train: true,
        track: true,
    };
    pub const EVAL: Mode = Mode {
        train: false,
        track: false,
    };
    /// Batch statistics, frozen parameters.
    pub const TRAIN_FROZEN: Mode = Mode {
        train: true,
        track: false,
    };
}

pub(crate) fn param_tensor(var: &Var, mode: Mode) -> Tensor {
    if mode.track {
        var.as_tensor().clone()
    } else {
        var.as_detached_tensor()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
    /// Uniform with bound `gain * sqrt(6 / (fan_in + fan_out))`.
    Xavier { fan_in: usize, fan_out: usize, gain: f64 },
}

struct Entry {
    var: Var,
    trainable: bool,
}

/// Named parameters and buffers of one model, initialized from a seeded RNG.
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            entries: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn init_values(&mut self, n: usize, init: Init) -> Vec<f32> {
        match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| d.sample(&mut self.rng) as f32).collect()
            }
            Init::Uniform(bound) => {
                let d = Uniform::new_inclusive(-bound, bound);
                (0..n).map(|_| d.sample(&mut self.rng) as f32).collect()
            }
            Init::Xavier {
                fan_in,
                fan_out,
                gain,
            } => {
                let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
                self.init_values(n, Init::Uniform(bound))
            }
        }
    }

    fn insert(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<Var> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let n = shape.iter().product();
        let values = self.init_values(n, init);
        let var = Var::from_vec(values, shape, &Device::Cpu)?;
        self.entries.insert(
            name.to_string(),
            Entry {
                var: var.clone(),
                trainable,
            },
        );
        Ok(var)
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.insert(name, shape, init, true)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.insert(name, shape, init, false)
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.var.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let map: HashMap<String, Tensor> = self
            .entries
            .iter()
            .map(|(k, e)| (k.clone(), e.var.as_tensor().clone()))
            .collect();
        safetensors_bytes(&map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Overwrites every entry from a serialized store with identical names
    /// and shapes.
    pub fn load_bytes(&self, bytes: &[u8]) -> Result<()> {
        let map = decode_safetensors(bytes)?;
        if map.len() != self.entries.len() {
            return Err(Error::malformed(
                "checkpoint",
                format!("{} tensors, model has {}", map.len(), self.entries.len()),
            ));
        }
        self.load_map(&map, "")
    }

    /// Entries as `(prefix + name, tensor)` pairs.
    pub fn export(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|(k, e)| (format!("{prefix}{k}"), e.var.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every entry from `map[prefix + name]`.
    pub fn load_map(&self, map: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, entry) in &self.entries {
            let key = format!("{prefix}{name}");
            let t = map
                .get(&key)
                .ok_or_else(|| Error::malformed("checkpoint", format!("missing `{key}`")))?;
            if t.dims() != entry.var.dims() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{key}: {:?}", entry.var.dims()),
                    actual: format!("{:?}", t.dims()),
                });
            }
            entry.var.set(&t.to_dtype(DType::F32)?)?;
        }
        Ok(())
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_bytes(&bytes)
    }

    /// SHA-256 over every entry name and value, for frozen-weight checks.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, e) in &self.entries {
            h.update(name.as_bytes());
            for v in e.var.as_tensor().flatten_all()?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

pub(crate) fn decode_safetensors(bytes: &[u8]) -> Result<HashMap<String, Tensor>> {
    candle_core::safetensors::load_buffer(bytes, &Device::Cpu).map_err(|e| Error::malformed("checkpoint", e.to_string()))
}

pub(crate) fn safetensors_bytes(map: &HashMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut entries: Vec<(&String, &Tensor)> = map.iter().collect();
    entries.sort_by(|a, b| a.0.cmp(b.0));
    safetensors::serialize(entries, None).map_err(|e| Error::malformed("safetensors", e.to_string()))
}

/// Row-wise `log(softmax(x))` over the last dimension.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(candle_core::D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(candle_core::D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    Ok(log_softmax(x)?.exp()?)
}

/// `(n, c)` one-hot matrix of `labels` in dtype `dtype`.
pub fn one_hot(labels: &[usize], c: usize, dtype: DType) -> Result<Tensor> {
    let mut v = vec![0f32; labels.len() * c];
    for (i, &l) in labels.iter().enumerate() {
        v[i * c + l] = 1.0;
    }
    Ok(Tensor::from_vec(v, (labels.len(), c), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn label_tensor(labels: &[usize]) -> Result<Tensor> {
    let v: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    Ok(Tensor::from_vec(v, labels.len(), &Device::Cpu)?)
}
