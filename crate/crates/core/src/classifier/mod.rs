//! Target and evaluation classifiers: definition, training, inference and
//! checkpoints.

mod nets;
mod train;

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

pub use train::{train_classifier, LrSchedule, TrainConfig, TrainReport};

use crate::data::{ImageBatch, ImageShape};
use crate::error::{Error, Result};
use crate::nn::{Mode, ParamStore};
use nets::{Mlp, ResNet, Vgg};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Resnet,
    Vgg,
    Mlp,
}

impl Architecture {
    pub fn id(self) -> &'static str {
        match self {
            Architecture::Resnet => "resnet",
            Architecture::Vgg => "vgg",
            Architecture::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub arch: Architecture,
    pub width: usize,
    pub input: ImageShape,
    pub classes: usize,
    pub seed: u64,
}

enum Net {
    Resnet(ResNet),
    Vgg(Vgg),
    Mlp(Mlp),
}

/// Row-major `rows x cols` score matrix (logits, probabilities or features).
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl Matrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        let (rows, cols) = t.dims2()?;
        Ok(Self {
            rows,
            cols,
            values: t.flatten_all()?.to_vec1::<f32>()?,
        })
    }

    fn push_rows(&mut self, other: Matrix) {
        self.cols = other.cols;
        self.rows += other.rows;
        self.values.extend(other.values);
    }
}

/// Whether `target` is among the `k` largest entries of `row`. Entries tied
/// with the k-th largest count as inside.
pub fn in_top_k(row: &[f32], target: usize, k: usize) -> bool {
    let t = row[target];
    row.iter().filter(|&&v| v > t).count() < k
}

pub const EVAL_CHUNK: usize = 256;

pub struct Classifier {
    spec: ClassifierSpec,
    store: ParamStore,
    net: Net,
}

impl Classifier {
    pub fn new(spec: ClassifierSpec) -> Result<Self> {
        if spec.classes < 2 {
            return Err(Error::Config(format!(
                "a classifier needs at least 2 classes, got {}",
                spec.classes
            )));
        }
        spec.input.validate()?;
        let mut store = ParamStore::new(spec.seed);
        let net = match spec.arch {
            Architecture::Resnet => Net::Resnet(ResNet::new(&mut store, spec.input, spec.width, spec.classes)?),
            Architecture::Vgg => Net::Vgg(Vgg::new(&mut store, spec.input, spec.width, spec.classes)?),
            Architecture::Mlp => Net::Mlp(Mlp::new(&mut store, spec.input, spec.width, spec.classes)?),
        };
        Ok(Self { spec, store, net })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn architecture(&self) -> Architecture {
        self.spec.arch
    }

    pub fn num_classes(&self) -> usize {
        self.spec.classes
    }

    pub fn input_shape(&self) -> ImageShape {
        self.spec.input
    }

    pub fn feature_dim(&self) -> usize {
        match &self.net {
            Net::Resnet(n) => n.feature_dim(),
            Net::Vgg(n) => n.feature_dim(),
            Net::Mlp(n) => n.feature_dim(),
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.spec.input;
        if (c, h, w) != (s.channels, s.height, s.width) {
            return Err(Error::ShapeMismatch {
                expected: s.to_string(),
                actual: format!("{c}x{h}x{w}"),
            });
        }
        Ok(())
    }

    /// `(features, logits)` for an `(N, C, H, W)` tensor in `[0, 1]`.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        match &self.net {
            Net::Resnet(n) => n.forward(x, mode),
            Net::Vgg(n) => n.forward(x, mode),
            Net::Mlp(n) => n.forward(x, mode),
        }
    }

    pub fn logits(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward(x, mode)?.1)
    }

    fn batched(&self, batch: &ImageBatch, pick: impl Fn(Tensor, Tensor) -> Result<Tensor>) -> Result<Matrix> {
        if batch.shape() != self.spec.input {
            return Err(Error::ShapeMismatch {
                expected: self.spec.input.to_string(),
                actual: batch.shape().to_string(),
            });
        }
        let mut out = Matrix {
            rows: 0,
            cols: 0,
            values: Vec::new(),
        };
        let mut start = 0;
        while start < batch.len() {
            let end = (start + EVAL_CHUNK).min(batch.len());
            let x = batch.to_tensor(start, end, &Device::Cpu)?;
            let (f, l) = self.forward(&x, Mode::EVAL)?;
            out.push_rows(Matrix::from_tensor(&pick(f, l)?)?);
            start = end;
        }
        if out.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("classifier output".into()));
        }
        Ok(out)
    }

    /// Inference-mode logits, one row per image.
    pub fn predict_logits(&self, batch: &ImageBatch) -> Result<Matrix> {
        self.batched(batch, |_, l| Ok(l))
    }

    /// Softmax of [`Self::predict_logits`].
    pub fn predict_probs(&self, batch: &ImageBatch) -> Result<Matrix> {
        self.batched(batch, |_, l| crate::nn::softmax(&l))
    }

    /// Inference-mode penultimate-layer activations.
    pub fn penultimate_features(&self, batch: &ImageBatch) -> Result<Matrix> {
        self.batched(batch, |f, _| Ok(f))
    }

    pub fn accuracy(&self, batch: &ImageBatch) -> Result<f64> {
        let labels = batch
            .labels()
            .ok_or_else(|| Error::Empty("accuracy needs labelled images".into()))?;
        if labels.is_empty() {
            return Err(Error::Empty("accuracy of an empty batch".into()));
        }
        let logits = self.predict_logits(batch)?;
        let hits = (0..logits.rows)
            .filter(|&i| crate::losses::argmax(logits.row(i)) == labels[i])
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }

    pub fn fingerprint(&self) -> Result<String> {
        self.store.fingerprint()
    }

    pub fn save(&self, dir: &Path, role: &str, meta: &CheckpointMeta) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ckpt = dir.join(format!("{role}.ckpt"));
        self.store.save(&ckpt)?;
        let sidecar = CheckpointSidecar {
            format_version: SIDECAR_VERSION,
            role: role.to_string(),
            architecture: self.spec.arch.id().to_string(),
            spec: self.spec.clone(),
            classes: self.spec.classes,
            feature_dim: self.feature_dim(),
            seed: self.spec.seed,
            dataset_hash: meta.dataset_hash.clone(),
            weights_sha256: self.fingerprint()?,
            train: meta.train.clone(),
        };
        let path = dir.join(format!("{role}.json"));
        std::fs::write(&path, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))?;
        Ok(ckpt)
    }

    pub fn load(dir: &Path, role: &str) -> Result<(Self, CheckpointSidecar)> {
        let path = dir.join(format!("{role}.json"));
        let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar = CheckpointSidecar::parse(&text)?;
        let model = Classifier::new(sidecar.spec.clone())?;
        model.store.load(&dir.join(format!("{role}.ckpt")))?;
        if model.fingerprint()? != sidecar.weights_sha256 {
            return Err(Error::malformed("checkpoint", format!("{role} weights do not match sidecar hash")));
        }
        Ok((model, sidecar))
    }
}

pub const SIDECAR_VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct CheckpointMeta {
    pub dataset_hash: String,
    pub train: Option<TrainReport>,
}

/// JSON written beside every classifier checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub format_version: u32,
    pub role: String,
    pub architecture: String,
    pub spec: ClassifierSpec,
    pub classes: usize,
    pub feature_dim: usize,
    pub seed: u64,
    pub dataset_hash: String,
    pub weights_sha256: String,
    #[serde(default)]
    pub train: Option<TrainReport>,
}

impl CheckpointSidecar {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let s: CheckpointSidecar = serde_json::from_slice(bytes)?;
        if s.format_version != SIDECAR_VERSION {
            return Err(Error::malformed("checkpoint sidecar", format!("version {}", s.format_version)));
        }
        if s.architecture != s.spec.arch.id() || s.classes != s.spec.classes {
            return Err(Error::malformed("checkpoint sidecar", "fields disagree with spec"));
        }
        Ok(s)
    }
}
