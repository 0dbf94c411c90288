//! Dataset loading, private/public splitting and normalization.

mod batch;
pub mod cifar;
pub mod folder;
pub mod idx;
pub mod index_file;
mod preprocess;
pub mod synthetic;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use batch::{ImageBatch, ImageShape};
pub use preprocess::{preprocess, preprocess_batch, resize_bilinear, RawImage};
pub use synthetic::SyntheticSpec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// One of `mnist`, `cifar10`, `folder`, `synthetic`.
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_root: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_shape: Option<ImageShape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

impl DatasetConfig {
    pub fn synthetic(spec: SyntheticSpec) -> Self {
        Self {
            name: "synthetic".into(),
            data_root: None,
            image_shape: None,
            synthetic: Some(spec),
        }
    }

    /// Canonical shape: 1x32x32 for MNIST, 3x32x32 for CIFAR-10,
    /// 3x64x64 for image folders, native size for synthetic data.
    pub fn shape(&self) -> Result<ImageShape> {
        if let Some(s) = self.image_shape {
            return Ok(s);
        }
        match self.name.as_str() {
            "mnist" => Ok(ImageShape::new(1, 32, 32)),
            "cifar10" => Ok(ImageShape::new(3, 32, 32)),
            "folder" => Ok(ImageShape::new(3, 64, 64)),
            "synthetic" => Ok(self.synthetic_spec()?.shape()),
            other => Err(Error::UnknownDataset(other.to_string())),
        }
    }

    fn synthetic_spec(&self) -> Result<&SyntheticSpec> {
        self.synthetic
            .as_ref()
            .ok_or_else(|| Error::Config("synthetic dataset needs a `synthetic` block".into()))
    }

    fn root(&self) -> Result<&Path> {
        self.data_root
            .as_deref()
            .ok_or_else(|| Error::Config(format!("dataset `{}` needs `data_root`", self.name)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Train,
    Test,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads one part of a dataset, preprocessed to the canonical shape and
/// labelled with the original dataset labels. Returns `None` when the
/// dataset has no such part.
pub fn load_pool(cfg: &DatasetConfig, part: Part) -> Result<Option<ImageBatch>> {
    let target = cfg.shape()?;
    let (raws, labels): (Vec<RawImage>, Vec<usize>) = match cfg.name.as_str() {
        "mnist" => {
            let root = cfg.root()?;
            let prefix = if part == Part::Train { "train" } else { "t10k" };
            let img_path = root.join(format!("{prefix}-images-idx3-ubyte"));
            if part == Part::Test && !img_path.exists() {
                return Ok(None);
            }
            let imgs = idx::parse_images(&read(&img_path)?)?;
            let labels = idx::parse_labels(&read(&root.join(format!("{prefix}-labels-idx1-ubyte")))?)?;
            if labels.len() != imgs.count {
                return Err(Error::malformed("idx", "image/label count mismatch"));
            }
            let shape = ImageShape::new(1, imgs.rows, imgs.cols);
            let raws = (0..imgs.count)
                .map(|i| RawImage::from_u8(shape, imgs.image(i)))
                .collect();
            (raws, labels.into_iter().map(usize::from).collect())
        }
        "cifar10" => {
            let root = cfg.root()?;
            let files: Vec<PathBuf> = match part {
                Part::Train => (1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect(),
                Part::Test => vec![root.join("test_batch.bin")],
            };
            if part == Part::Test && !files[0].exists() {
                return Ok(None);
            }
            let shape = ImageShape::new(3, cifar::SIDE, cifar::SIDE);
            let mut raws = Vec::new();
            let mut labels = Vec::new();
            for f in files {
                let b = cifar::parse_batch(&read(&f)?)?;
                for i in 0..b.len() {
                    raws.push(RawImage::from_u8(shape, b.image(i)));
                    labels.push(b.labels[i] as usize);
                }
            }
            (raws, labels)
        }
        "folder" => {
            if part == Part::Test {
                return Ok(None);
            }
            folder::load(cfg.root()?)?
        }
        "synthetic" => {
            let spec = cfg.synthetic_spec()?;
            let pool = spec.generate(if part == Part::Train { 0 } else { 1 })?;
            let pool = if pool.shape() == target { pool } else { preprocess_batch(&pool, target)? };
            return Ok(Some(pool));
        }
        other => return Err(Error::UnknownDataset(other.to_string())),
    };
    let batch = preprocess(&raws, target)?;
    Ok(Some(batch.with_labels(Some(labels))?))
}

/// How to divide a labelled pool into private and public records.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub private_labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub public_labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub private_index_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub public_index_file: Option<PathBuf>,
}

impl SplitSpec {
    pub fn by_labels(private: impl Into<Vec<usize>>, public: impl Into<Vec<usize>>) -> Self {
        Self {
            private_labels: Some(private.into()),
            public_labels: Some(public.into()),
            ..Default::default()
        }
    }
}

/// Private (labelled) and public (unlabelled) parts of a dataset.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub dataset: String,
    /// Private images labelled with class indices `0..k`.
    pub private: ImageBatch,
    pub private_ids: Vec<usize>,
    /// Public images; labels are never carried forward.
    pub public: ImageBatch,
    pub public_ids: Vec<usize>,
    /// Original dataset label of each private class.
    pub class_labels: Vec<usize>,
    /// Private-class records of the held-out part, when the dataset has one.
    pub heldout_private: Option<ImageBatch>,
}

impl DatasetSplit {
    pub fn k(&self) -> usize {
        self.class_labels.len()
    }

    pub fn image_shape(&self) -> ImageShape {
        self.private.shape()
    }

    /// Private images of class `c`.
    pub fn private_class(&self, c: usize) -> ImageBatch {
        let labels = self.private.labels().unwrap_or(&[]);
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        self.private.select(&idx)
    }
}

fn sorted_unique(v: &[usize]) -> Vec<usize> {
    v.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
}

fn relabel(batch: &ImageBatch, class_labels: &[usize]) -> Result<ImageBatch> {
    let labels = batch.labels().unwrap_or(&[]);
    let mapped = labels
        .iter()
        .map(|l| {
            class_labels
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| Error::InvalidSplit(format!("label {l} is not a private class")))
        })
        .collect::<Result<Vec<_>>>()?;
    batch.clone().with_labels(Some(mapped))
}

/// Splits the training pool of `cfg` according to `spec`. Record order
/// within each part is a seeded shuffle, so repeated loads agree exactly.
pub fn load_split(cfg: &DatasetConfig, spec: &SplitSpec, seed: u64) -> Result<DatasetSplit> {
    let pool = load_pool(cfg, Part::Train)?
        .ok_or_else(|| Error::Empty(format!("dataset `{}` has no training part", cfg.name)))?;
    let heldout = load_pool(cfg, Part::Test)?;
    split_pool(&cfg.name, &pool, heldout.as_ref(), spec, seed)
}

pub fn split_pool(
    name: &str,
    pool: &ImageBatch,
    heldout: Option<&ImageBatch>,
    spec: &SplitSpec,
    seed: u64,
) -> Result<DatasetSplit> {
    let labels = pool
        .labels()
        .ok_or_else(|| Error::InvalidSplit("pool is unlabelled".into()))?;
    let (mut private_ids, mut public_ids, class_labels) = match spec {
        SplitSpec {
            private_labels: Some(pl),
            public_labels: Some(ul),
            private_index_file: None,
            public_index_file: None,
        } => {
            let pl = sorted_unique(pl);
            let ul = sorted_unique(ul);
            if let Some(l) = pl.iter().find(|l| ul.contains(l)) {
                return Err(Error::InvalidSplit(format!("label {l} is both private and public")));
            }
            let private: Vec<usize> = (0..pool.len()).filter(|&i| pl.contains(&labels[i])).collect();
            let public: Vec<usize> = (0..pool.len()).filter(|&i| ul.contains(&labels[i])).collect();
            (private, public, pl)
        }
        SplitSpec {
            private_labels: None,
            public_labels: None,
            private_index_file: Some(pf),
            public_index_file: Some(uf),
        } => {
            let text = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
            let private = sorted_unique(&index_file::parse(&text(pf)?)?);
            let public = sorted_unique(&index_file::parse(&text(uf)?)?);
            if let Some(&i) = private.iter().chain(&public).find(|&&i| i >= pool.len()) {
                return Err(Error::InvalidSplit(format!("record {i} beyond pool of {}", pool.len())));
            }
            if let Some(i) = private.iter().find(|i| public.binary_search(i).is_ok()) {
                return Err(Error::InvalidSplit(format!("record {i} is both private and public")));
            }
            let classes = sorted_unique(&private.iter().map(|&i| labels[i]).collect::<Vec<_>>());
            (private, public, classes)
        }
        _ => {
            return Err(Error::InvalidSplit(
                "give either private_labels+public_labels or private_index_file+public_index_file".into(),
            ))
        }
    };
    if private_ids.is_empty() || public_ids.is_empty() {
        return Err(Error::InvalidSplit(format!(
            "empty split ({} private, {} public)",
            private_ids.len(),
            public_ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    private_ids.shuffle(&mut rng);
    public_ids.shuffle(&mut rng);

    let private = relabel(&pool.select(&private_ids), &class_labels)?;
    let public = pool.select(&public_ids).with_labels(None)?;
    let heldout_private = match heldout {
        Some(h) => {
            let hl = h.labels().unwrap_or(&[]);
            let idx: Vec<usize> = (0..h.len()).filter(|&i| class_labels.contains(&hl[i])).collect();
            (!idx.is_empty())
                .then(|| relabel(&h.select(&idx), &class_labels))
                .transpose()?
        }
        None => None,
    };
    Ok(DatasetSplit {
        dataset: name.to_string(),
        private,
        private_ids,
        public,
        public_ids,
        class_labels,
        heldout_private,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> DatasetConfig {
        DatasetConfig::synthetic(SyntheticSpec::Sequence {
            count: 10,
            classes: 2,
            side: 2,
        })
    }

    #[test]
    fn ten_image_toy_splits_five_five() {
        let split = load_split(&toy(), &SplitSpec::by_labels([0], [1]), 3).unwrap();
        assert_eq!(split.private.len(), 5);
        assert_eq!(split.public.len(), 5);
        assert_eq!(split.k(), 1);
        assert!(split.public.labels().is_none());
        assert!(split.private_ids.iter().all(|i| !split.public_ids.contains(i)));
        assert!(split.private.labels().unwrap().iter().all(|&l| l == 0));
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = SplitSpec::by_labels([0], [1]);
        let a = load_split(&toy(), &spec, 9).unwrap();
        let b = load_split(&toy(), &spec, 9).unwrap();
        assert_eq!(a.private_ids, b.private_ids);
        assert_eq!(a.public_ids, b.public_ids);
        assert_eq!(a.private, b.private);
    }

    #[test]
    fn rejects_overlap_empty_and_unknown() {
        assert!(matches!(
            load_split(&toy(), &SplitSpec::by_labels([0, 1], [1]), 0),
            Err(Error::InvalidSplit(_))
        ));
        assert!(matches!(
            load_split(&toy(), &SplitSpec::by_labels([0], [7]), 0),
            Err(Error::InvalidSplit(_))
        ));
        let mut cfg = toy();
        cfg.name = "imagenet-1m".into();
        assert!(matches!(
            load_split(&cfg, &SplitSpec::by_labels([0], [1]), 0),
            Err(Error::UnknownDataset(_))
        ));
        assert!(load_split(&toy(), &SplitSpec::default(), 0).is_err());
    }

    #[test]
    fn index_file_split() {
        let dir = tempfile::tempdir().unwrap();
        let pf = dir.path().join("private.txt");
        let uf = dir.path().join("public.txt");
        std::fs::write(&pf, "0\n2\n4\n").unwrap();
        std::fs::write(&uf, "1\n3\n").unwrap();
        let spec = SplitSpec {
            private_index_file: Some(pf.clone()),
            public_index_file: Some(uf.clone()),
            ..Default::default()
        };
        let split = load_split(&toy(), &spec, 0).unwrap();
        assert_eq!(split.private.len(), 3);
        assert_eq!(split.public.len(), 2);
        std::fs::write(&uf, "1\n2\n").unwrap();
        assert!(load_split(&toy(), &spec, 0).is_err());
    }

    #[test]
    fn mnist_split_counts_match_protocol() {
        let root = crate::testing::mnist_root();
        let Some(root) = root else {
            eprintln!("skipping: MNIST files not found");
            return;
        };
        let cfg = DatasetConfig {
            name: "mnist".into(),
            data_root: Some(root),
            image_shape: None,
            synthetic: None,
        };
        let split = load_split(&cfg, &SplitSpec::by_labels([0, 1, 2, 3, 4], [5, 6, 7, 8, 9]), 0).unwrap();
        assert_eq!(split.private.len(), 30_596);
        assert_eq!(split.public.len(), 29_404);
        assert_eq!(split.image_shape(), ImageShape::new(1, 32, 32));
        assert!(split.private.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
