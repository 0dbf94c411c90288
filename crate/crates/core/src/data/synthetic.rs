//! Small generated datasets for toy experiments and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{ImageBatch, ImageShape};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticSpec {
    /// Class `k` is a solid image at intensity `(k + 0.5) / classes`, with a
    /// per-image uniform offset of at most `jitter`.
    Intensity {
        classes: usize,
        per_class: usize,
        side: usize,
        #[serde(default = "one")]
        channels: usize,
        #[serde(default)]
        jitter: f32,
        #[serde(default)]
        seed: u64,
    },
    /// Image `i` has label `i % classes` and solid intensity `i / count`.
    Sequence {
        count: usize,
        classes: usize,
        side: usize,
    },
}

fn one() -> usize {
    1
}

impl SyntheticSpec {
    pub fn shape(&self) -> ImageShape {
        match *self {
            SyntheticSpec::Intensity { side, channels, .. } => ImageShape::new(channels, side, side),
            SyntheticSpec::Sequence { side, .. } => ImageShape::new(1, side, side),
        }
    }

    pub fn level(classes: usize, k: usize) -> f32 {
        (k as f32 + 0.5) / classes as f32
    }

    /// Generates the pool; `part` 0 is the training pool, 1 the test pool.
    pub fn generate(&self, part: u64) -> Result<ImageBatch> {
        let shape = self.shape();
        let mut values = Vec::new();
        let mut labels = Vec::new();
        match *self {
            SyntheticSpec::Intensity {
                classes,
                per_class,
                jitter,
                seed,
                ..
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (part << 32));
                for i in 0..classes * per_class {
                    let k = i % classes;
                    let offset = if jitter > 0.0 { rng.gen_range(-jitter..=jitter) } else { 0.0 };
                    let v = (Self::level(classes, k) + offset).clamp(0.0, 1.0);
                    values.extend(std::iter::repeat(v).take(shape.numel()));
                    labels.push(k);
                }
            }
            SyntheticSpec::Sequence { count, classes, .. } => {
                for i in 0..count {
                    let v = i as f32 / count as f32;
                    values.extend(std::iter::repeat(v).take(shape.numel()));
                    labels.push(i % classes);
                }
            }
        }
        ImageBatch::new(shape, values, Some(labels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intensity_classes_are_solid_levels() {
        let spec = SyntheticSpec::Intensity {
            classes: 4,
            per_class: 3,
            side: 4,
            channels: 1,
            jitter: 0.0,
            seed: 0,
        };
        let b = spec.generate(0).unwrap();
        assert_eq!(b.len(), 12);
        for i in 0..b.len() {
            let k = b.labels().unwrap()[i];
            assert!(b.image(i).iter().all(|&v| v == SyntheticSpec::level(4, k)));
        }
    }
}
