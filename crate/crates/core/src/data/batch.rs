use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel-major image geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!("non-positive image shape {self}")));
        }
        Ok(())
    }
}

impl std::fmt::Display for ImageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// A batch of images with pixel intensities in `[0, 1]`, stored as a flat
/// `N x C x H x W` buffer, plus optional zero-based class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    shape: ImageShape,
    values: Vec<f32>,
    labels: Option<Vec<usize>>,
}

impl ImageBatch {
    pub fn new(shape: ImageShape, values: Vec<f32>, labels: Option<Vec<usize>>) -> Result<Self> {
        shape.validate()?;
        if values.len() % shape.numel() != 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("multiple of {}", shape.numel()),
                actual: values.len().to_string(),
            });
        }
        let n = values.len() / shape.numel();
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::ShapeMismatch {
                    expected: format!("{n} labels"),
                    actual: l.len().to_string(),
                });
            }
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            shape,
            values,
            labels,
        })
    }

    pub fn empty(shape: ImageShape) -> Self {
        Self {
            shape,
            values: Vec::new(),
            labels: None,
        }
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.shape.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.shape.numel();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn with_labels(mut self, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != self.len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} labels", self.len()),
                    actual: l.len().to_string(),
                });
            }
        }
        self.labels = labels;
        Ok(self)
    }

    /// Checks every label is a valid class index for `k` classes.
    pub fn check_labels(&self, k: usize) -> Result<()> {
        if let Some(l) = &self.labels {
            if let Some(&bad) = l.iter().find(|&&l| l >= k) {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    classes: k,
                });
            }
        }
        Ok(())
    }

    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        let n = self.shape.numel();
        let mut values = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            values.extend_from_slice(self.image(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        ImageBatch {
            shape: self.shape,
            values,
            labels,
        }
    }

    pub fn concat(&self, other: &ImageBatch) -> Result<ImageBatch> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.to_string(),
                actual: other.shape.to_string(),
            });
        }
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        let labels = match (&self.labels, &other.labels) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        Ok(ImageBatch {
            shape: self.shape,
            values,
            labels,
        })
    }

    /// Images `start..end` as an `(N, C, H, W)` f32 tensor.
    pub fn to_tensor(&self, start: usize, end: usize, device: &Device) -> Result<Tensor> {
        let n = self.shape.numel();
        let s = self.shape;
        Ok(Tensor::from_slice(
            &self.values[start * n..end * n],
            (end - start, s.channels, s.height, s.width),
            device,
        )?)
    }

    pub fn from_tensor(t: &Tensor, labels: Option<Vec<usize>>) -> Result<ImageBatch> {
        let (_, c, h, w) = t.dims4()?;
        let values = t
            .to_dtype(candle_core::DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        ImageBatch::new(ImageShape::new(c, h, w), values, labels)
    }
}
