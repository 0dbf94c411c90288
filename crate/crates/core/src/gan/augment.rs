//! Random image transforms applied between the generator and the target.
//!
//! Geometric transforms (resized crop, horizontal flip, rotation) are
//! composed into one affine map per image and applied as a bilinear warp
//! with edge clamping; colour jitter follows. Everything is built from
//! differentiable tensor ops so gradients reach the generator.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    /// Range of the kept area fraction.
    pub scale: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterSpec {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub crop: Option<CropSpec>,
    /// Probability of a horizontal flip.
    pub flip: Option<f64>,
    /// Maximum absolute rotation in degrees.
    pub rotation: Option<f64>,
    pub jitter: Option<JitterSpec>,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            crop: Some(CropSpec { scale: (0.8, 1.0) }),
            flip: Some(0.5),
            rotation: Some(10.0),
            jitter: Some(JitterSpec {
                brightness: 0.2,
                contrast: 0.2,
                saturation: 0.2,
            }),
        }
    }
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self {
            crop: None,
            flip: None,
            rotation: None,
            jitter: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("augmentation: {m}")));
        if let Some(c) = self.crop {
            if !(0.0 < c.scale.0 && c.scale.0 <= c.scale.1 && c.scale.1 <= 1.0) {
                return bad(format!("crop scale {:?} must satisfy 0 < lo <= hi <= 1", c.scale));
            }
        }
        if let Some(p) = self.flip {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("flip probability {p}"));
            }
        }
        if let Some(r) = self.rotation {
            if !(r.is_finite() && r >= 0.0) {
                return bad(format!("rotation {r}"));
            }
        }
        if let Some(j) = self.jitter {
            if [j.brightness, j.contrast, j.saturation].iter().any(|v| !(0.0..1.0).contains(v)) {
                return bad(format!("jitter strengths {j:?} must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

/// Transform drawn for one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageTransform {
    /// Maps output coordinates in `[-1, 1]^2` to input coordinates:
    /// `src = A * dst + t` with `A = [[a, b], [c, d]]`, `t = (tx, ty)`.
    pub affine: [f64; 6],
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl ImageTransform {
    pub const IDENTITY: ImageTransform = ImageTransform {
        affine: [1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
    };

    fn is_geometric_identity(&self) -> bool {
        self.affine == Self::IDENTITY.affine
    }
}

/// Draws one transform per image.
pub fn sample_transforms(policy: &AugmentationPolicy, n: usize, rng: &mut impl Rng) -> Vec<ImageTransform> {
    (0..n).map(|_| sample_one(policy, rng)).collect()
}

fn sample_one(policy: &AugmentationPolicy, rng: &mut impl Rng) -> ImageTransform {
    // output -> crop window -> flip -> rotate, all in normalized coordinates
    let (mut half, mut cx, mut cy) = (1.0, 0.0, 0.0);
    if let Some(c) = policy.crop {
        let area = if c.scale.0 < c.scale.1 { rng.gen_range(c.scale.0..=c.scale.1) } else { c.scale.0 };
        half = area.sqrt();
        let slack = 1.0 - half;
        cx = if slack > 0.0 { rng.gen_range(-slack..=slack) } else { 0.0 };
        cy = if slack > 0.0 { rng.gen_range(-slack..=slack) } else { 0.0 };
    }
    let flip = policy.flip.is_some_and(|p| rng.gen_bool(p));
    let theta = match policy.rotation {
        Some(r) if r > 0.0 => rng.gen_range(-r..=r).to_radians(),
        _ => 0.0,
    };
    let sx = if flip { -half } else { half };
    let (s, c) = theta.sin_cos();
    // src = R(theta) * (diag(sx, half) * dst + (cx, cy))
    let affine = if theta == 0.0 {
        [sx, 0.0, 0.0, half, cx, cy]
    } else {
        [c * sx, -s * half, s * sx, c * half, c * cx - s * cy, s * cx + c * cy]
    };
    let mut factor = |strength: f64| {
        if strength > 0.0 {
            rng.gen_range(1.0 - strength..=1.0 + strength)
        } else {
            1.0
        }
    };
    let (brightness, contrast, saturation) = match policy.jitter {
        Some(j) => (factor(j.brightness), factor(j.contrast), factor(j.saturation)),
        None => (1.0, 1.0, 1.0),
    };
    ImageTransform {
        affine,
        brightness,
        contrast,
        saturation,
    }
}

/// Snaps values within `1e-6` of an integer so exact permutations of the
/// pixel grid (flips) copy pixels without interpolation error.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-6 {
        r
    } else {
        v
    }
}

/// Source pixel indices and bilinear weights for the four neighbours of
/// every output pixel of one image.
fn warp_table(t: &ImageTransform, h: usize, w: usize) -> ([Vec<u32>; 4], [Vec<f32>; 4]) {
    let [a, b, c, d, tx, ty] = t.affine;
    let mut idx: [Vec<u32>; 4] = Default::default();
    let mut wts: [Vec<f32>; 4] = Default::default();
    for i in 0..h {
        let v = (2 * i + 1) as f64 / h as f64 - 1.0;
        for j in 0..w {
            let u = (2 * j + 1) as f64 / w as f64 - 1.0;
            let su = a * u + b * v + tx;
            let sv = c * u + d * v + ty;
            // pixel-centre convention; clamp to the border
            let px = snap(((su + 1.0) * w as f64 - 1.0) / 2.0).clamp(0.0, (w - 1) as f64);
            let py = snap(((sv + 1.0) * h as f64 - 1.0) / 2.0).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (px.floor(), py.floor());
            let (fx, fy) = (px - x0, py - y0);
            let (x0, y0) = (x0 as usize, y0 as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let corners = [
                (y0, x0, (1.0 - fx) * (1.0 - fy)),
                (y0, x1, fx * (1.0 - fy)),
                (y1, x0, (1.0 - fx) * fy),
                (y1, x1, fx * fy),
            ];
            for (k, (y, x, wt)) in corners.into_iter().enumerate() {
                idx[k].push((y * w + x) as u32);
                wts[k].push(wt as f32);
            }
        }
    }
    (idx, wts)
}

/// Applies per-image transforms to `x` of shape `(N, C, H, W)` with values
/// in `[0, 1]`.
pub fn apply_transforms(x: &Tensor, transforms: &[ImageTransform]) -> Result<Tensor> {
    let (n, ch, h, w) = x.dims4()?;
    if transforms.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} transforms"),
            actual: transforms.len().to_string(),
        });
    }
    let mut out = if transforms.iter().all(ImageTransform::is_geometric_identity) {
        x.clone()
    } else {
        // bilinear weights are rounded to f32 and may sum to just above one
        warp(x, transforms, ch, h, w)?.clamp(0f32, 1f32)?
    };
    if transforms
        .iter()
        .any(|t| t.brightness != 1.0 || t.contrast != 1.0 || t.saturation != 1.0)
    {
        out = jitter(&out, transforms, ch)?;
        out = out.clamp(0f32, 1f32)?;
    }
    Ok(out)
}

fn warp(x: &Tensor, transforms: &[ImageTransform], ch: usize, h: usize, w: usize) -> Result<Tensor> {
    let n = transforms.len();
    let hw = h * w;
    let mut idx: [Vec<u32>; 4] = Default::default();
    let mut wts: [Vec<f32>; 4] = Default::default();
    for t in transforms {
        let (i, wt) = warp_table(t, h, w);
        for k in 0..4 {
            for _ in 0..ch {
                idx[k].extend_from_slice(&i[k]);
                wts[k].extend_from_slice(&wt[k]);
            }
        }
    }
    let flat = x.reshape((n * ch, hw))?;
    let dev = Device::Cpu;
    let mut acc: Option<Tensor> = None;
    for k in 0..4 {
        let index = Tensor::from_vec(std::mem::take(&mut idx[k]), (n * ch, hw), &dev)?;
        let weight = Tensor::from_vec(std::mem::take(&mut wts[k]), (n * ch, hw), &dev)?.to_dtype(x.dtype())?;
        let term = (flat.gather(&index, 1)? * weight)?;
        acc = Some(match acc {
            Some(a) => (a + term)?,
            None => term,
        });
    }
    Ok(acc.expect("four corners").reshape((n, ch, h, w))?)
}

fn per_image(values: Vec<f32>, dtype: DType) -> Result<Tensor> {
    let n = values.len();
    Ok(Tensor::from_vec(values, (n, 1, 1, 1), &Device::Cpu)?.to_dtype(dtype)?)
}

fn grayscale(x: &Tensor, ch: usize) -> Result<Tensor> {
    if ch == 3 {
        let r = x.narrow(1, 0, 1)?;
        let g = x.narrow(1, 1, 1)?;
        let b = x.narrow(1, 2, 1)?;
        Ok(((r * 0.299)? + (g * 0.587)? + (b * 0.114)?)?)
    } else {
        Ok(x.mean_keepdim(1)?)
    }
}

fn jitter(x: &Tensor, transforms: &[ImageTransform], ch: usize) -> Result<Tensor> {
    let dt = x.dtype();
    let b = per_image(transforms.iter().map(|t| t.brightness as f32).collect(), dt)?;
    let c = per_image(transforms.iter().map(|t| t.contrast as f32).collect(), dt)?;
    let x = x.broadcast_mul(&b)?;
    let mean = grayscale(&x, ch)?.mean_keepdim(2)?.mean_keepdim(3)?;
    let x = x.broadcast_sub(&mean)?.broadcast_mul(&c)?.broadcast_add(&mean)?;
    if ch != 3 {
        return Ok(x);
    }
    let s = per_image(transforms.iter().map(|t| t.saturation as f32).collect(), dt)?;
    let gray = grayscale(&x, ch)?;
    Ok(x.broadcast_sub(&gray)?.broadcast_mul(&s)?.broadcast_add(&gray)?)
}

/// Samples a transform per image and applies it.
pub fn augment_tensor(x: &Tensor, policy: &AugmentationPolicy, rng: &mut impl Rng) -> Result<Tensor> {
    if policy.is_identity() {
        return Ok(x.clone());
    }
    let t = sample_transforms(policy, x.dim(0)?, rng);
    apply_transforms(x, &t)
}

pub fn apply_augmentations(batch: &ImageBatch, policy: &AugmentationPolicy, rng: &mut impl Rng) -> Result<ImageBatch> {
    if batch.is_empty() {
        return Ok(batch.clone());
    }
    let x = batch.to_tensor(0, batch.len(), &Device::Cpu)?;
    let y = augment_tensor(&x, policy, rng)?;
    ImageBatch::from_tensor(&y, batch.labels().map(<[usize]>::to_vec))
}
