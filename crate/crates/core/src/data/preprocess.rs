//! Center-crop and bilinear resize into the canonical `[0, 1]` image space.

use super::batch::{ImageBatch, ImageShape};
use crate::error::{Error, Result};

/// A decoded image before normalization. `pixels` is channel-major with
/// intensities in `[0, max_value]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub shape: ImageShape,
    pub pixels: Vec<f32>,
    pub max_value: f32,
}

impl RawImage {
    pub fn from_u8(shape: ImageShape, bytes: &[u8]) -> Self {
        Self {
            shape,
            pixels: bytes.iter().map(|&b| b as f32).collect(),
            max_value: 255.0,
        }
    }

    fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if self.pixels.len() != self.shape.numel() {
            return Err(Error::malformed(
                "image",
                format!("{} pixels for shape {}", self.pixels.len(), self.shape),
            ));
        }
        if !(self.max_value > 0.0) || self.pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::malformed("image", "non-finite pixel or scale"));
        }
        Ok(())
    }
}

/// Resizes one channel-major plane stack with half-pixel-centre bilinear
/// interpolation (no antialiasing). Same-size input is returned unchanged.
pub fn resize_bilinear(src: &[f32], from: ImageShape, height: usize, width: usize) -> Vec<f32> {
    if from.height == height && from.width == width {
        return src.to_vec();
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f32 / out as f32;
        (0..out)
            .map(|d| {
                let s = ((d as f32 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f32);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, s - lo as f32)
            })
            .collect()
    };
    let ys = axis(height, from.height);
    let xs = axis(width, from.width);
    let mut out = Vec::with_capacity(from.channels * height * width);
    for c in 0..from.channels {
        let plane = &src[c * from.pixels()..(c + 1) * from.pixels()];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let p = |y: usize, x: usize| plane[y * from.width + x];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

fn center_crop_square(img: &RawImage) -> (Vec<f32>, ImageShape) {
    let s = img.shape;
    let side = s.height.min(s.width);
    if side == s.height && side == s.width {
        return (img.pixels.clone(), s);
    }
    let top = (s.height - side) / 2;
    let left = (s.width - side) / 2;
    let mut out = Vec::with_capacity(s.channels * side * side);
    for c in 0..s.channels {
        for y in top..top + side {
            let row = c * s.pixels() + y * s.width;
            out.extend_from_slice(&img.pixels[row + left..row + left + side]);
        }
    }
    (out, ImageShape::new(s.channels, side, side))
}

fn convert_channels(pixels: Vec<f32>, shape: ImageShape, channels: usize) -> Result<Vec<f32>> {
    match (shape.channels, channels) {
        (a, b) if a == b => Ok(pixels),
        (1, 3) => Ok(pixels.repeat(3)),
        (3, 1) => {
            let n = shape.pixels();
            Ok((0..n)
                .map(|i| 0.299 * pixels[i] + 0.587 * pixels[n + i] + 0.114 * pixels[2 * n + i])
                .collect())
        }
        (a, b) => Err(Error::Config(format!("cannot convert {a} channels to {b}"))),
    }
}

fn preprocess_one(img: &RawImage, target: ImageShape) -> Result<Vec<f32>> {
    img.validate()?;
    let (cropped, shape) = if (img.shape.height, img.shape.width) == (target.height, target.width) {
        (img.pixels.clone(), img.shape)
    } else {
        center_crop_square(img)
    };
    let resized = resize_bilinear(&cropped, shape, target.height, target.width);
    let shape = ImageShape::new(shape.channels, target.height, target.width);
    let converted = convert_channels(resized, shape, target.channels)?;
    let max = img.max_value;
    Ok(converted
        .into_iter()
        .map(|p| (p / max).clamp(0.0, 1.0))
        .collect())
}

/// Center-crops each image to a square, resizes it to `target` and scales
/// intensities into `[0, 1]`.
pub fn preprocess(images: &[RawImage], target: ImageShape) -> Result<ImageBatch> {
    target.validate()?;
    let mut values = Vec::with_capacity(images.len() * target.numel());
    for img in images {
        values.extend(preprocess_one(img, target)?);
    }
    ImageBatch::new(target, values, None)
}

/// Re-applies preprocessing to an already normalized batch.
pub fn preprocess_batch(batch: &ImageBatch, target: ImageShape) -> Result<ImageBatch> {
    let raws: Vec<RawImage> = (0..batch.len())
        .map(|i| RawImage {
            shape: batch.shape(),
            pixels: batch.image(i).to_vec(),
            max_value: 1.0,
        })
        .collect();
    preprocess(&raws, target)?.with_labels(batch.labels().map(<[usize]>::to_vec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn face_sized_image_becomes_64_square() {
        let shape = ImageShape::new(3, 218, 178);
        let bytes: Vec<u8> = (0..shape.numel()).map(|i| (i * 31 % 256) as u8).collect();
        let out = preprocess(&[RawImage::from_u8(shape, &bytes)], ImageShape::new(3, 64, 64)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.values().len(), 3 * 64 * 64);
        assert!(out.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn target_shape_input_is_only_rescaled() {
        let shape = ImageShape::new(1, 4, 4);
        let bytes: Vec<u8> = (0..16).map(|i| i * 15).collect();
        let out = preprocess(&[RawImage::from_u8(shape, &bytes)], shape).unwrap();
        for (o, b) in out.values().iter().zip(&bytes) {
            assert_eq!(*o, *b as f32 / 255.0);
        }
    }

    #[test]
    fn constant_image_stays_constant() {
        let shape = ImageShape::new(1, 8, 8);
        let out = preprocess(&[RawImage::from_u8(shape, &[100; 64])], ImageShape::new(1, 4, 4)).unwrap();
        for v in out.values() {
            assert!((v - 100.0 / 255.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let shape = ImageShape::new(1, 2, 2);
        assert!(preprocess(&[RawImage::from_u8(shape, &[1, 2, 3])], shape).is_err());
        assert!(preprocess(&[], ImageShape::new(0, 2, 2)).is_err());
    }

    #[test]
    fn grayscale_to_rgb_replicates() {
        let shape = ImageShape::new(1, 2, 2);
        let out = preprocess(&[RawImage::from_u8(shape, &[0, 255, 0, 255])], ImageShape::new(3, 2, 2)).unwrap();
        assert_eq!(&out.values()[..4], &out.values()[4..8]);
    }

    proptest! {
        #[test]
        fn idempotent_on_preprocessed_batches(
            h in 2usize..40, w in 2usize..40, seed in any::<u64>(), side in 2usize..20,
        ) {
            let shape = ImageShape::new(1, h, w);
            let bytes: Vec<u8> = (0..shape.numel())
                .map(|i| ((i as u64).wrapping_mul(seed | 1) >> 7) as u8)
                .collect();
            let target = ImageShape::new(1, side, side);
            let once = preprocess(&[RawImage::from_u8(shape, &bytes)], target).unwrap();
            let twice = preprocess_batch(&once, target).unwrap();
            for (a, b) in once.values().iter().zip(twice.values()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
