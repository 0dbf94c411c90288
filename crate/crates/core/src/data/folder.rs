//! Image-folder datasets: `<root>/<class name>/<image file>`, classes in
//! lexicographic directory order.

use std::path::Path;

use super::batch::ImageShape;
use super::preprocess::RawImage;
use crate::error::{Error, Result};

pub fn decode_image(bytes: &[u8]) -> Result<RawImage> {
    let img = image::load_from_memory(bytes)?.to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut pixels = vec![0f32; 3 * w * h];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            pixels[c * w * h + i] = p.0[c] as f32;
        }
    }
    Ok(RawImage {
        shape: ImageShape::new(3, h, w),
        pixels,
        max_value: 255.0,
    })
}

pub fn load(root: &Path) -> Result<(Vec<RawImage>, Vec<usize>)> {
    let mut classes: Vec<_> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    classes.sort();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            let bytes = std::fs::read(&f).map_err(|e| Error::io(&f, e))?;
            images.push(decode_image(&bytes)?);
            labels.push(label);
        }
    }
    if images.is_empty() {
        return Err(Error::Empty(format!("no images under {}", root.display())));
    }
    Ok((images, labels))
}
