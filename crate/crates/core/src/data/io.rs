use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use super::{ClassPalette, SegSample};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// `1 × 3 × H × W` tensor with values scaled to `[0, 1]`.
pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
    })
}

/// Inverse of [`image_to_tensor`] for the first batch entry; values are
/// clamped to `[0, 1]` and rounded to 8 bits.
pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    if s.c != 3 {
        return Err(Error::data(format!("expected a 3-channel image, got {s}")));
    }
    Ok(RgbImage::from_fn(s.w as u32, s.h as u32, |x, y| {
        let px = |c| (t.get(0, c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    }))
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| Error::file(path, e.to_string()))
}

pub fn save_image(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::file(path, e.to_string()))
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Reads `root/images/*.png` with the same-named masks from `root/masks/`,
/// in lexicographic file-name order.
pub fn load_dataset(root: &Path, palette: &ClassPalette) -> Result<Vec<SegSample>> {
    let (img_dir, mask_dir) = (root.join("images"), root.join("masks"));
    let images = png_names(&img_dir)?;
    let masks = png_names(&mask_dir)?;
    if let Some(orphan) = masks.iter().find(|m| images.binary_search(m).is_err()) {
        return Err(Error::file(mask_dir.join(orphan), "mask has no matching image"));
    }
    if images.is_empty() {
        log::warn!("dataset {} is empty", root.display());
    }
    let mut samples = Vec::with_capacity(images.len());
    for name in images {
        let mask_path = mask_dir.join(&name);
        if masks.binary_search(&name).is_err() {
            return Err(Error::file(mask_path, "missing mask for image"));
        }
        let img = load_image(&img_dir.join(&name))?;
        let mask = palette
            .decode_mask(&load_image(&mask_path)?)
            .map_err(|e| Error::file(&mask_path, e.to_string()))?;
        let id = name[..name.len() - 4].to_string();
        let sample = SegSample::new(id, image_to_tensor(&img), mask)
            .map_err(|e| Error::file(img_dir.join(&name), e.to_string()))?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Writes samples in the layout read by [`load_dataset`].
pub fn save_dataset(root: &Path, samples: &[SegSample], palette: &ClassPalette) -> Result<Vec<PathBuf>> {
    let (img_dir, mask_dir) = (root.join("images"), root.join("masks"));
    for d in [&img_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut written = Vec::with_capacity(samples.len());
    for s in samples {
        let name = format!("{}.png", s.id);
        let img_path = img_dir.join(&name);
        save_image(&tensor_to_image(&s.image)?, &img_path)?;
        save_image(&palette.encode_mask(&s.mask)?, &mask_dir.join(&name))?;
        written.push(img_path);
    }
    Ok(written)
}
