//! Reading and writing 8-bit images as tensors.
//!
//! Colour images become `(1, 3, H, W)` in `[0, 1]`; grayscale images become
//! `(1, 1, H, W)` with value `v / 255`; masks are grayscale images binarised
//! at `v >= 128`. Probability maps are written as grayscale PNGs with value
//! `round(255 p)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};

use crate::error::{CodError, Result};
use crate::tensor::Tensor;

pub const MASK_THRESHOLD: u8 = 128;

/// Whether `path` has an extension this module reads.
pub fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// Image files in `dir` keyed by file stem.
pub fn image_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CodError::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| CodError::io(dir, e))?.path();
        if is_image(&path) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| CodError::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Tensor::from_fn([1, 3, h as usize, w as usize], |_, c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

pub fn load_gray(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Tensor::from_fn([1, 1, h as usize, w as usize], |_, _, y, x| {
        img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0
    }))
}

pub fn load_mask(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Tensor::from_fn([1, 1, h as usize, w as usize], |_, _, y, x| {
        (img.get_pixel(x as u32, y as u32)[0] >= MASK_THRESHOLD) as u8 as f64
    }))
}

/// Quantise a `(1, 1, H, W)` map in `[0, 1]` to 8 bits.
pub fn to_gray8(map: &Tensor) -> Result<GrayImage> {
    let [b, c, h, w] = map.shape();
    if b != 1 || c != 1 {
        return Err(CodError::Shape(format!("expected a (1, 1, H, W) map, got {:?}", map.shape())));
    }
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = map.at(0, 0, y as usize, x as usize).clamp(0.0, 1.0);
        Luma([(255.0 * v).round() as u8])
    }))
}

pub fn save_gray(path: &Path, map: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CodError::io(dir, e))?;
    }
    to_gray8(map)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| CodError::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Save a `(1, 3, H, W)` image in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_rgb(path: &Path, img: &Tensor) -> Result<()> {
    let [b, c, h, w] = img.shape();
    if b != 1 || c != 3 {
        return Err(CodError::Shape(format!("expected a (1, 3, H, W) image, got {:?}", img.shape())));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CodError::io(dir, e))?;
    }
    let out = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch| (255.0 * img.at(0, ch, y as usize, x as usize).clamp(0.0, 1.0)).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    out.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| CodError::Image {
            path: path.to_path_buf(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_round_trip_quantises() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let map = Tensor::from_fn([1, 1, 3, 4], |_, _, y, x| (y * 4 + x) as f64 / 11.0);
        save_gray(&p, &map).unwrap();
        let back = load_gray(&p).unwrap();
        assert!(back.max_abs_diff(&map) <= 0.5 / 255.0 + 1e-12);
        let mask = load_mask(&p).unwrap();
        assert_eq!(mask.at(0, 0, 0, 0), 0.0);
        assert_eq!(mask.at(0, 0, 2, 3), 1.0);
    }

    #[test]
    fn rgb_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.png");
        let img = Tensor::from_fn([1, 3, 2, 2], |_, c, y, x| ((c + y + x) * 51) as f64 / 255.0);
        save_rgb(&p, &img).unwrap();
        assert!(load_rgb(&p).unwrap().max_abs_diff(&img) < 1e-12);
        assert!(is_image(&p) && !is_image(Path::new("a.txt")));
    }
}
