//! Multi-scale input pyramid and scale alignment of auxiliary feature maps.
//!
//! Resizing uses bilinear interpolation with half-pixel centres
//! (`align_corners = false`): output pixel `o` samples source coordinate
//! `(o + 0.5) * in / out - 0.5`, clamped at the leading border. The scaled
//! side length for factor `k` is `round(k * side)` with halves rounded away
//! from zero.

use crate::autograd::{Tape, Var};
use crate::encoder::FeatureMap;
use crate::error::{CodError, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Scale factor of the main (reference) input.
pub const MAIN_SCALE: f64 = 1.0;

/// Weight of each pooling branch in [`align_scale`]: the output is
/// `ALIGN_MIX * max + (1 - ALIGN_MIX) * avg`.
pub const ALIGN_MIX: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PyramidOptions {
    /// Accept factors below 1.0 (needed to reproduce the 0.5x baseline).
    pub allow_downscale: bool,
    /// Smallest accepted base height/width.
    pub min_side: usize,
}

impl Default for PyramidOptions {
    fn default() -> Self {
        Self {
            allow_downscale: false,
            min_side: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePyramid {
    base: Tensor,
    scaled: Vec<(f64, Tensor)>,
}

impl ImagePyramid {
    pub fn base(&self) -> &Tensor {
        &self.base
    }

    pub fn scales(&self) -> impl Iterator<Item = f64> + '_ {
        self.scaled.iter().map(|(k, _)| *k)
    }

    pub fn get(&self, scale: f64) -> Option<&Tensor> {
        self.scaled.iter().find(|(k, _)| *k == scale).map(|(_, t)| t)
    }

    pub fn levels(&self) -> &[(f64, Tensor)] {
        &self.scaled
    }
}

/// Side length after scaling by `k`.
pub fn scaled_len(len: usize, k: f64) -> usize {
    ((k * len as f64).round() as usize).max(1)
}

pub fn validate_scales(scales: &[f64], allow_downscale: bool) -> Result<()> {
    if !scales.contains(&MAIN_SCALE) {
        return Err(CodError::InvalidInput(format!(
            "scales {scales:?} must contain the main scale 1.0"
        )));
    }
    for (i, &k) in scales.iter().enumerate() {
        if !k.is_finite() || k <= 0.0 {
            return Err(CodError::InvalidInput(format!("scale {k} is not a positive factor")));
        }
        if k < 1.0 && !allow_downscale {
            return Err(CodError::InvalidInput(format!(
                "scale {k} < 1.0 requires allow_downscale"
            )));
        }
        if scales[..i].contains(&k) {
            return Err(CodError::InvalidInput(format!("duplicate scale {k}")));
        }
    }
    Ok(())
}

/// Resize a `(B, 3, H, W)` image batch to every factor in `scales`.
pub fn build_pyramid(image: &Tensor, scales: &[f64]) -> Result<ImagePyramid> {
    build_pyramid_with(image, scales, PyramidOptions::default())
}

pub fn build_pyramid_with(image: &Tensor, scales: &[f64], opts: PyramidOptions) -> Result<ImagePyramid> {
    let [_, c, h, w] = image.shape();
    if c != 3 {
        return Err(CodError::Shape(format!("expected 3 colour channels, got {c}")));
    }
    if h < opts.min_side || w < opts.min_side {
        return Err(CodError::InvalidInput(format!(
            "image {h}x{w} is smaller than the minimum side {}",
            opts.min_side
        )));
    }
    if let Some(v) = image.data().iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
        return Err(CodError::InvalidInput(format!(
            "pixel value {v} is not a finite value in [0, 1]"
        )));
    }
    validate_scales(scales, opts.allow_downscale)?;
    let scaled = scales
        .iter()
        .map(|&k| {
            let t = if k == MAIN_SCALE {
                image.clone()
            } else {
                ops::resize_bilinear(image, (scaled_len(h, k), scaled_len(w, k)))?
            };
            Ok((k, t))
        })
        .collect::<Result<_>>()?;
    Ok(ImagePyramid {
        base: image.clone(),
        scaled,
    })
}

fn check_align(src: (usize, usize), target: (usize, usize)) -> Result<()> {
    if target.0 > src.0 || target.1 > src.1 || target.0 == 0 || target.1 == 0 {
        return Err(CodError::Shape(format!(
            "cannot align {}x{} to {}x{}: alignment only down-samples",
            src.0, src.1, target.0, target.1
        )));
    }
    Ok(())
}

/// Down-sample an auxiliary-scale feature map to `target_hw` with the mean
/// of adaptive max pooling and adaptive average pooling.
pub fn align_scale(f_aux: &FeatureMap, target_hw: (usize, usize)) -> Result<FeatureMap> {
    check_align(f_aux.data.hw(), target_hw)?;
    let avg = ops::adaptive_avg_pool(&f_aux.data, target_hw)?;
    let (max, _) = ops::adaptive_max_pool(&f_aux.data, target_hw)?;
    let data = max.zip_map(&avg, |m, a| ALIGN_MIX * m + (1.0 - ALIGN_MIX) * a)?;
    Ok(FeatureMap {
        data,
        stage: f_aux.stage,
        scale: f_aux.scale,
    })
}

/// Differentiable [`align_scale`] on a recorded value.
pub fn align_scale_var(tape: &Tape, x: Var, target_hw: (usize, usize)) -> Result<Var> {
    check_align(tape.hw(x), target_hw)?;
    if tape.hw(x) == target_hw {
        return Ok(x);
    }
    let max = tape.adaptive_max_pool(x, target_hw)?;
    let avg = tape.adaptive_avg_pool(x, target_hw)?;
    let max = tape.scale(max, ALIGN_MIX);
    let avg = tape.scale(avg, 1.0 - ALIGN_MIX);
    tape.add(max, avg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize) -> Tensor {
        Tensor::from_fn([1, 3, h, w], |_, c, y, x| ((c * 31 + y * 7 + x * 3) % 17) as f64 / 16.0)
    }

    #[test]
    fn pyramid_sizes_follow_rounded_factors() {
        let p = build_pyramid(&image(64, 64), &[1.0, 1.5, 2.0]).unwrap();
        let sizes: Vec<_> = p.levels().iter().map(|(_, t)| t.hw()).collect();
        assert_eq!(sizes, vec![(64, 64), (96, 96), (128, 128)]);
        let odd = build_pyramid(&image(33, 35), &[1.0, 1.5]).unwrap();
        assert_eq!(odd.get(1.5).unwrap().hw(), (50, 53));
    }

    #[test]
    fn main_scale_is_identity() {
        let img = image(40, 32);
        let p = build_pyramid(&img, &[1.0]).unwrap();
        assert_eq!(p.get(1.0).unwrap(), &img);
        assert_eq!(p.base(), &img);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Tensor::full([1, 3, 32, 32], 0.37);
        let p = build_pyramid(&img, &[1.0, 1.5, 2.0]).unwrap();
        for (_, t) in p.levels() {
            assert!(t.data().iter().all(|&v| v == 0.37));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut img = image(32, 32);
        assert!(build_pyramid(&img, &[1.0, 0.5]).is_err());
        assert!(build_pyramid(&img, &[1.5, 2.0]).is_err());
        assert!(build_pyramid(&image(16, 32), &[1.0]).is_err());
        img.data_mut()[5] = f64::NAN;
        assert!(build_pyramid(&img, &[1.0]).is_err());
        let ok = PyramidOptions {
            allow_downscale: true,
            min_side: 32,
        };
        let p = build_pyramid_with(&image(64, 64), &[1.0, 0.5, 1.5], ok).unwrap();
        assert_eq!(p.get(0.5).unwrap().hw(), (32, 32));
    }

    #[test]
    fn align_rejects_upsampling() {
        let f = FeatureMap {
            data: Tensor::zeros([1, 2, 4, 4]),
            stage: 1,
            scale: 1.5,
        };
        assert!(align_scale(&f, (5, 4)).is_err());
    }
}
