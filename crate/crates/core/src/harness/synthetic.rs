//! Procedural low-contrast scenes standing in for camouflage datasets.
//!
//! The background is smoothed noise around a random base colour. Objects are
//! star-shaped blobs, `r(theta) = r0 (1 + sum_k a_k cos(k theta + phi_k))`
//! with `sum |a_k| <= 0.15`, whose nominal diameter `2 r0` is
//! `object_scale * size`. Blob pixels carry the same texture shifted in
//! colour by `contrast`. Blob centres sit on pixel centres, blobs never touch
//! each other or the border, and every blob is one 4-connected component.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CodError, Result};
use crate::harness::dataset::{Dataset, Sample};
use crate::tensor::Tensor;

pub const MAX_RETRIES: usize = 100;
const HARMONIC_BUDGET: f64 = 0.15;
const TEXTURE_AMPLITUDE: f64 = 0.12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneMeta {
    pub n_objects: usize,
    /// Smallest object area as a fraction of the image.
    pub min_object_frac: f64,
    pub contrast: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// `(1, 3, size, size)` in `[0, 1]`.
    pub image: Tensor,
    /// `(1, 1, size, size)` binary.
    pub mask: Tensor,
    pub meta: SceneMeta,
}

fn check_args(size: usize, n_objects: usize, object_scale: f64, contrast: f64) -> Result<()> {
    if !(contrast > 0.0 && contrast <= 0.3) {
        return Err(CodError::InvalidInput(format!("contrast {contrast} outside (0, 0.3]")));
    }
    if !(object_scale > 0.0 && object_scale <= 0.3) {
        return Err(CodError::InvalidInput(format!("object_scale {object_scale} outside (0, 0.3]")));
    }
    if n_objects == 0 {
        return Err(CodError::InvalidInput("a scene needs at least one object".into()));
    }
    if size < 8 {
        return Err(CodError::InvalidInput(format!("scene size {size} is below 8")));
    }
    Ok(())
}

/// Separable box blur with wrap-around, applied in place.
fn box_blur(f: &mut [f64], size: usize, radius: usize) {
    let n = (2 * radius + 1) as f64;
    let mut tmp = vec![0.0; f.len()];
    for y in 0..size {
        for x in 0..size {
            let mut s = 0.0;
            for d in 0..=2 * radius {
                s += f[y * size + (x + size * 2 + d - radius) % size];
            }
            tmp[y * size + x] = s / n;
        }
    }
    for y in 0..size {
        for x in 0..size {
            let mut s = 0.0;
            for d in 0..=2 * radius {
                s += tmp[((y + size * 2 + d - radius) % size) * size + x];
            }
            f[y * size + x] = s / n;
        }
    }
}

/// Zero-mean, unit-variance smoothed noise.
fn noise_field(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let mut f: Vec<f64> = (0..size * size).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let radius = (size / 32).max(1);
    box_blur(&mut f, size, radius);
    box_blur(&mut f, size, radius);
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    let var = f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f.len() as f64;
    let sd = var.sqrt().max(1e-12);
    f.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    f
}

struct Blob {
    cy: f64,
    cx: f64,
    r0: f64,
    harmonics: Vec<(f64, f64)>,
}

impl Blob {
    fn radius(&self, theta: f64) -> f64 {
        let k0 = 2;
        self.r0
            * (1.0
                + self
                    .harmonics
                    .iter()
                    .enumerate()
                    .map(|(i, &(a, phi))| a * ((k0 + i) as f64 * theta + phi).cos())
                    .sum::<f64>())
    }

    fn max_radius(&self) -> f64 {
        self.r0 * (1.0 + self.harmonics.iter().map(|h| h.0.abs()).sum::<f64>())
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 + 0.5 - self.cy;
        let dx = x as f64 + 0.5 - self.cx;
        let d = (dy * dy + dx * dx).sqrt();
        d == 0.0 || d <= self.radius(dy.atan2(dx))
    }
}

/// 4-connected component sizes of a binary map.
pub fn component_sizes(mask: &[bool], h: usize, w: usize) -> Vec<usize> {
    components(mask, h, w).into_iter().map(|c| c.len()).collect()
}

/// 4-connected components as lists of flat indices, in scan order of their
/// first pixel.
pub fn components(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (y, x) = (i / w, i % w);
            let mut push = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

pub fn generate_scene(seed: u64, size: usize, n_objects: usize, object_scale: f64, contrast: f64) -> Result<SyntheticScene> {
    check_args(size, n_objects, object_scale, contrast)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r0 = object_scale * size as f64 / 2.0;
    let mut mask = vec![false; size * size];
    let mut areas = Vec::with_capacity(n_objects);
    for obj in 0..n_objects {
        let mut placed = false;
        for _ in 0..MAX_RETRIES {
            let mut budget = HARMONIC_BUDGET;
            let harmonics: Vec<(f64, f64)> = (0..3)
                .map(|_| {
                    let a = rng.gen_range(0.0..budget);
                    budget -= a;
                    (a, rng.gen_range(0.0..std::f64::consts::TAU))
                })
                .collect();
            let mut blob = Blob {
                cy: 0.0,
                cx: 0.0,
                r0,
                harmonics,
            };
            let margin = blob.max_radius().ceil() as usize + 1;
            if 2 * margin >= size {
                return Err(CodError::InvalidInput(format!(
                    "object_scale {object_scale} leaves no room in a {size}px scene"
                )));
            }
            blob.cy = rng.gen_range(margin..size - margin) as f64 + 0.5;
            blob.cx = rng.gen_range(margin..size - margin) as f64 + 0.5;
            let lo_y = (blob.cy - margin as f64).floor().max(0.0) as usize;
            let hi_y = ((blob.cy + margin as f64).ceil() as usize).min(size);
            let lo_x = (blob.cx - margin as f64).floor().max(0.0) as usize;
            let hi_x = ((blob.cx + margin as f64).ceil() as usize).min(size);
            let mut pixels = Vec::new();
            for y in lo_y..hi_y {
                for x in lo_x..hi_x {
                    if blob.contains(y, x) {
                        pixels.push(y * size + x);
                    }
                }
            }
            // Reject if any pixel (or any 8-neighbour of it) is taken.
            let clash = pixels.iter().any(|&i| {
                let (y, x) = ((i / size) as i64, (i % size) as i64);
                (-1..=1).any(|dy| {
                    (-1..=1).any(|dx| {
                        let (yy, xx) = (y + dy, x + dx);
                        (0..size as i64).contains(&yy)
                            && (0..size as i64).contains(&xx)
                            && mask[(yy * size as i64 + xx) as usize]
                    })
                })
            });
            if clash {
                continue;
            }
            let mut local = vec![false; size * size];
            pixels.iter().for_each(|&i| local[i] = true);
            if component_sizes(&local, size, size).len() != 1 {
                continue;
            }
            pixels.iter().for_each(|&i| mask[i] = true);
            areas.push(pixels.len());
            placed = true;
            break;
        }
        if !placed {
            return Err(CodError::InvalidInput(format!(
                "could not place object {} of {n_objects} without overlap after {MAX_RETRIES} attempts",
                obj + 1
            )));
        }
    }
    let fg = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
    if fg > 0.5 {
        return Err(CodError::InvalidInput(format!("foreground fraction {fg:.3} exceeds 0.5")));
    }

    let luminance = noise_field(&mut rng, size);
    let chroma: Vec<Vec<f64>> = (0..3).map(|_| noise_field(&mut rng, size)).collect();
    let base: Vec<f64> = (0..3).map(|_| rng.gen_range(0.3..0.7)).collect();
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let tint: Vec<f64> = (0..3).map(|_| rng.gen_range(0.7..1.0)).collect();
    let image = Tensor::from_fn([1, 3, size, size], |_, c, y, x| {
        let i = y * size + x;
        let tex = TEXTURE_AMPLITUDE * (0.7 * luminance[i] + 0.3 * chroma[c][i]);
        let shift = if mask[i] { sign * contrast * tint[c] } else { 0.0 };
        (base[c] + tex + shift).clamp(0.0, 1.0)
    });
    let mask_t = Tensor::from_fn([1, 1, size, size], |_, _, y, x| mask[y * size + x] as u8 as f64);
    Ok(SyntheticScene {
        image,
        mask: mask_t,
        meta: SceneMeta {
            n_objects,
            min_object_frac: *areas.iter().min().expect("at least one object") as f64 / (size * size) as f64,
            contrast,
        },
    })
}

/// Parameters of a synthetic scene set.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub count: usize,
    pub size: usize,
    pub n_objects: usize,
    pub object_scale: f64,
    pub contrast: f64,
    /// How many of the `count` scenes hold three tiny objects instead.
    pub tiny_scenes: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 10,
            size: 64,
            n_objects: 1,
            object_scale: 0.25,
            contrast: 0.1,
            tiny_scenes: 1,
        }
    }
}

pub const TINY_OBJECTS: usize = 3;
pub const TINY_SCALE: f64 = 0.05;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        check_args(self.size, self.n_objects, self.object_scale, self.contrast)?;
        if self.count == 0 {
            return Err(CodError::InvalidInput("scene count must be positive".into()));
        }
        if self.tiny_scenes > self.count {
            return Err(CodError::InvalidInput("more tiny scenes than scenes".into()));
        }
        Ok(())
    }

    /// Scene `i` of the set; the last `tiny_scenes` scenes are tiny-object
    /// scenes.
    pub fn scene(&self, seed: u64, i: usize) -> Result<SyntheticScene> {
        let s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
        if i >= self.count - self.tiny_scenes {
            generate_scene(s, self.size, TINY_OBJECTS, TINY_SCALE, self.contrast)
        } else {
            generate_scene(s, self.size, self.n_objects, self.object_scale, self.contrast)
        }
    }

    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        self.validate()?;
        let samples = (0..self.count)
            .map(|i| {
                let sc = self.scene(seed, i)?;
                Ok(Sample {
                    name: format!("scene_{i:04}"),
                    image: sc.image,
                    mask: sc.mask,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fg(mask: &Tensor) -> Vec<bool> {
        mask.data().iter().map(|&v| v == 1.0).collect()
    }

    #[test]
    fn single_object_is_one_component() {
        for seed in 0..20 {
            let sc = generate_scene(seed, 64, 1, 0.2, 0.1).unwrap();
            assert_eq!(component_sizes(&fg(&sc.mask), 64, 64).len(), 1);
            let frac = sc.mask.mean();
            assert!(frac > 0.0 && frac <= 0.5);
        }
    }

    #[test]
    fn tiny_objects_regime() {
        for seed in 0..20 {
            let sc = generate_scene(seed, 64, 3, 0.05, 0.05).unwrap();
            let sizes = component_sizes(&fg(&sc.mask), 64, 64);
            assert_eq!(sizes.len(), 3, "seed {seed}");
            assert!(sizes.iter().all(|&s| (s as f64) < 0.0025 * 4096.0), "seed {seed}: {sizes:?}");
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_scene(7, 48, 2, 0.2, 0.1).unwrap();
        let b = generate_scene(7, 48, 2, 0.2, 0.1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_scene(8, 48, 2, 0.2, 0.1).unwrap());
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(generate_scene(0, 64, 1, 0.2, 0.0).is_err());
        assert!(generate_scene(0, 64, 1, 0.2, 0.31).is_err());
        assert!(generate_scene(0, 64, 1, 0.35, 0.1).is_err());
        assert!(generate_scene(0, 64, 0, 0.2, 0.1).is_err());
        assert!(generate_scene(0, 64, 60, 0.3, 0.1).is_err());
    }

    #[test]
    fn pixels_in_unit_range() {
        let sc = generate_scene(3, 64, 2, 0.3, 0.3).unwrap();
        assert!(sc.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
