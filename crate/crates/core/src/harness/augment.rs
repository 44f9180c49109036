//! Training-time augmentation of image/mask pairs.
//!
//! Rotation is a multiple of 90 degrees followed by a small angle in
//! `[-10, 10]` degrees; pixels mapped from outside the frame are reflected
//! back in. Images are resampled bilinearly and masks by nearest neighbour,
//! so masks stay binary.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CodError, Result};
use crate::tensor::Tensor;

pub const MAX_SMALL_ANGLE_DEG: f64 = 10.0;
pub const JITTER: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentFlags {
    pub flip: bool,
    pub rotate: bool,
    pub color_jitter: bool,
}

impl AugmentFlags {
    pub fn none() -> Self {
        Self {
            flip: false,
            rotate: false,
            color_jitter: false,
        }
    }

    pub fn any(&self) -> bool {
        self.flip || self.rotate || self.color_jitter
    }
}

pub struct Augmenter {
    flags: AugmentFlags,
    rng: ChaCha8Rng,
    calls: Cell<usize>,
}

/// Mirror `t` into `[0, n - 1]` without repeating the edge sample.
fn reflect(mut t: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let m = (n - 1) as f64;
    let period = 2.0 * m;
    t = t.rem_euclid(period);
    if t > m {
        period - t
    } else {
        t
    }
}

fn flip_h(t: &Tensor) -> Tensor {
    let [_, _, _, w] = t.shape();
    Tensor::from_fn(t.shape(), |b, c, y, x| t.at(b, c, y, w - 1 - x))
}

/// Rotate by `quarter` quarter turns counter-clockwise.
fn rot90(t: &Tensor, quarter: usize) -> Tensor {
    let [b, c, h, w] = t.shape();
    match quarter % 4 {
        0 => t.clone(),
        1 => Tensor::from_fn([b, c, w, h], |bi, ci, y, x| t.at(bi, ci, x, w - 1 - y)),
        2 => Tensor::from_fn([b, c, h, w], |bi, ci, y, x| t.at(bi, ci, h - 1 - y, w - 1 - x)),
        _ => Tensor::from_fn([b, c, w, h], |bi, ci, y, x| t.at(bi, ci, h - 1 - x, y)),
    }
}

/// Rotate about the centre by `theta` radians with reflection padding.
fn rotate_small(t: &Tensor, theta: f64, nearest: bool) -> Tensor {
    let [_, _, h, w] = t.shape();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = theta.sin_cos();
    Tensor::from_fn(t.shape(), |b, ch, y, x| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let sy = reflect(cy + c * dy - s * dx, h);
        let sx = reflect(cx + s * dy + c * dx, w);
        if nearest {
            return t.at(b, ch, (sy.round() as usize).min(h - 1), (sx.round() as usize).min(w - 1));
        }
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let top = t.at(b, ch, y0, x0) * (1.0 - fx) + t.at(b, ch, y0, x1) * fx;
        let bot = t.at(b, ch, y1, x0) * (1.0 - fx) + t.at(b, ch, y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    })
}

fn jitter(img: &Tensor, brightness: f64, contrast: f64, saturation: f64) -> Tensor {
    let [_, ch, h, w] = img.shape();
    let n = (h * w) as f64;
    let gray: Vec<f64> = (0..h * w)
        .map(|i| {
            if ch == 3 {
                0.299 * img.plane(0, 0)[i] + 0.587 * img.plane(0, 1)[i] + 0.114 * img.plane(0, 2)[i]
            } else {
                img.plane(0, 0)[i]
            }
        })
        .collect();
    let mean = gray.iter().sum::<f64>() / n;
    Tensor::from_fn(img.shape(), |b, c, y, x| {
        let i = y * w + x;
        let v = img.at(b, c, y, x) * brightness;
        let v = (v - mean * brightness) * contrast + mean * brightness;
        let g = gray[i] * brightness;
        let g = (g - mean * brightness) * contrast + mean * brightness;
        (g + (v - g) * saturation).clamp(0.0, 1.0)
    })
}

impl Augmenter {
    pub fn new(flags: AugmentFlags, seed: u64) -> Self {
        Self {
            flags,
            rng: ChaCha8Rng::seed_from_u64(seed),
            calls: Cell::new(0),
        }
    }

    pub fn flags(&self) -> AugmentFlags {
        self.flags
    }

    /// Number of pairs passed through [`Augmenter::apply`].
    pub fn calls(&self) -> usize {
        self.calls.get()
    }

    /// Augment one `(1, 3, H, W)` image and its `(1, 1, H, W)` mask.
    pub fn apply(&mut self, image: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
        if image.hw() != mask.hw() || image.batch() != 1 || mask.batch() != 1 {
            return Err(CodError::Shape(format!(
                "augment expects one image and mask of equal size, got {:?} and {:?}",
                image.shape(),
                mask.shape()
            )));
        }
        self.calls.set(self.calls.get() + 1);
        let (mut img, mut m) = (image.clone(), mask.clone());
        if self.flags.flip && self.rng.gen_bool(0.5) {
            img = flip_h(&img);
            m = flip_h(&m);
        }
        if self.flags.rotate {
            let (h, w) = img.hw();
            let quarter = if h == w {
                self.rng.gen_range(0..4)
            } else {
                2 * self.rng.gen_range(0..2)
            };
            img = rot90(&img, quarter);
            m = rot90(&m, quarter);
            let theta = self.rng.gen_range(-MAX_SMALL_ANGLE_DEG..=MAX_SMALL_ANGLE_DEG).to_radians();
            img = rotate_small(&img, theta, false);
            m = rotate_small(&m, theta, true);
        }
        if self.flags.color_jitter {
            let mut f = || self.rng.gen_range(1.0 - JITTER..=1.0 + JITTER);
            let (b, c, s) = (f(), f(), f());
            img = jitter(&img, b, c, s);
        }
        Ok((img, m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize) -> Tensor {
        Tensor::from_fn([1, c, 6, 6], |_, ch, y, x| ((ch * 36 + y * 6 + x) as f64) / 120.0)
    }

    #[test]
    fn disabled_is_identity_and_counts() {
        let mut a = Augmenter::new(AugmentFlags::none(), 0);
        let (img, m) = (ramp(3), ramp(1).map(|v| (v > 0.1) as u8 as f64));
        let (i2, m2) = a.apply(&img, &m).unwrap();
        assert_eq!((i2, m2), (img, m));
        assert_eq!(a.calls(), 1);
    }

    #[test]
    fn quarter_turns_compose() {
        let t = ramp(1);
        assert_eq!(rot90(&rot90(&t, 1), 3), t);
        assert_eq!(rot90(&rot90(&t, 2), 2), t);
        assert_eq!(rot90(&t, 1).at(0, 0, 0, 0), t.at(0, 0, 0, 5));
    }

    #[test]
    fn zero_angle_is_identity() {
        let t = ramp(2);
        assert!(rotate_small(&t, 0.0, false).max_abs_diff(&t) < 1e-12);
    }

    #[test]
    fn reflection_stays_in_range() {
        for t in [-3.5, -0.2, 0.0, 4.0, 5.0, 5.5, 12.3] {
            let r = reflect(t, 6);
            assert!((0.0..=5.0).contains(&r), "{t} -> {r}");
        }
        assert_eq!(reflect(-1.0, 6), 1.0);
        assert_eq!(reflect(6.0, 6), 4.0);
    }

    #[test]
    fn masks_stay_binary_and_images_in_range() {
        let mut a = Augmenter::new(
            AugmentFlags {
                flip: true,
                rotate: true,
                color_jitter: true,
            },
            3,
        );
        let img = ramp(3);
        let m = ramp(1).map(|v| (v > 0.12) as u8 as f64);
        for _ in 0..20 {
            let (i2, m2) = a.apply(&img, &m).unwrap();
            assert!(m2.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(i2.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(a.calls(), 20);
    }
}
