//! The five evaluation metrics for binary segmentation maps, and dataset-level
//! aggregation.
//!
//! Predictions are probability maps in `[0, 1]` and ground truths are binary
//! maps, both `(1, 1, H, W)`. Predictions are used as given (no min-max
//! rescaling).
//!
//! Degenerate ground truths:
//! * all background: S = F = weighted F = E = `1 - mean(p)`;
//! * all foreground: S = E = `mean(p)`; F and weighted F use the regular
//!   formulas.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CodError, Result};
use crate::imageio;
use crate::losses::check_mask;
use crate::ops;
use crate::tensor::Tensor;

/// Precision weight of the adaptive F-measure.
pub const F_BETA_SQ: f64 = 0.3;
/// Precision weight of the weighted F-measure.
pub const WF_BETA_SQ: f64 = 1.0;
pub const S_ALPHA: f64 = 0.5;
pub const WF_GAUSS_SIZE: usize = 7;
pub const WF_GAUSS_SIGMA: f64 = 5.0;

const EPS: f64 = f64::EPSILON;

fn dims(p: &Tensor, g: &Tensor) -> Result<(usize, usize)> {
    if p.shape() != g.shape() {
        return Err(CodError::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            p.shape(),
            g.shape()
        )));
    }
    let [b, c, h, w] = p.shape();
    if b != 1 || c != 1 || h == 0 || w == 0 {
        return Err(CodError::Shape(format!("expected a single (1, 1, H, W) map, got {:?}", p.shape())));
    }
    if let Some(v) = p.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(CodError::InvalidInput(format!("prediction value {v} outside [0, 1]")));
    }
    check_mask(g)?;
    Ok((h, w))
}

fn fg_count(g: &Tensor) -> usize {
    g.data().iter().filter(|&&v| v == 1.0).count()
}

pub fn mae(p: &Tensor, g: &Tensor) -> Result<f64> {
    dims(p, g)?;
    Ok(p.data().iter().zip(g.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.numel() as f64)
}

/// `min(2 * mean(p), 1)`.
pub fn adaptive_threshold(p: &Tensor) -> f64 {
    (2.0 * p.mean()).min(1.0)
}

/// Adaptive-threshold F-measure.
pub fn f_measure(p: &Tensor, g: &Tensor) -> Result<f64> {
    f_measure_beta(p, g, F_BETA_SQ)
}

pub fn f_measure_beta(p: &Tensor, g: &Tensor, beta_sq: f64) -> Result<f64> {
    dims(p, g)?;
    if fg_count(g) == 0 {
        return Ok(1.0 - p.mean());
    }
    let th = adaptive_threshold(p);
    let (mut tp, mut pos) = (0usize, 0usize);
    for (&pv, &gv) in p.data().iter().zip(g.data()) {
        if pv >= th {
            pos += 1;
            if gv == 1.0 {
                tp += 1;
            }
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let prec = tp as f64 / pos as f64;
    let rec = tp as f64 / fg_count(g) as f64;
    Ok((1.0 + beta_sq) * prec * rec / (beta_sq * prec + rec))
}

/// Adaptive-threshold enhanced-alignment measure.
pub fn e_measure(p: &Tensor, g: &Tensor) -> Result<f64> {
    dims(p, g)?;
    let n = p.numel();
    let gt_fg = fg_count(g);
    if gt_fg == 0 {
        return Ok(1.0 - p.mean());
    }
    if gt_fg == n {
        return Ok(p.mean());
    }
    let th = adaptive_threshold(p);
    let (mut fg_fg, mut fg_bg) = (0usize, 0usize);
    for (&pv, &gv) in p.data().iter().zip(g.data()) {
        if pv >= th {
            if gv == 1.0 {
                fg_fg += 1;
            } else {
                fg_bg += 1;
            }
        }
    }
    let pred_fg = fg_fg + fg_bg;
    let bg_fg = gt_fg - fg_fg;
    let bg_bg = n - pred_fg - bg_fg;
    let mp = pred_fg as f64 / n as f64;
    let mg = gt_fg as f64 / n as f64;
    let parts = [
        (fg_fg, 1.0 - mp, 1.0 - mg),
        (fg_bg, 1.0 - mp, -mg),
        (bg_fg, -mp, 1.0 - mg),
        (bg_bg, -mp, -mg),
    ];
    let sum: f64 = parts
        .iter()
        .map(|&(count, a, b)| {
            let align = 2.0 * a * b / (a * a + b * b + EPS);
            let enhanced = (align + 1.0).powi(2) / 4.0;
            enhanced * count as f64
        })
        .sum();
    Ok(sum / n as f64)
}

/// Structure measure `alpha * S_object + (1 - alpha) * S_region`, clamped at 0.
pub fn s_measure(p: &Tensor, g: &Tensor) -> Result<f64> {
    let (h, w) = dims(p, g)?;
    let y = g.mean();
    if y == 0.0 {
        return Ok(1.0 - p.mean());
    }
    if y == 1.0 {
        return Ok(p.mean());
    }
    let (pd, gd) = (p.data(), g.data());
    let score = S_ALPHA * s_object(pd, gd) + (1.0 - S_ALPHA) * s_region(pd, gd, h, w);
    Ok(score.max(0.0))
}

fn s_object(p: &[f64], g: &[f64]) -> f64 {
    let u = g.iter().sum::<f64>() / g.len() as f64;
    let fg: Vec<f64> = p.iter().zip(g).filter(|(_, &gv)| gv == 1.0).map(|(&pv, _)| pv).collect();
    let bg: Vec<f64> = p.iter().zip(g).filter(|(_, &gv)| gv == 0.0).map(|(&pv, _)| 1.0 - pv).collect();
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// `2 x / (x^2 + 1 + sigma + eps)` with the sample standard deviation; a
/// single value has zero spread.
fn object_score(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let x = v.iter().sum::<f64>() / n;
    let sigma = if v.len() > 1 {
        (v.iter().map(|a| (a - x).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

/// Round half to even.
fn round_even(v: f64) -> f64 {
    let r = v.round();
    if (v - v.trunc()).abs() == 0.5 && r % 2.0 != 0.0 {
        r - v.signum()
    } else {
        r
    }
}

/// Split point `(x, y)`: one past the rounded foreground centroid.
pub fn centroid(g: &[f64], h: usize, w: usize) -> (usize, usize) {
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
    for yy in 0..h {
        for xx in 0..w {
            if g[yy * w + xx] != 0.0 {
                sy += yy as f64;
                sx += xx as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        return (round_even(w as f64 / 2.0) as usize + 1, round_even(h as f64 / 2.0) as usize + 1);
    }
    let cx = round_even(sx / n as f64) as usize;
    let cy = round_even(sy / n as f64) as usize;
    (cx + 1, cy + 1)
}

fn s_region(p: &[f64], g: &[f64], h: usize, w: usize) -> f64 {
    let (x, y) = centroid(g, h, w);
    let (x, y) = (x.min(w), y.min(h));
    let area = (h * w) as f64;
    let quads = [(0, y, 0, x), (0, y, x, w), (y, h, 0, x), (y, h, x, w)];
    let w1 = (x * y) as f64 / area;
    let w2 = (y * (w - x)) as f64 / area;
    let w3 = ((h - y) * x) as f64 / area;
    let weights = [w1, w2, w3, 1.0 - w1 - w2 - w3];
    quads
        .iter()
        .zip(weights)
        .map(|(&(y0, y1, x0, x1), wt)| {
            let mut ps = Vec::with_capacity((y1 - y0) * (x1 - x0));
            let mut gs = Vec::with_capacity(ps.capacity());
            for yy in y0..y1 {
                for xx in x0..x1 {
                    ps.push(p[yy * w + xx]);
                    gs.push(g[yy * w + xx]);
                }
            }
            wt * ssim(&ps, &gs)
        })
        .sum()
}

/// Region similarity of one quadrant. An empty quadrant scores 0 (its
/// weight is 0); a single pixel uses `N - 1 = 1` in the (co)variances.
fn ssim(p: &[f64], g: &[f64]) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let n = p.len() as f64;
    let x = p.iter().sum::<f64>() / n;
    let y = g.iter().sum::<f64>() / n;
    let d = (n - 1.0).max(1.0);
    let sx = p.iter().map(|a| (a - x).powi(2)).sum::<f64>() / d;
    let sy = g.iter().map(|b| (b - y).powi(2)).sum::<f64>() / d;
    let sxy = p.iter().zip(g).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / d;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Normalised `size x size` Gaussian with entries below `eps * max` zeroed.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let m = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - m, (i % size) as f64 - m);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let max = k.iter().cloned().fold(0.0, f64::max);
    for v in &mut k {
        if *v < f64::EPSILON * max {
            *v = 0.0;
        }
    }
    let s: f64 = k.iter().sum();
    if s != 0.0 {
        k.iter_mut().for_each(|v| *v /= s);
    }
    k
}

/// Squared Euclidean distance from every pixel to the nearest foreground
/// pixel of `fg` (exact, separable lower-envelope algorithm). Requires at
/// least one foreground pixel.
pub fn squared_edt(fg: &[bool], h: usize, w: usize) -> Vec<u64> {
    const INF: u64 = u64::MAX / 4;
    let envelope = |f: &[u64], out: &mut [u64]| {
        let n = f.len();
        let mut v = vec![0usize; n];
        let mut z = vec![0f64; n + 1];
        let mut k = 0usize;
        let sep = |q: usize, p: usize| -> f64 {
            let (fq, fp) = (f[q] as f64, f[p] as f64);
            ((fq + (q * q) as f64) - (fp + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
        };
        let first = (0..n).find(|&q| f[q] < INF);
        let Some(first) = first else {
            out.fill(INF);
            return;
        };
        v[0] = first;
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        for q in first + 1..n {
            if f[q] >= INF {
                continue;
            }
            let mut s = sep(q, v[k]);
            while s <= z[k] {
                k -= 1;
                s = sep(q, v[k]);
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
        }
        k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            while z[k + 1] < q as f64 {
                k += 1;
            }
            let d = q.abs_diff(v[k]) as u64;
            *o = d * d + f[v[k]];
        }
    };
    let mut cols = vec![0u64; h * w];
    let mut f = vec![0u64; h];
    let mut o = vec![0u64; h];
    for x in 0..w {
        for y in 0..h {
            f[y] = if fg[y * w + x] { 0 } else { INF };
        }
        envelope(&f, &mut o);
        for y in 0..h {
            cols[y * w + x] = o[y];
        }
    }
    let mut out = vec![0u64; h * w];
    for y in 0..h {
        envelope(&cols[y * w..(y + 1) * w], &mut out[y * w..(y + 1) * w]);
    }
    out
}

fn isqrt(v: u64) -> u64 {
    let mut r = (v as f64).sqrt() as u64;
    while r * r > v {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= v {
        r += 1;
    }
    r
}

/// Nearest foreground pixel of every pixel, ties broken by smallest row,
/// then smallest column. Returns `(squared distance, flat index)`.
pub fn nearest_foreground(fg: &[bool], h: usize, w: usize) -> Vec<(u64, usize)> {
    let d2 = squared_edt(fg, h, w);
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as i64, (i % w) as i64);
            let d = d2[i];
            let r = isqrt(d) as i64;
            for dy in -r..=r {
                let rem = d - (dy * dy) as u64;
                let dx = isqrt(rem);
                if dx * dx != rem {
                    continue;
                }
                let dx = dx as i64;
                for sx in [-dx, dx] {
                    let (yy, xx) = (y + dy, x + sx);
                    if (0..h as i64).contains(&yy) && (0..w as i64).contains(&xx) && fg[(yy * w as i64 + xx) as usize] {
                        return (d, (yy * w as i64 + xx) as usize);
                    }
                }
            }
            unreachable!("a foreground pixel lies at the exact transform distance")
        })
        .collect()
}

/// Weighted F-measure with Gaussian-propagated, distance-weighted errors.
pub fn weighted_f(p: &Tensor, g: &Tensor) -> Result<f64> {
    let (h, w) = dims(p, g)?;
    if fg_count(g) == 0 {
        return Ok(1.0 - p.mean());
    }
    let (pd, gd) = (p.data(), g.data());
    let fg: Vec<bool> = gd.iter().map(|&v| v == 1.0).collect();
    let nearest = nearest_foreground(&fg, h, w);
    let err: Vec<f64> = pd.iter().zip(gd).map(|(a, b)| (a - b).abs()).collect();
    let et: Vec<f64> = (0..h * w)
        .map(|i| if fg[i] { err[i] } else { err[nearest[i].1] })
        .collect();
    let k = gaussian_kernel(WF_GAUSS_SIZE, WF_GAUSS_SIGMA);
    let r = (WF_GAUSS_SIZE / 2) as i64;
    let mut ea = vec![0.0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut s = 0.0;
            for ky in -r..=r {
                for kx in -r..=r {
                    let (yy, xx) = (y + ky, x + kx);
                    if (0..h as i64).contains(&yy) && (0..w as i64).contains(&xx) {
                        s += k[((ky + r) * (2 * r + 1) + kx + r) as usize] * et[(yy * w as i64 + xx) as usize];
                    }
                }
            }
            ea[(y * w as i64 + x) as usize] = s;
        }
    }
    let (mut tpw, mut fpw, mut ew_fg, mut n_fg) = (0.0, 0.0, 0.0, 0usize);
    for i in 0..h * w {
        let min_e = if fg[i] && ea[i] < err[i] { ea[i] } else { err[i] };
        if fg[i] {
            ew_fg += min_e;
            n_fg += 1;
        } else {
            let dist = (nearest[i].0 as f64).sqrt();
            fpw += min_e * (2.0 - ((0.5f64).ln() / 5.0 * dist).exp());
        }
    }
    tpw += n_fg as f64 - ew_fg;
    let recall = 1.0 - ew_fg / n_fg as f64;
    let precision = tpw / (tpw + fpw + EPS);
    Ok((1.0 + WF_BETA_SQ) * recall * precision / (recall + WF_BETA_SQ * precision + EPS))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub s_measure: f64,
    pub weighted_f: f64,
    pub mae: f64,
    pub f_beta: f64,
    pub e_measure: f64,
}

pub fn score_pair(p: &Tensor, g: &Tensor) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        s_measure: s_measure(p, g)?,
        weighted_f: weighted_f(p, g)?,
        mae: mae(p, g)?,
        f_beta: f_measure(p, g)?,
        e_measure: e_measure(p, g)?,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub s_measure: f64,
    pub weighted_f: f64,
    pub mae: f64,
    pub f_beta: f64,
    pub e_measure: f64,
    pub n_images: usize,
    /// Names present on only one side, skipped.
    pub missing: Vec<String>,
}

impl MetricReport {
    /// Mean of per-image scores, summed in the given order.
    pub fn from_images(scores: &[ImageMetrics]) -> Result<Self> {
        if scores.is_empty() {
            return Err(CodError::Dataset("no images to score".into()));
        }
        let n = scores.len() as f64;
        let mut r = Self {
            n_images: scores.len(),
            ..Default::default()
        };
        for s in scores {
            r.s_measure += s.s_measure;
            r.weighted_f += s.weighted_f;
            r.mae += s.mae;
            r.f_beta += s.f_beta;
            r.e_measure += s.e_measure;
        }
        r.s_measure /= n;
        r.weighted_f /= n;
        r.mae /= n;
        r.f_beta /= n;
        r.e_measure /= n;
        Ok(r)
    }

    pub fn values(&self) -> [f64; 5] {
        [self.s_measure, self.weighted_f, self.mae, self.f_beta, self.e_measure]
    }

    pub const HEADERS: [&'static str; 5] = ["S_m", "wF_b", "MAE", "F_b", "E_m"];

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self, title: &str) -> String {
        let mut s = format!("{:<12}", "dataset");
        for h in Self::HEADERS {
            s.push_str(&format!(" {h:>8}"));
        }
        s.push_str(&format!(" {:>8}\n{title:<12}", "images"));
        for v in self.values() {
            s.push_str(&format!(" {v:>8.4}"));
        }
        s.push_str(&format!(" {:>8}\n", self.n_images));
        if !self.missing.is_empty() {
            s.push_str(&format!("skipped {} unpaired: {}\n", self.missing.len(), self.missing.join(", ")));
        }
        s
    }
}

/// Score same-named prediction and ground-truth images. Predictions are
/// resized to the ground-truth size when they differ.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path) -> Result<MetricReport> {
    let preds = imageio::image_stems(pred_dir)?;
    let gts = imageio::image_stems(gt_dir)?;
    let mut missing: Vec<String> = preds.keys().filter(|k| !gts.contains_key(*k)).cloned().collect();
    missing.extend(gts.keys().filter(|k| !preds.contains_key(*k)).cloned());
    missing.sort();
    if !missing.is_empty() {
        log::warn!("{} unpaired images skipped", missing.len());
    }
    let pairs: Vec<(&PathBuf, &PathBuf)> = preds
        .iter()
        .filter_map(|(k, p)| gts.get(k).map(|g| (p, g)))
        .collect();
    let scores = pairs
        .par_iter()
        .map(|(p, g)| {
            let gt = imageio::load_mask(g)?;
            let mut pred = imageio::load_gray(p)?;
            if pred.hw() != gt.hw() {
                pred = ops::resize_bilinear(&pred, gt.hw())?.map(|v| v.clamp(0.0, 1.0));
            }
            score_pair(&pred, &gt)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = MetricReport::from_images(&scores)?;
    report.missing = missing;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        Tensor::from_fn([1, 1, h, w], |_, _, y, x| f(y, x))
    }

    #[test]
    fn perfect_prediction() {
        let g = map(12, 10, |y, x| ((y > 3 && y < 9 && x > 2 && x < 7) as u8) as f64);
        let m = score_pair(&g, &g).unwrap();
        assert!((m.s_measure - 1.0).abs() < 1e-9, "{m:?}");
        assert!((m.weighted_f - 1.0).abs() < 1e-9, "{m:?}");
        assert_eq!(m.mae, 0.0);
        assert!((m.f_beta - 1.0).abs() < 1e-12);
        assert!((m.e_measure - 1.0).abs() < 1e-12);
    }

    #[test]
    fn complement_scores_low() {
        let g = map(8, 8, |y, _| (y < 3) as u8 as f64);
        let p = g.map(|v| 1.0 - v);
        assert_eq!(f_measure(&p, &g).unwrap(), 0.0);
        assert!(e_measure(&p, &g).unwrap() < 0.05);
        assert!(s_measure(&p, &g).unwrap() < s_measure(&g, &g).unwrap());
        assert_eq!(mae(&p, &g).unwrap(), 1.0);
    }

    #[test]
    fn degenerate_ground_truths() {
        let p = map(4, 4, |y, x| (y * 4 + x) as f64 / 20.0);
        let empty = Tensor::zeros([1, 1, 4, 4]);
        let full = Tensor::full([1, 1, 4, 4], 1.0);
        let m = p.mean();
        for v in [
            s_measure(&p, &empty).unwrap(),
            f_measure(&p, &empty).unwrap(),
            weighted_f(&p, &empty).unwrap(),
            e_measure(&p, &empty).unwrap(),
        ] {
            assert!((v - (1.0 - m)).abs() < 1e-15);
        }
        assert_eq!(s_measure(&p, &full).unwrap(), m);
        assert_eq!(e_measure(&p, &full).unwrap(), m);
    }

    #[test]
    fn bankers_rounding() {
        assert_eq!(round_even(2.5), 2.0);
        assert_eq!(round_even(3.5), 4.0);
        assert_eq!(round_even(1.2), 1.0);
    }

    #[test]
    fn gaussian_sums_to_one() {
        let k = gaussian_kernel(7, 5.0);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(k[24] > k[0]);
    }

    #[test]
    fn shape_errors() {
        let a = Tensor::zeros([1, 1, 3, 3]);
        assert!(mae(&a, &Tensor::zeros([1, 1, 3, 4])).is_err());
        assert!(mae(&a, &Tensor::full([1, 1, 3, 3], 0.5)).is_err());
    }
}
