//! Independent reference implementations used by the integration tests.
//!
//! Everything here is written as plain nested loops over nested `Vec`s,
//! straight from the textbook formulas, and shares no code with the crate
//! beyond reading parameter tensors by name.

#![allow(dead_code)]

use cod_core::nn::ParamStore;
use cod_core::Tensor;

/// `[channel][y][x]` for one batch item.
pub type Map = Vec<Vec<Vec<f64>>>;

pub fn to_map(t: &Tensor, b: usize) -> Map {
    let [_, c, h, w] = t.shape();
    (0..c)
        .map(|ci| (0..h).map(|y| (0..w).map(|x| t.at(b, ci, y, x)).collect()).collect())
        .collect()
}

pub fn from_maps(maps: &[Map]) -> Tensor {
    let (c, h, w) = (maps[0].len(), maps[0][0].len(), maps[0][0][0].len());
    Tensor::from_fn([maps.len(), c, h, w], |b, ci, y, x| maps[b][ci][y][x])
}

pub fn param(store: &ParamStore, name: &str) -> Tensor {
    let id = store.id(name).unwrap_or_else(|| panic!("no parameter `{name}`"));
    store.get(id).clone()
}

fn has(store: &ParamStore, name: &str) -> bool {
    store.id(name).is_some()
}

/// Zero-padded, stride-1, `k x k` convolution with `k / 2` padding.
pub fn conv(x: &Map, w: &Tensor, b: Option<&Tensor>) -> Map {
    let [cout, cin, k, _] = w.shape();
    assert_eq!(cin, x.len());
    let (h, wd) = (x[0].len(), x[0][0].len());
    let r = (k / 2) as i64;
    let mut out = vec![vec![vec![0.0; wd]; h]; cout];
    for (o, plane) in out.iter_mut().enumerate() {
        for y in 0..h {
            for xx in 0..wd {
                let mut s = b.map(|b| b.at(0, o, 0, 0)).unwrap_or(0.0);
                for (i, xin) in x.iter().enumerate() {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as i64 + ky as i64 - r;
                            let sx = xx as i64 + kx as i64 - r;
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                s += w.at(o, i, ky, kx) * xin[sy as usize][sx as usize];
                            }
                        }
                    }
                }
                plane[y][xx] = s;
            }
        }
    }
    out
}

pub fn conv_named(store: &ParamStore, prefix: &str, x: &Map) -> Map {
    let w = param(store, &format!("{prefix}.weight"));
    let bname = format!("{prefix}.bias");
    let b = has(store, &bname).then(|| param(store, &bname));
    conv(x, &w, b.as_ref())
}

pub fn group_norm(x: &Map, gamma: &Tensor, beta: &Tensor, eps: f64) -> Map {
    let c = x.len();
    let groups = if c % 4 == 0 {
        4
    } else if c % 2 == 0 {
        2
    } else {
        1
    };
    let per = c / groups;
    let mut out = x.clone();
    for g in 0..groups {
        let vals: Vec<f64> = (g * per..(g + 1) * per)
            .flat_map(|ci| x[ci].iter().flatten().copied())
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        for ci in g * per..(g + 1) * per {
            for row in out[ci].iter_mut() {
                for v in row.iter_mut() {
                    *v = (*v - mean) / (var + eps).sqrt() * gamma.at(0, ci, 0, 0) + beta.at(0, ci, 0, 0);
                }
            }
        }
    }
    out
}

pub fn relu(x: &Map) -> Map {
    x.iter()
        .map(|p| p.iter().map(|r| r.iter().map(|&v| v.max(0.0)).collect()).collect())
        .collect()
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// 3x3 conv without bias, group norm, optional rectifier.
pub fn conv_norm(store: &ParamStore, prefix: &str, x: &Map, rectify: bool) -> Map {
    let y = conv(x, &param(store, &format!("{prefix}.conv.weight")), None);
    let y = group_norm(
        &y,
        &param(store, &format!("{prefix}.norm.gamma")),
        &param(store, &format!("{prefix}.norm.beta")),
        1e-5,
    );
    if rectify {
        relu(&y)
    } else {
        y
    }
}

/// Bilinear resize with half-pixel centres.
pub fn resize(x: &Map, oh: usize, ow: usize) -> Map {
    let (h, w) = (x[0].len(), x[0][0].len());
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    let src = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, if i0 == i1 { 0.0 } else { s - i0 as f64 })
    };
    x.iter()
        .map(|p| {
            (0..oh)
                .map(|y| {
                    let (y0, y1, fy) = src(y, h, oh);
                    (0..ow)
                        .map(|xx| {
                            let (x0, x1, fx) = src(xx, w, ow);
                            (1.0 - fy) * ((1.0 - fx) * p[y0][x0] + fx * p[y0][x1])
                                + fy * ((1.0 - fx) * p[y1][x0] + fx * p[y1][x1])
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn cat(parts: &[&Map]) -> Map {
    parts.iter().flat_map(|m| m.iter().cloned()).collect()
}

fn slice(x: &Map, start: usize, len: usize) -> Map {
    x[start..start + len].to_vec()
}

/// Scale-attention fusion of one batch item. Returns the fused map and the
/// per-group attention `[g][s][y][x]`.
pub fn absiu(store: &ParamStore, inputs: &[Map], forced: Option<usize>) -> (Map, Vec<Map>) {
    let s_count = inputs.len();
    let c = inputs[0].len();
    let (h, w) = (inputs[0][0].len(), inputs[0][0][0].len());
    let cg = c / 4;
    let pre: Vec<Map> = inputs
        .iter()
        .enumerate()
        .map(|(s, x)| conv_norm(store, &format!("pre{s}"), x, true))
        .collect();
    let common = conv_named(store, "fuse", &cat(&pre.iter().collect::<Vec<_>>()));
    let mut out = Vec::new();
    let mut attn = Vec::new();
    for g in 0..4 {
        let slices: Vec<Map> = (0..s_count).map(|s| slice(&common, s * c + g * cg, cg)).collect();
        let a: Map = match forced {
            Some(sel) => (0..s_count)
                .map(|s| vec![vec![if s == sel { 1.0 } else { 0.0 }; w]; h])
                .collect(),
            None => {
                let hidden = conv_norm(store, &format!("head{g}.hidden"), &cat(&slices.iter().collect::<Vec<_>>()), true);
                let logits = conv_named(store, &format!("head{g}.logits"), &hidden);
                let mut a = logits.clone();
                for y in 0..h {
                    for x in 0..w {
                        let m = (0..s_count).map(|s| logits[s][y][x]).fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = (0..s_count).map(|s| (logits[s][y][x] - m).exp()).sum();
                        for s in 0..s_count {
                            a[s][y][x] = (logits[s][y][x] - m).exp() / z;
                        }
                    }
                }
                a
            }
        };
        for j in 0..cg {
            let mut plane = vec![vec![0.0; w]; h];
            for y in 0..h {
                for x in 0..w {
                    for s in 0..s_count {
                        plane[y][x] += a[s][y][x] * slices[s][j][y][x];
                    }
                }
            }
            out.push(plane);
        }
        attn.push(a);
    }
    (out, attn)
}

/// Grouped chain refinement unit of one batch item.
pub fn mgfu(store: &ParamStore, x: &Map, feedback: &[Map]) -> Map {
    let c = x.len();
    let (h, w) = (x[0].len(), x[0][0].len());
    let trunk = if feedback.is_empty() {
        x.clone()
    } else {
        let resized: Vec<Map> = feedback.iter().map(|f| resize(f, h, w)).collect();
        let mut parts = vec![x];
        parts.extend(resized.iter());
        conv_named(store, "entry", &cat(&parts))
    };
    let expanded = conv_named(store, "expand", &trunk);
    let mut gates = Vec::new();
    let mut feats = Vec::new();
    let mut prev: Option<Map> = None;
    for j in 0..6 {
        let mut input = slice(&expanded, j * c, c);
        if let Some(p) = &prev {
            input.extend(p.iter().cloned());
        }
        let y = conv_norm(store, &format!("group{j}"), &input, true);
        if j == 5 {
            gates.extend(slice(&y, 0, c));
            feats.extend(slice(&y, c, c));
            prev = None;
        } else {
            prev = Some(slice(&y, 0, c));
            gates.extend(slice(&y, c, c));
            feats.extend(slice(&y, 2 * c, c));
        }
    }
    let pooled: Map = gates
        .iter()
        .map(|p| vec![vec![p.iter().flatten().sum::<f64>() / (h * w) as f64]])
        .collect();
    let squeezed = relu(&conv_named(store, "squeeze", &pooled));
    let excited = conv_named(store, "excite", &squeezed);
    let weighted: Map = feats
        .iter()
        .enumerate()
        .map(|(ci, p)| {
            let a = sigmoid(excited[ci][0][0]);
            p.iter().map(|r| r.iter().map(|v| v * a).collect()).collect()
        })
        .collect();
    let refined = conv_norm(store, "refine", &weighted, false);
    (0..c)
        .map(|ci| {
            (0..h)
                .map(|y| (0..w).map(|xx| (refined[ci][y][xx] + x[ci][y][xx]).max(0.0)).collect())
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------- metrics

pub type Plane = Vec<Vec<f64>>;

pub fn plane(t: &Tensor) -> Plane {
    to_map(t, 0).remove(0)
}

fn mean(p: &Plane) -> f64 {
    let n = (p.len() * p[0].len()) as f64;
    p.iter().flatten().sum::<f64>() / n
}

pub fn mae(p: &Plane, g: &Plane) -> f64 {
    let mut s = 0.0;
    for y in 0..p.len() {
        for x in 0..p[0].len() {
            s += (p[y][x] - g[y][x]).abs();
        }
    }
    s / (p.len() * p[0].len()) as f64
}

fn threshold(p: &Plane) -> f64 {
    (2.0 * mean(p)).min(1.0)
}

/// Confusion-matrix F-measure at the adaptive threshold.
pub fn f_measure(p: &Plane, g: &Plane) -> f64 {
    let th = threshold(p);
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for y in 0..p.len() {
        for x in 0..p[0].len() {
            match (p[y][x] >= th, g[y][x] == 1.0) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
    }
    if tp + fn_ == 0.0 {
        return 1.0 - mean(p);
    }
    if tp == 0.0 {
        return 0.0;
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fn_);
    1.3 * precision * recall / (0.3 * precision + recall)
}

/// Enhanced alignment on mean-centred binary maps, averaged over pixels.
pub fn e_measure(p: &Plane, g: &Plane) -> f64 {
    let n = (p.len() * p[0].len()) as f64;
    let gsum: f64 = g.iter().flatten().sum();
    if gsum == 0.0 {
        return 1.0 - mean(p);
    }
    if gsum == n {
        return mean(p);
    }
    let th = threshold(p);
    let bin: Plane = p.iter().map(|r| r.iter().map(|&v| (v >= th) as u8 as f64).collect()).collect();
    let (mf, mg) = (mean(&bin), mean(g));
    let mut total = 0.0;
    for y in 0..p.len() {
        for x in 0..p[0].len() {
            let a = bin[y][x] - mf;
            let b = g[y][x] - mg;
            let xi = 2.0 * a * b / (a * a + b * b + f64::EPSILON);
            total += (xi + 1.0) * (xi + 1.0) / 4.0;
        }
    }
    total / n
}

fn object(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        return 0.0;
    }
    let n = vals.len() as f64;
    let m = vals.iter().sum::<f64>() / n;
    let sd = if vals.len() < 2 {
        0.0
    } else {
        (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    2.0 * m / (m * m + 1.0 + sd + f64::EPSILON)
}

fn region_ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let (mx, my) = (p.iter().sum::<f64>() / n, g.iter().sum::<f64>() / n);
    let d = if n > 1.0 { n - 1.0 } else { 1.0 };
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        vx += (p[i] - mx).powi(2) / d;
        vy += (g[i] - my).powi(2) / d;
        cxy += (p[i] - mx) * (g[i] - my) / d;
    }
    let num = 4.0 * mx * my * cxy;
    let den = (mx * mx + my * my) * (vx + vy);
    if num != 0.0 {
        num / (den + f64::EPSILON)
    } else if den == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Structure measure transcribed step by step.
pub fn s_measure(p: &Plane, g: &Plane) -> f64 {
    let (h, w) = (p.len(), p[0].len());
    let u = mean(g);
    if u == 0.0 {
        return 1.0 - mean(p);
    }
    if u == 1.0 {
        return mean(p);
    }
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if g[y][x] == 1.0 {
                fg.push(p[y][x]);
            } else {
                bg.push(1.0 - p[y][x]);
            }
        }
    }
    let s_obj = u * object(&fg) + (1.0 - u) * object(&bg);

    let (mut sy, mut sx, mut cnt) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if g[y][x] == 1.0 {
                sy += y as f64;
                sx += x as f64;
                cnt += 1.0;
            }
        }
    }
    let cx = ((sx / cnt).round_ties_even() as usize + 1).min(w);
    let cy = ((sy / cnt).round_ties_even() as usize + 1).min(h);
    let area = (h * w) as f64;
    let mut s_reg = 0.0;
    for (y0, y1, x0, x1) in [(0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)] {
        if y1 <= y0 || x1 <= x0 {
            continue;
        }
        let mut ps = Vec::new();
        let mut gs = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                ps.push(p[y][x]);
                gs.push(g[y][x]);
            }
        }
        s_reg += ((y1 - y0) * (x1 - x0)) as f64 / area * region_ssim(&ps, &gs);
    }
    (0.5 * s_obj + 0.5 * s_reg).max(0.0)
}

/// Brute-force nearest foreground pixel: `(squared distance, y, x)`, ties to
/// the smallest row, then the smallest column.
pub fn nearest_fg(g: &Plane, y: usize, x: usize) -> (u64, usize, usize) {
    let mut best = (u64::MAX, 0, 0);
    for yy in 0..g.len() {
        for xx in 0..g[0].len() {
            if g[yy][xx] == 1.0 {
                let d = (yy.abs_diff(y).pow(2) + xx.abs_diff(x).pow(2)) as u64;
                if d < best.0 {
                    best = (d, yy, xx);
                }
            }
        }
    }
    best
}

/// Weighted F-measure following the published algorithm, with a dense
/// neighbourhood sum for the Gaussian filter.
pub fn weighted_f(p: &Plane, g: &Plane) -> f64 {
    let (h, w) = (p.len(), p[0].len());
    if g.iter().flatten().all(|&v| v == 0.0) {
        return 1.0 - mean(p);
    }
    let e: Plane = (0..h).map(|y| (0..w).map(|x| (p[y][x] - g[y][x]).abs()).collect()).collect();
    let mut et = e.clone();
    let mut dist = vec![vec![0.0; w]; h];
    for y in 0..h {
        for x in 0..w {
            if g[y][x] == 0.0 {
                let (d, ny, nx) = nearest_fg(g, y, x);
                et[y][x] = e[ny][nx];
                dist[y][x] = (d as f64).sqrt();
            }
        }
    }
    let sigma: f64 = 5.0;
    let mut k = [[0.0f64; 7]; 7];
    let mut ksum = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 3.0, j as f64 - 3.0);
            *v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            ksum += *v;
        }
    }
    let mut ea = vec![vec![0.0; w]; h];
    for y in 0..h {
        for x in 0..w {
            for i in 0..7 {
                for j in 0..7 {
                    let (yy, xx) = (y as i64 + i as i64 - 3, x as i64 + j as i64 - 3);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        ea[y][x] += k[i][j] / ksum * et[yy as usize][xx as usize];
                    }
                }
            }
        }
    }
    let (mut ew_fg, mut n_fg, mut fpw) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if g[y][x] == 1.0 {
                ew_fg += if ea[y][x] < e[y][x] { ea[y][x] } else { e[y][x] };
                n_fg += 1.0;
            } else {
                let b = 2.0 - (0.5f64.ln() / 5.0 * dist[y][x]).exp();
                fpw += e[y][x] * b;
            }
        }
    }
    let tpw = n_fg - ew_fg;
    let r = 1.0 - ew_fg / n_fg;
    let pr = tpw / (f64::EPSILON + tpw + fpw);
    2.0 * r * pr / (f64::EPSILON + r + pr)
}
