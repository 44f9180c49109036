//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar walks the records in reverse and returns
//! the gradient of that scalar with respect to every recorded value.

use std::cell::RefCell;
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::rc::Rc;

use crate::error::{CodError, Result};
use crate::ops::{self, ConvGeom, NormStats};
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Gelu(Var),
    SoftmaxChannels(Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: NormStats,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats,
    },
    Resize(Var),
    AvgPool(Var),
    MaxPool(Var, Vec<usize>),
    Concat(Vec<Var>),
    Narrow {
        x: Var,
        start: usize,
    },
    Mean(Var),
    Sum(Var),
    Bce {
        p: Var,
        target: Rc<Tensor>,
        eps: f64,
    },
    Ual(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: Shape) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var(nodes.len() - 1)
    }

    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn hw(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        (s[2], s[3])
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = ops::broadcast_binary(&self.value(a), &self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = ops::broadcast_binary(&self.value(a), &self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = ops::broadcast_binary(&self.value(a), &self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(ops::sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn gelu(&self, a: Var) -> Var {
        let out = self.value(a).map(ops::gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn softmax_channels(&self, a: Var) -> Var {
        let out = ops::softmax_channels(&self.value(a));
        self.push(out, Op::SoftmaxChannels(a))
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let bias = b.map(|b| self.value(b));
        let out = ops::conv2d(&self.value(x), &self.value(w), bias.as_deref(), &geom)?;
        Ok(self.push(out, Op::Conv { x, w, b, geom }))
    }

    pub fn group_norm(&self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let (out, stats) = ops::group_norm(&self.value(x), &self.value(gamma), &self.value(beta), groups, eps)?;
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
        ))
    }

    pub fn layer_norm_channels(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, stats) = ops::channel_layer_norm(&self.value(x), &self.value(gamma), &self.value(beta), eps)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
        ))
    }

    pub fn resize_bilinear(&self, x: Var, hw: (usize, usize)) -> Result<Var> {
        if self.hw(x) == hw {
            return Ok(x);
        }
        let out = ops::resize_bilinear(&self.value(x), hw)?;
        Ok(self.push(out, Op::Resize(x)))
    }

    pub fn adaptive_avg_pool(&self, x: Var, hw: (usize, usize)) -> Result<Var> {
        let out = ops::adaptive_avg_pool(&self.value(x), hw)?;
        Ok(self.push(out, Op::AvgPool(x)))
    }

    pub fn adaptive_max_pool(&self, x: Var, hw: (usize, usize)) -> Result<Var> {
        let (out, arg) = ops::adaptive_max_pool(&self.value(x), hw)?;
        Ok(self.push(out, Op::MaxPool(x, arg)))
    }

    pub fn concat_channels(&self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::cat_channels(&refs)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    pub fn narrow_channels(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow_channels(start, len)?;
        Ok(self.push(out, Op::Narrow { x, start }))
    }

    /// Split into equal channel chunks.
    pub fn chunk_channels(&self, x: Var, chunks: usize) -> Result<Vec<Var>> {
        let c = self.shape(x)[1];
        if chunks == 0 || c % chunks != 0 {
            return Err(CodError::Shape(format!("cannot split {c} channels into {chunks} chunks")));
        }
        let len = c / chunks;
        (0..chunks).map(|i| self.narrow_channels(x, i * len, len)).collect()
    }

    pub fn mean(&self, x: Var) -> Var {
        let m = self.value(x).mean();
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Mean binary cross-entropy of probabilities `p` against a constant
    /// target, with `p` clamped to `[eps, 1 - eps]`.
    pub fn bce(&self, p: Var, target: Rc<Tensor>, eps: f64) -> Result<Var> {
        let pv = self.value(p);
        if pv.shape() != target.shape() {
            return Err(CodError::Shape(format!(
                "bce prediction {:?} vs target {:?}",
                pv.shape(),
                target.shape()
            )));
        }
        let total: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &g)| {
                let p = p.clamp(eps, 1.0 - eps);
                -g * p.ln() - (1.0 - g) * (1.0 - p).ln()
            })
            .sum();
        let out = Tensor::scalar(total / pv.numel() as f64);
        Ok(self.push(out, Op::Bce { p, target, eps }))
    }

    /// Mean uncertainty penalty `1 - (2p - 1)^2`.
    pub fn ual(&self, p: Var) -> Var {
        let pv = self.value(p);
        let total: f64 = pv.data().iter().map(|&p| 1.0 - (2.0 * p - 1.0).powi(2)).sum();
        self.push(Tensor::scalar(total / pv.numel() as f64), Op::Ual(p))
    }

    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (out, probs) = ops::attention(&self.value(q), &self.value(k), &self.value(v), heads)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    /// Hash of every non-differentiable branch taken so far: rectifier signs,
    /// max-pool winners and loss clamps. Two evaluations with the same
    /// signature lie on the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let nodes = self.nodes.borrow();
        let mut h = DefaultHasher::new();
        for node in nodes.iter() {
            match &node.op {
                Op::Relu(a) => {
                    for &v in nodes[a.0].value.data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool(_, arg) => arg.hash(&mut h),
                Op::Bce { p, eps, .. } => {
                    for &v in nodes[p.0].value.data() {
                        (v < *eps, v > 1.0 - *eps).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Gradients of the scalar `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(CodError::Shape(format!(
                "backward from non-scalar {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));

        fn accum(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &nodes[i];
            let val = |v: Var| nodes[v.0].value.as_ref();
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accum(&mut grads, *a, reduce_to(&g, val(*a).shape()));
                    accum(&mut grads, *b, reduce_to(&g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *a, reduce_to(&g, val(*a).shape()));
                    accum(&mut grads, *b, reduce_to(&g.map(|x| -x), val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let out = node.value.shape();
                    let mut ga = Tensor::zeros(av.shape());
                    let mut gb = Tensor::zeros(bv.shape());
                    {
                        let (gad, gbd) = (ga.data_mut(), gb.data_mut());
                        let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                        ops::for_each_broadcast(av.shape(), bv.shape(), out, |ia, ib, io| {
                            gad[ia] += gd[io] * bd[ib];
                            gbd[ib] += gd[io] * ad[ia];
                        });
                    }
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => accum(&mut grads, *a, g.map(|x| x * s)),
                Op::Relu(a) => {
                    let d = g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 })?;
                    accum(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, |g, y| g * y * (1.0 - y))?;
                    accum(&mut grads, *a, d);
                }
                Op::Gelu(a) => {
                    let d = g.zip_map(val(*a), |g, x| g * ops::gelu_grad(x))?;
                    accum(&mut grads, *a, d);
                }
                Op::SoftmaxChannels(a) => {
                    accum(&mut grads, *a, ops::softmax_channels_backward(&node.value, &g));
                }
                Op::Conv { x, w, b, geom } => {
                    let (dx, dw, db) = ops::conv2d_backward(val(*x), val(*w), b.is_some(), geom, &g);
                    accum(&mut grads, *x, dx);
                    accum(&mut grads, *w, dw);
                    if let (Some(b), Some(db)) = (b, db) {
                        accum(&mut grads, *b, db);
                    }
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    stats,
                } => {
                    let (dx, dg, db) = ops::group_norm_backward(val(*x), val(*gamma), *groups, stats, &g);
                    accum(&mut grads, *x, dx);
                    accum(&mut grads, *gamma, dg);
                    accum(&mut grads, *beta, db);
                }
                Op::LayerNorm { x, gamma, beta, stats } => {
                    let (dx, dg, db) = ops::channel_layer_norm_backward(val(*x), val(*gamma), stats, &g);
                    accum(&mut grads, *x, dx);
                    accum(&mut grads, *gamma, dg);
                    accum(&mut grads, *beta, db);
                }
                Op::Resize(a) => {
                    accum(&mut grads, *a, ops::resize_bilinear_backward(val(*a).shape(), &g));
                }
                Op::AvgPool(a) => {
                    accum(&mut grads, *a, ops::adaptive_avg_pool_backward(val(*a).shape(), &g));
                }
                Op::MaxPool(a, arg) => {
                    accum(&mut grads, *a, ops::adaptive_max_pool_backward(val(*a).shape(), arg, &g));
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let c = val(*p).channels();
                        accum(&mut grads, *p, g.narrow_channels(start, c)?);
                        start += c;
                    }
                }
                Op::Narrow { x, start } => {
                    let xs = val(*x).shape();
                    let [b, c, h, w] = xs;
                    let len = g.channels();
                    let hw = h * w;
                    let mut d = Tensor::zeros(xs);
                    for bi in 0..b {
                        let dst = (bi * c + start) * hw;
                        let src = bi * len * hw;
                        d.data_mut()[dst..dst + len * hw].copy_from_slice(&g.data()[src..src + len * hw]);
                    }
                    accum(&mut grads, *x, d);
                }
                Op::Mean(a) => {
                    let v = val(*a);
                    let s = g.data()[0] / v.numel() as f64;
                    accum(&mut grads, *a, Tensor::full(v.shape(), s));
                }
                Op::Sum(a) => {
                    accum(&mut grads, *a, Tensor::full(val(*a).shape(), g.data()[0]));
                }
                Op::Bce { p, target, eps } => {
                    let pv = val(*p);
                    let scale = g.data()[0] / pv.numel() as f64;
                    let d = pv.zip_map(target, |p, t| {
                        if p < *eps || p > 1.0 - *eps {
                            0.0
                        } else {
                            scale * (-t / p + (1.0 - t) / (1.0 - p))
                        }
                    })?;
                    accum(&mut grads, *p, d);
                }
                Op::Ual(p) => {
                    let pv = val(*p);
                    let scale = g.data()[0] / pv.numel() as f64;
                    accum(&mut grads, *p, pv.map(|p| -4.0 * (2.0 * p - 1.0) * scale));
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (dq, dk, dv) = ops::attention_backward(val(*q), val(*k), val(*v), *heads, probs, &g);
                    accum(&mut grads, *q, dq);
                    accum(&mut grads, *k, dk);
                    accum(&mut grads, *v, dv);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }
}

/// Sum `g` over the axes where `shape` was broadcast.
fn reduce_to(g: &Tensor, shape: Shape) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    let gd = g.data();
    ops::for_each_broadcast(shape, shape, g.shape(), |i, _, io| od[i] += gd[io]);
    out
}
