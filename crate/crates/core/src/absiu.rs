//! Attention-based scale integration: fuses the same-stage feature maps of
//! every input scale with per-group spatial attention softmaxed over scales.
//!
//! With `S` scales of width `c` and `G` groups of width `cg = c / G`:
//!
//! 1. each scale passes through its own 3x3 conv + norm + rectifier;
//! 2. the `S` maps are concatenated and mixed by a 1x1 conv into a common
//!    space `Z` of width `S * c`, read as `S` blocks of `c` channels;
//! 3. group `g` owns channels `[g*cg, (g+1)*cg)` of every block, giving the
//!    per-scale slices `F[g, s]`;
//! 4. a head (3x3 conv + norm + rectifier, 1x1 conv to `S`, softmax) turns
//!    the concatenated `F[g, 0..S]` into attention maps `A[g, s]`;
//! 5. group output `O[g] = sum_s A[g, s] * F[g, s]`;
//! 6. the groups occupy disjoint channel slots of the `c`-wide output, so
//!    summing them across groups is their concatenation.

use crate::autograd::{Tape, Var};
use crate::encoder::FeatureMap;
use crate::error::{CodError, Result};
use crate::nn::{Conv2d, ConvNorm, Ctx, Hooks, ParamBuilder, ParamStore};
use crate::tensor::Tensor;

pub const GROUPS: usize = 4;

/// Attention maps of one forward pass: `groups[g]` is `(B, S, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    pub groups: Vec<Tensor>,
}

impl AttentionStack {
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn num_scales(&self) -> usize {
        self.groups[0].channels()
    }

    pub fn at(&self, b: usize, g: usize, s: usize, y: usize, x: usize) -> f64 {
        self.groups[g].at(b, s, y, x)
    }

    /// Largest deviation of a per-pixel scale sum from 1.
    pub fn max_normalisation_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for t in &self.groups {
            let [b, s, h, w] = t.shape();
            for bi in 0..b {
                for y in 0..h {
                    for x in 0..w {
                        let sum: f64 = (0..s).map(|si| t.at(bi, si, y, x)).sum();
                        worst = worst.max((sum - 1.0).abs());
                    }
                }
            }
        }
        worst
    }
}

#[derive(Clone, Debug)]
struct GroupHead {
    hidden: ConvNorm,
    logits: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Absiu {
    c: usize,
    scales: usize,
    pre: Vec<ConvNorm>,
    fuse: Conv2d,
    heads: Vec<GroupHead>,
}

/// Intermediate values of a forward pass on the tape.
#[derive(Clone, Debug)]
pub struct AbsiuVars {
    pub output: Var,
    /// `(B, S * c, h, w)` common-space tensor.
    pub common: Var,
    /// `attention[g]` is `(B, S, h, w)`.
    pub attention: Vec<Var>,
}

impl Absiu {
    pub fn new(pb: &mut ParamBuilder, c: usize, scales: usize) -> Result<Self> {
        if c == 0 || c % GROUPS != 0 {
            return Err(CodError::InvalidInput(format!(
                "scale integration width {c} is not divisible by {GROUPS} groups"
            )));
        }
        if scales == 0 {
            return Err(CodError::InvalidInput("scale integration needs at least one scale".into()));
        }
        let cg = c / GROUPS;
        let pre = (0..scales)
            .map(|s| ConvNorm::new(&mut pb.sub(format!("pre{s}")), c, c, 3, 1))
            .collect::<Result<_>>()?;
        let fuse = Conv2d::new(&mut pb.sub("fuse"), scales * c, scales * c, 1, 1, true)?;
        let heads = (0..GROUPS)
            .map(|g| {
                let mut hb = pb.sub(format!("head{g}"));
                Ok(GroupHead {
                    hidden: ConvNorm::new(&mut hb.sub("hidden"), scales * cg, scales * cg, 3, 1)?,
                    logits: Conv2d::new(&mut hb.sub("logits"), scales * cg, scales, 1, 1, true)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            c,
            scales,
            pre,
            fuse,
            heads,
        })
    }

    pub fn width(&self) -> usize {
        self.c
    }

    pub fn num_scales(&self) -> usize {
        self.scales
    }

    /// `inputs[0]` is the main scale; all inputs must share one shape.
    pub fn forward(&self, ctx: &Ctx, inputs: &[Var]) -> Result<AbsiuVars> {
        let t = ctx.tape;
        if inputs.len() != self.scales {
            return Err(CodError::Shape(format!(
                "scale integration built for {} scales, got {}",
                self.scales,
                inputs.len()
            )));
        }
        let shape = t.shape(inputs[0]);
        if shape[1] != self.c {
            return Err(CodError::Shape(format!("expected {} channels, got {}", self.c, shape[1])));
        }
        if let Some(&bad) = inputs.iter().find(|&&v| t.shape(v) != shape) {
            return Err(CodError::Shape(format!(
                "scale inputs disagree: {:?} vs {:?}",
                shape,
                t.shape(bad)
            )));
        }
        let processed = inputs
            .iter()
            .zip(&self.pre)
            .map(|(&x, p)| p.forward(ctx, x))
            .collect::<Result<Vec<_>>>()?;
        let cat = t.concat_channels(&processed)?;
        let common = self.fuse.forward(ctx, cat)?;
        let cg = self.c / GROUPS;
        let mut attention = Vec::with_capacity(GROUPS);
        let mut outputs = Vec::with_capacity(GROUPS);
        for (g, head) in self.heads.iter().enumerate() {
            let slices = (0..self.scales)
                .map(|s| t.narrow_channels(common, s * self.c + g * cg, cg))
                .collect::<Result<Vec<_>>>()?;
            let a = match ctx.hooks.force_scale_attention {
                Some(sel) => {
                    if sel >= self.scales {
                        return Err(CodError::InvalidInput(format!(
                            "forced scale {sel} out of range for {} scales",
                            self.scales
                        )));
                    }
                    let [b, _, h, w] = shape;
                    t.leaf(Tensor::from_fn([b, self.scales, h, w], |_, s, _, _| {
                        if s == sel {
                            1.0
                        } else {
                            0.0
                        }
                    }))
                }
                None => {
                    let group_in = t.concat_channels(&slices)?;
                    let hidden = head.hidden.forward(ctx, group_in)?;
                    let logits = head.logits.forward(ctx, hidden)?;
                    t.softmax_channels(logits)
                }
            };
            let mut acc: Option<Var> = None;
            for (s, &f) in slices.iter().enumerate() {
                let w = t.narrow_channels(a, s, 1)?;
                let term = t.mul(f, w)?;
                acc = Some(match acc {
                    Some(prev) => t.add(prev, term)?,
                    None => term,
                });
            }
            attention.push(a);
            outputs.push(acc.expect("at least one scale"));
        }
        let output = t.concat_channels(&outputs)?;
        Ok(AbsiuVars {
            output,
            common,
            attention,
        })
    }

    /// Plain-tensor forward returning the fused map and its attention stack.
    pub fn apply(&self, store: &ParamStore, inputs: &[&FeatureMap], hooks: Hooks) -> Result<(FeatureMap, AttentionStack)> {
        let first = inputs
            .first()
            .ok_or_else(|| CodError::InvalidInput("no scale inputs".into()))?;
        let tape = Tape::new();
        let ctx = Ctx::with_hooks(&tape, store, hooks);
        let vars: Vec<Var> = inputs.iter().map(|f| tape.leaf(f.data.clone())).collect();
        let out = self.forward(&ctx, &vars)?;
        let stack = AttentionStack {
            groups: out.attention.iter().map(|&a| tape.value(a).as_ref().clone()).collect(),
        };
        Ok((
            FeatureMap {
                data: tape.value(out.output).as_ref().clone(),
                stage: first.stage,
                scale: first.scale,
            },
            stack,
        ))
    }
}
