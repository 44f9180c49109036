//! Multi-granularity fusion unit.
//!
//! For an input `x` of width `c` and `n` feedback maps:
//!
//! 0. feedback maps are resized to `x`'s resolution, concatenated after `x`
//!    in the order given, and a 1x1 conv maps them back to `c` channels;
//! 1. a 1x1 conv expands to `6c` channels, split into six groups of `c`;
//! 2. group 1 runs 3x3 conv + norm + rectifier to `3c` and splits into
//!    thirds `(propagate, gate, feature)`; groups 2..=5 do the same on the
//!    concatenation of their slice and the previous propagate part; group 6
//!    produces only `(gate, feature)`;
//! 3. the six gate parts are pooled to `1x1`, squeezed by [`SQUEEZE_RATIO`],
//!    rectified, expanded back to `6c` and passed through a sigmoid;
//! 4. the attention vector reweights the six concatenated feature parts;
//! 5. a 3x3 conv + norm refines them to `c`, the unit input `x` is added and
//!    a rectifier applied.

use crate::autograd::{Tape, Var};
use crate::encoder::FeatureMap;
use crate::error::{CodError, Result};
use crate::nn::{Conv2d, ConvNorm, Ctx, Hooks, ParamBuilder, ParamStore};
use crate::tensor::Tensor;

pub const NUM_GROUPS: usize = 6;
pub const SQUEEZE_RATIO: usize = 4;

/// Parts produced by one group of the chain.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupParts<T> {
    /// Absent for the last group.
    pub propagate: Option<T>,
    pub gate: T,
    pub feature: T,
}

#[derive(Clone, Debug)]
pub struct MgfuVars {
    pub output: Var,
    /// `(B, 6c, 1, 1)` channel attention in `(0, 1)`.
    pub channel_attention: Var,
    pub chain: Vec<GroupParts<Var>>,
}

/// Plain-tensor copy of [`MgfuVars`] for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct MgfuTrace {
    pub channel_attention: Tensor,
    pub chain: Vec<GroupParts<Tensor>>,
}

#[derive(Clone, Debug)]
pub struct Mgfu {
    c: usize,
    n_feedback: usize,
    entry: Option<Conv2d>,
    expand: Conv2d,
    groups: Vec<ConvNorm>,
    squeeze: Conv2d,
    excite: Conv2d,
    refine: ConvNorm,
}

impl Mgfu {
    pub fn new(pb: &mut ParamBuilder, c: usize, n_feedback: usize) -> Result<Self> {
        if c == 0 {
            return Err(CodError::InvalidInput("fusion unit width must be positive".into()));
        }
        let entry = if n_feedback > 0 {
            Some(Conv2d::new(&mut pb.sub("entry"), (1 + n_feedback) * c, c, 1, 1, true)?)
        } else {
            None
        };
        let wide = NUM_GROUPS * c;
        let groups = (0..NUM_GROUPS)
            .map(|j| {
                let cin = if j == 0 { c } else { 2 * c };
                let cout = if j + 1 == NUM_GROUPS { 2 * c } else { 3 * c };
                ConvNorm::new(&mut pb.sub(format!("group{j}")), cin, cout, 3, 1)
            })
            .collect::<Result<_>>()?;
        let squeezed = wide.div_ceil(SQUEEZE_RATIO);
        Ok(Self {
            c,
            n_feedback,
            entry,
            expand: Conv2d::new(&mut pb.sub("expand"), c, wide, 1, 1, true)?,
            groups,
            squeeze: Conv2d::new(&mut pb.sub("squeeze"), wide, squeezed, 1, 1, true)?,
            excite: Conv2d::new(&mut pb.sub("excite"), squeezed, wide, 1, 1, true)?,
            refine: ConvNorm::new(&mut pb.sub("refine"), wide, c, 3, 1)?.without_relu(),
        })
    }

    pub fn width(&self) -> usize {
        self.c
    }

    pub fn num_feedback(&self) -> usize {
        self.n_feedback
    }

    pub fn forward(&self, ctx: &Ctx, x: Var, feedback: &[Var]) -> Result<MgfuVars> {
        let t = ctx.tape;
        let [_, cx, h, w] = t.shape(x);
        if cx != self.c {
            return Err(CodError::Shape(format!("fusion unit expects {} channels, got {cx}", self.c)));
        }
        if feedback.len() != self.n_feedback {
            return Err(CodError::Shape(format!(
                "fusion unit built for {} feedback inputs, got {}",
                self.n_feedback,
                feedback.len()
            )));
        }
        let trunk = match &self.entry {
            Some(entry) => {
                let mut parts = vec![x];
                for &f in feedback {
                    let [fb, fc, _, _] = t.shape(f);
                    if fc != self.c || fb != t.shape(x)[0] {
                        return Err(CodError::Shape(format!(
                            "feedback {:?} does not match input {:?}",
                            t.shape(f),
                            t.shape(x)
                        )));
                    }
                    let r = t.resize_bilinear(f, (h, w))?;
                    if t.hw(r) != (h, w) {
                        return Err(CodError::Shape("feedback resize failed".into()));
                    }
                    parts.push(r);
                }
                let cat = t.concat_channels(&parts)?;
                entry.forward(ctx, cat)?
            }
            None => x,
        };
        let expanded = self.expand.forward(ctx, trunk)?;
        let slices = t.chunk_channels(expanded, NUM_GROUPS)?;
        let mut chain = Vec::with_capacity(NUM_GROUPS);
        let mut prev: Option<Var> = None;
        for (j, (&slice, conv)) in slices.iter().zip(&self.groups).enumerate() {
            let input = match prev {
                Some(p) => t.concat_channels(&[slice, p])?,
                None => slice,
            };
            let y = conv.forward(ctx, input)?;
            let parts = if j + 1 == NUM_GROUPS {
                let p = t.chunk_channels(y, 2)?;
                GroupParts {
                    propagate: None,
                    gate: p[0],
                    feature: p[1],
                }
            } else {
                let p = t.chunk_channels(y, 3)?;
                GroupParts {
                    propagate: Some(p[0]),
                    gate: p[1],
                    feature: p[2],
                }
            };
            prev = parts.propagate;
            chain.push(parts);
        }
        let gates: Vec<Var> = chain.iter().map(|p| p.gate).collect();
        let features: Vec<Var> = chain.iter().map(|p| p.feature).collect();
        let gate = t.concat_channels(&gates)?;
        let feature = t.concat_channels(&features)?;
        let pooled = t.adaptive_avg_pool(gate, (1, 1))?;
        let squeezed = self.squeeze.forward(ctx, pooled)?;
        let squeezed = t.relu(squeezed);
        let excited = self.excite.forward(ctx, squeezed)?;
        let channel_attention = t.sigmoid(excited);
        let weighted = t.mul(feature, channel_attention)?;
        let refined = self.refine.forward(ctx, weighted)?;
        let sum = t.add(refined, x)?;
        Ok(MgfuVars {
            output: t.relu(sum),
            channel_attention,
            chain,
        })
    }

    /// Plain-tensor forward returning the output and its trace.
    pub fn apply(&self, store: &ParamStore, x: &FeatureMap, feedback: &[&FeatureMap], hooks: Hooks) -> Result<(FeatureMap, MgfuTrace)> {
        let tape = Tape::new();
        let ctx = Ctx::with_hooks(&tape, store, hooks);
        let xv = tape.leaf(x.data.clone());
        let fb: Vec<Var> = feedback.iter().map(|f| tape.leaf(f.data.clone())).collect();
        let out = self.forward(&ctx, xv, &fb)?;
        let val = |v: Var| tape.value(v).as_ref().clone();
        let trace = MgfuTrace {
            channel_attention: val(out.channel_attention),
            chain: out
                .chain
                .iter()
                .map(|p| GroupParts {
                    propagate: p.propagate.map(val),
                    gate: val(p.gate),
                    feature: val(p.feature),
                })
                .collect(),
        };
        Ok((
            FeatureMap {
                data: val(out.output),
                stage: x.stage,
                scale: x.scale,
            },
            trace,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fmap(seed: u64, shape: [usize; 4]) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap {
            data: Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0)),
            stage: 1,
            scale: 1.0,
        }
    }

    fn build(c: usize, n: usize) -> (Mgfu, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = Mgfu::new(&mut ParamBuilder::new(&mut store, &mut rng), c, n).unwrap();
        (m, store)
    }

    #[test]
    fn chain_structure() {
        let (m, store) = build(4, 2);
        let x = fmap(0, [1, 4, 6, 6]);
        let f1 = fmap(1, [1, 4, 3, 3]);
        let f2 = fmap(2, [1, 4, 2, 2]);
        let (out, trace) = m.apply(&store, &x, &[&f1, &f2], Hooks::default()).unwrap();
        assert_eq!(out.data.shape(), [1, 4, 6, 6]);
        assert_eq!(trace.chain.len(), NUM_GROUPS);
        assert!(trace.chain[..5].iter().all(|p| p.propagate.is_some()));
        assert!(trace.chain[5].propagate.is_none());
        for p in &trace.chain {
            assert_eq!(p.gate.shape(), [1, 4, 6, 6]);
        }
        assert_eq!(trace.channel_attention.shape(), [1, 24, 1, 1]);
        assert!(trace.channel_attention.data().iter().all(|&a| a > 0.0 && a < 1.0));
        assert!(out.data.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn rejects_mismatched_feedback() {
        let (m, store) = build(4, 1);
        let x = fmap(0, [1, 4, 6, 6]);
        assert!(m.apply(&store, &x, &[], Hooks::default()).is_err());
        let wrong = fmap(1, [1, 5, 3, 3]);
        assert!(m.apply(&store, &x, &[&wrong], Hooks::default()).is_err());
    }
}
