//! Parameter storage and the small set of layers the network is built from.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{CodError, Result};
use crate::ops::{ConvGeom, Padding};
use crate::tensor::{Shape, Tensor};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors. Names are dotted paths such as
/// `absiu.2.head.1.conv.weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(&name) {
            return Err(CodError::InvalidInput(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Replace the value of `name`, checking its shape.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.id(name).ok_or_else(|| CodError::Archive {
            key: name.to_string(),
            msg: "not a parameter of this model".into(),
        })?;
        let expected = self.tensors[id.0].shape();
        if value.shape() != expected {
            return Err(CodError::Archive {
                key: name.to_string(),
                msg: format!("shape {:?} does not match expected {:?}", value.shape(), expected),
            });
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    /// Set every parameter to zero.
    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().fill(0.0);
        }
    }

    /// Set every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.names.iter().zip(&mut self.tensors) {
            if name.starts_with(prefix) {
                t.data_mut().fill(0.0);
            }
        }
    }
}

/// Creates parameters under a name prefix, drawing initial values from a
/// seeded generator.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: impl AsRef<str>) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn constant(&mut self, name: &str, shape: Shape, value: f64) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.insert(full, Tensor::full(shape, value))
    }

    pub fn uniform(&mut self, name: &str, shape: Shape, bound: f64) -> Result<ParamId> {
        let full = self.full_name(name);
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-bound..bound));
        self.store.insert(full, t)
    }
}

/// Test and debugging switches that alter a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Hooks {
    /// Replace every scale-attention map by a one-hot selection of this scale
    /// index (0 = main scale).
    pub force_scale_attention: Option<usize>,
    /// Feed zeros in place of refined feedback inputs in the decoder.
    pub sever_feedback: bool,
    /// Padding used by all spatial (k > 1, stride 1) convolutions.
    pub padding: Padding,
}

/// Forward-pass context: the tape plus every parameter bound as a leaf.
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    params: Vec<Var>,
    pub hooks: Hooks,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, store: &ParamStore) -> Self {
        Self::with_hooks(tape, store, Hooks::default())
    }

    pub fn with_hooks(tape: &'t Tape, store: &ParamStore, hooks: Hooks) -> Self {
        let params = store.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        Self { tape, params, hooks }
    }

    #[inline]
    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }
}

/// Number of normalisation groups used for `c` channels.
pub fn norm_groups(c: usize) -> usize {
    [4, 2, 1].into_iter().find(|g| c % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv2d {
    /// Square `k x k` convolution with `k / 2` padding.
    pub fn new(pb: &mut ParamBuilder, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Result<Self> {
        Self::with_geom(pb, cin, cout, k, ConvGeom::new(stride, k / 2), bias)
    }

    pub fn with_geom(
        pb: &mut ParamBuilder,
        cin: usize,
        cout: usize,
        k: usize,
        geom: ConvGeom,
        bias: bool,
    ) -> Result<Self> {
        let cin_g = cin / geom.groups;
        let bound = (6.0 / (cin_g * k * k) as f64).sqrt();
        let weight = pb.uniform("weight", [cout, cin_g, k, k], bound)?;
        let bias = if bias {
            Some(pb.constant("bias", [1, cout, 1, 1], 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias, geom })
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var> {
        let mut geom = self.geom;
        if geom.pad > 0 && geom.stride == 1 {
            geom.padding = ctx.hooks.padding;
        }
        ctx.tape
            .conv2d(x, ctx.p(self.weight), self.bias.map(|b| ctx.p(b)), geom)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(pb: &mut ParamBuilder, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.constant("gamma", [1, c, 1, 1], 1.0)?,
            beta: pb.constant("beta", [1, c, 1, 1], 0.0)?,
            groups: norm_groups(c),
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var> {
        ctx.tape
            .group_norm(x, ctx.p(self.gamma), ctx.p(self.beta), self.groups, NORM_EPS)
    }
}

/// Per-pixel normalisation across channels.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.constant("gamma", [1, c, 1, 1], 1.0)?,
            beta: pb.constant("beta", [1, c, 1, 1], 0.0)?,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var> {
        ctx.tape
            .layer_norm_channels(x, ctx.p(self.gamma), ctx.p(self.beta), NORM_EPS)
    }
}

/// Convolution, group normalisation and (optionally) a rectifier.
#[derive(Clone, Debug)]
pub struct ConvNorm {
    pub conv: Conv2d,
    pub norm: GroupNorm,
    pub relu: bool,
}

impl ConvNorm {
    pub fn new(pb: &mut ParamBuilder, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut pb.sub("conv"), cin, cout, k, stride, false)?,
            norm: GroupNorm::new(&mut pb.sub("norm"), cout)?,
            relu: true,
        })
    }

    pub fn without_relu(mut self) -> Self {
        self.relu = false;
        self
    }

    /// Output before the rectifier.
    pub fn forward_pre_act(&self, ctx: &Ctx, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        self.norm.forward(ctx, y)
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var> {
        let y = self.forward_pre_act(ctx, x)?;
        Ok(if self.relu { ctx.tape.relu(y) } else { y })
    }
}
