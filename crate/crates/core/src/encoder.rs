//! Backbones producing four feature maps at strides 4, 8, 16 and 32, and the
//! per-stage channel reduction to the common decoder width.
//!
//! Stage 1 is the stride-4 (spatially largest) map and stage 4 the stride-32
//! (coarsest) map. Every stride-2 step maps a side `n` to `ceil(n / 2)`, so an
//! input side `H` gives `ceil(H / 2^(stage + 1))` at stage `stage`.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::Archive;
use crate::autograd::{Tape, Var};
use crate::error::{CodError, Result};
use crate::nn::{Conv2d, ConvNorm, Ctx, GroupNorm, LayerNorm, ParamBuilder, ParamStore};
use crate::ops::ConvGeom;
use crate::tensor::Tensor;

pub const NUM_STAGES: usize = 4;

/// Total down-sampling factor of the deepest stage.
pub const MAX_STRIDE: usize = 32;

/// Parameter-name prefix of the backbone inside a full model.
pub const BACKBONE_PREFIX: &str = "encoder.backbone";

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor,
    /// 1..=4, by increasing stride.
    pub stage: usize,
    pub scale: f64,
}

/// Stride of `stage` (1-based).
pub fn stage_stride(stage: usize) -> usize {
    4 << (stage - 1)
}

/// Spatial side of `stage` for an input side `len`.
pub fn stage_len(len: usize, stage: usize) -> usize {
    len.div_ceil(stage_stride(stage))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneFamily {
    /// Plain convolutional stages.
    Toy,
    /// Overlapping patch embedding plus spatial-reduction attention blocks.
    PyramidTransformer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneSpec {
    pub name: String,
    pub stage_channels: Vec<usize>,
    /// Transformer blocks per stage; ignored by the toy family.
    pub depths: Vec<usize>,
    pub pretrained: bool,
    /// Weight archive loaded when `pretrained` is set.
    pub weights: Option<PathBuf>,
}

const PVT_HEADS: [usize; 4] = [1, 2, 5, 8];
const PVT_SR: [usize; 4] = [8, 4, 2, 1];

impl BackboneSpec {
    pub fn toy(stage_channels: [usize; 4]) -> Self {
        Self {
            name: "toy".into(),
            stage_channels: stage_channels.to_vec(),
            depths: vec![2; 4],
            pretrained: false,
            weights: None,
        }
    }

    /// Published pyramid vision transformer v2 widths and depths, `variant`
    /// in `b0..=b5`.
    pub fn pvt_v2(variant: &str) -> Result<Self> {
        let (ch, depths): ([usize; 4], [usize; 4]) = match variant {
            "b0" => ([32, 64, 160, 256], [2, 2, 2, 2]),
            "b1" => ([64, 128, 320, 512], [2, 2, 2, 2]),
            "b2" => ([64, 128, 320, 512], [3, 4, 6, 3]),
            "b3" => ([64, 128, 320, 512], [3, 4, 18, 3]),
            "b4" => ([64, 128, 320, 512], [3, 8, 27, 3]),
            "b5" => ([64, 128, 320, 512], [3, 6, 40, 3]),
            _ => {
                return Err(CodError::InvalidInput(format!(
                    "unknown pyramid transformer variant `{variant}`"
                )))
            }
        };
        Ok(Self {
            name: format!("pvt_v2_{variant}"),
            stage_channels: ch.to_vec(),
            depths: depths.to_vec(),
            pretrained: false,
            weights: None,
        })
    }

    /// Pyramid transformer with caller-chosen widths and depths.
    pub fn pvt_desk(stage_channels: [usize; 4], depths: [usize; 4]) -> Self {
        Self {
            name: "pvt_desk".into(),
            stage_channels: stage_channels.to_vec(),
            depths: depths.to_vec(),
            pretrained: false,
            weights: None,
        }
    }

    /// Resolve a backbone by name; `toy` and `pvt_desk` take their widths and
    /// depths from the arguments.
    pub fn by_name(name: &str, stage_channels: &[usize], depths: &[usize]) -> Result<Self> {
        let spec = match name {
            "toy" => Self {
                name: name.into(),
                stage_channels: stage_channels.to_vec(),
                depths: vec![2; 4],
                pretrained: false,
                weights: None,
            },
            "pvt_desk" => Self {
                name: name.into(),
                stage_channels: stage_channels.to_vec(),
                depths: depths.to_vec(),
                pretrained: false,
                weights: None,
            },
            _ => match name.strip_prefix("pvt_v2_") {
                Some(v) => Self::pvt_v2(v)?,
                None => return Err(CodError::InvalidInput(format!("unknown backbone `{name}`"))),
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn family(&self) -> BackboneFamily {
        if self.name == "toy" {
            BackboneFamily::Toy
        } else {
            BackboneFamily::PyramidTransformer
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != NUM_STAGES {
            return Err(CodError::InvalidInput(format!(
                "backbone `{}` needs {NUM_STAGES} stage widths, got {}",
                self.name,
                self.stage_channels.len()
            )));
        }
        if self.stage_channels.contains(&0) {
            return Err(CodError::InvalidInput(format!(
                "backbone `{}` has a zero stage width",
                self.name
            )));
        }
        if self.family() == BackboneFamily::PyramidTransformer
            && (self.depths.len() != NUM_STAGES || self.depths.contains(&0))
        {
            return Err(CodError::InvalidInput(format!(
                "backbone `{}` needs {NUM_STAGES} positive depths, got {:?}",
                self.name, self.depths
            )));
        }
        Ok(())
    }
}

/// Largest head count not above the published one that divides `c`.
fn pvt_heads(stage: usize, c: usize) -> usize {
    (1..=PVT_HEADS[stage]).rev().find(|h| c % h == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
struct ToyStage {
    down: ConvNorm,
    refine: ConvNorm,
}

#[derive(Clone, Debug)]
struct PvtBlock {
    norm1: LayerNorm,
    q: Conv2d,
    kv: Conv2d,
    sr: Option<(usize, Conv2d, LayerNorm)>,
    heads: usize,
    proj: Conv2d,
    norm2: LayerNorm,
    fc1: Conv2d,
    dw: Conv2d,
    fc2: Conv2d,
}

impl PvtBlock {
    fn new(pb: &mut ParamBuilder, c: usize, heads: usize, sr: usize, mlp_ratio: usize) -> Result<Self> {
        let hidden = c * mlp_ratio;
        let sr = if sr > 1 {
            Some((
                sr,
                Conv2d::new(&mut pb.sub("sr"), c, c, 1, 1, true)?,
                LayerNorm::new(&mut pb.sub("sr_norm"), c)?,
            ))
        } else {
            None
        };
        let mut dw_geom = ConvGeom::new(1, 1);
        dw_geom.groups = hidden;
        Ok(Self {
            norm1: LayerNorm::new(&mut pb.sub("norm1"), c)?,
            q: Conv2d::new(&mut pb.sub("q"), c, c, 1, 1, true)?,
            kv: Conv2d::new(&mut pb.sub("kv"), c, 2 * c, 1, 1, true)?,
            sr,
            heads,
            proj: Conv2d::new(&mut pb.sub("proj"), c, c, 1, 1, true)?,
            norm2: LayerNorm::new(&mut pb.sub("norm2"), c)?,
            fc1: Conv2d::new(&mut pb.sub("fc1"), c, hidden, 1, 1, true)?,
            dw: Conv2d::with_geom(&mut pb.sub("dwconv"), hidden, hidden, 3, dw_geom, true)?,
            fc2: Conv2d::new(&mut pb.sub("fc2"), hidden, c, 1, 1, true)?,
        })
    }

    fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var> {
        let t = ctx.tape;
        let y = self.norm1.forward(ctx, x)?;
        let q = self.q.forward(ctx, y)?;
        let src = match &self.sr {
            Some((r, conv, norm)) => {
                let (h, w) = t.hw(y);
                let pooled = t.adaptive_avg_pool(y, (h.div_ceil(*r), w.div_ceil(*r)))?;
                let reduced = conv.forward(ctx, pooled)?;
                norm.forward(ctx, reduced)?
            }
            None => y,
        };
        let kv = self.kv.forward(ctx, src)?;
        let kv = t.chunk_channels(kv, 2)?;
        let a = t.attention(q, kv[0], kv[1], self.heads)?;
        let a = self.proj.forward(ctx, a)?;
        let x = t.add(x, a)?;
        let y = self.norm2.forward(ctx, x)?;
        let y = self.fc1.forward(ctx, y)?;
        let y = self.dw.forward(ctx, y)?;
        let y = t.gelu(y);
        let y = self.fc2.forward(ctx, y)?;
        t.add(x, y)
    }
}

#[derive(Clone, Debug)]
struct PvtStage {
    embed: Conv2d,
    embed_norm: LayerNorm,
    blocks: Vec<PvtBlock>,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
enum Backbone {
    Toy(Vec<ToyStage>),
    Pvt(Vec<PvtStage>),
}

impl Backbone {
    fn new(pb: &mut ParamBuilder, spec: &BackboneSpec) -> Result<Self> {
        spec.validate()?;
        let ch = &spec.stage_channels;
        match spec.family() {
            BackboneFamily::Toy => {
                let mut stages = Vec::with_capacity(NUM_STAGES);
                let mut cin = 3;
                for (i, &c) in ch.iter().enumerate() {
                    let mut sb = pb.sub(format!("stage{}", i + 1));
                    stages.push(ToyStage {
                        down: ConvNorm::new(&mut sb.sub("down"), cin, c, 3, 2)?,
                        refine: ConvNorm::new(&mut sb.sub("refine"), c, c, 3, if i == 0 { 2 } else { 1 })?,
                    });
                    cin = c;
                }
                Ok(Self::Toy(stages))
            }
            BackboneFamily::PyramidTransformer => {
                let mlp_ratio = if spec.name == "pvt_desk" { 2 } else { 8 };
                let mut stages = Vec::with_capacity(NUM_STAGES);
                let mut cin = 3;
                for (i, &c) in ch.iter().enumerate() {
                    let mut sb = pb.sub(format!("stage{}", i + 1));
                    let (k, s) = if i == 0 { (7, 4) } else { (3, 2) };
                    let embed = Conv2d::new(&mut sb.sub("patch_embed"), cin, c, k, s, true)?;
                    let embed_norm = LayerNorm::new(&mut sb.sub("patch_norm"), c)?;
                    let ratio = if i >= 2 && spec.name != "pvt_desk" && spec.name != "pvt_v2_b5" {
                        4
                    } else {
                        mlp_ratio
                    };
                    let blocks = (0..spec.depths[i])
                        .map(|j| PvtBlock::new(&mut sb.sub(format!("block{j}")), c, pvt_heads(i, c), PVT_SR[i], ratio))
                        .collect::<Result<_>>()?;
                    let norm = LayerNorm::new(&mut sb.sub("norm"), c)?;
                    stages.push(PvtStage {
                        embed,
                        embed_norm,
                        blocks,
                        norm,
                    });
                    cin = c;
                }
                Ok(Self::Pvt(stages))
            }
        }
    }

    fn forward(&self, ctx: &Ctx, image: Var) -> Result<Vec<Var>> {
        let mut x = image;
        let mut out = Vec::with_capacity(NUM_STAGES);
        match self {
            Self::Toy(stages) => {
                for s in stages {
                    x = s.down.forward(ctx, x)?;
                    x = s.refine.forward(ctx, x)?;
                    out.push(x);
                }
            }
            Self::Pvt(stages) => {
                for s in stages {
                    x = s.embed.forward(ctx, x)?;
                    x = s.embed_norm.forward(ctx, x)?;
                    for b in &s.blocks {
                        x = b.forward(ctx, x)?;
                    }
                    x = s.norm.forward(ctx, x)?;
                    out.push(x);
                }
            }
        }
        Ok(out)
    }
}

/// 1x1 convolution, normalisation and rectifier to the common width.
#[derive(Clone, Debug)]
pub struct ChannelReducer {
    pub block: ConvNorm,
}

impl ChannelReducer {
    pub fn new(pb: &mut ParamBuilder, cin: usize, c_common: usize) -> Result<Self> {
        if c_common == 0 || c_common > cin {
            return Err(CodError::InvalidInput(format!(
                "cannot reduce {cin} channels to {c_common}"
            )));
        }
        Ok(Self {
            block: ConvNorm {
                conv: Conv2d::new(&mut pb.sub("conv"), cin, c_common, 1, 1, true)?,
                norm: GroupNorm::new(&mut pb.sub("norm"), c_common)?,
                relu: true,
            },
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var> {
        self.block.forward(ctx, x)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    spec: BackboneSpec,
    backbone: Backbone,
    reducers: Vec<ChannelReducer>,
    c_common: usize,
    min_side: usize,
}

impl Encoder {
    pub fn new(pb: &mut ParamBuilder, spec: &BackboneSpec, c_common: usize) -> Result<Self> {
        let backbone = Backbone::new(&mut pb.sub("backbone"), spec)?;
        let reducers = spec
            .stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| ChannelReducer::new(&mut pb.sub(format!("reduce{}", i + 1)), c, c_common))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: spec.clone(),
            backbone,
            reducers,
            c_common,
            min_side: MAX_STRIDE,
        })
    }

    /// Stand-alone encoder with freshly initialised parameters named
    /// `encoder.*`.
    pub fn build(spec: &BackboneSpec, c_common: usize, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Self::new(&mut ParamBuilder::new(&mut store, &mut rng).sub("encoder"), spec, c_common)?;
        Ok((enc, store))
    }

    /// Smallest accepted input side (default [`MAX_STRIDE`]).
    pub fn with_min_side(mut self, min_side: usize) -> Self {
        self.min_side = min_side.max(1);
        self
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn c_common(&self) -> usize {
        self.c_common
    }

    fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        let [_, c, h, w] = shape;
        if c != 3 {
            return Err(CodError::Shape(format!("encoder expects 3 channels, got {c}")));
        }
        if h < self.min_side || w < self.min_side {
            return Err(CodError::InvalidInput(format!(
                "input {h}x{w} is too small for the encoder (minimum side {})",
                self.min_side
            )));
        }
        Ok(())
    }

    /// Native-width backbone features, stage 1 first.
    pub fn backbone_vars(&self, ctx: &Ctx, image: Var) -> Result<Vec<Var>> {
        self.check_input(ctx.tape.shape(image))?;
        self.backbone.forward(ctx, image)
    }

    /// Reduced features, stage 1 first.
    pub fn forward(&self, ctx: &Ctx, image: Var) -> Result<Vec<Var>> {
        let raw = self.backbone_vars(ctx, image)?;
        raw.into_iter()
            .zip(&self.reducers)
            .map(|(x, r)| r.forward(ctx, x))
            .collect()
    }

    /// Backbone features at native widths.
    pub fn extract_features(&self, store: &ParamStore, image: &Tensor, scale: f64) -> Result<Vec<FeatureMap>> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store);
        let x = tape.leaf(image.clone());
        let vars = self.backbone_vars(&ctx, x)?;
        Ok(vars
            .into_iter()
            .enumerate()
            .map(|(i, v)| FeatureMap {
                data: tape.value(v).as_ref().clone(),
                stage: i + 1,
                scale,
            })
            .collect())
    }

    /// Apply the stage's channel reduction to a native-width map.
    pub fn reduce_channels(&self, store: &ParamStore, f: &FeatureMap) -> Result<FeatureMap> {
        let r = f
            .stage
            .checked_sub(1)
            .and_then(|i| self.reducers.get(i))
            .ok_or_else(|| CodError::InvalidInput(format!("no stage {}", f.stage)))?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store);
        let x = tape.leaf(f.data.clone());
        let y = r.forward(&ctx, x)?;
        Ok(FeatureMap {
            data: tape.value(y).as_ref().clone(),
            stage: f.stage,
            scale: f.scale,
        })
    }

    pub fn reducer(&self, stage: usize) -> &ChannelReducer {
        &self.reducers[stage - 1]
    }
}

/// Load backbone weights from an archive whose keys are the parameter names
/// below [`BACKBONE_PREFIX`]. Returns the archive keys left unused (such as a
/// classification head).
pub fn load_backbone_weights(store: &mut ParamStore, path: &Path) -> Result<Vec<String>> {
    let archive = Archive::load(path)?;
    let unused = archive.load_into(store, BACKBONE_PREFIX)?;
    if !unused.is_empty() {
        log::warn!("{} unused keys in {}", unused.len(), path.display());
    }
    Ok(unused)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize) -> Tensor {
        Tensor::from_fn([1, 3, h, w], |_, c, y, x| ((c * 13 + y * 5 + x * 7) % 11) as f64 / 10.0)
    }

    #[test]
    fn toy_stage_shapes() {
        let (enc, store) = Encoder::build(&BackboneSpec::toy([16, 32, 64, 128]), 8, 0).unwrap();
        let f = enc.extract_features(&store, &image(64, 64), 1.0).unwrap();
        let shapes: Vec<_> = f.iter().map(|m| m.data.shape()).collect();
        assert_eq!(
            shapes,
            vec![[1, 16, 16, 16], [1, 32, 8, 8], [1, 64, 4, 4], [1, 128, 2, 2]]
        );
        assert_eq!(f.iter().map(|m| m.stage).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn odd_sizes_use_ceiling_strides() {
        for spec in [BackboneSpec::toy([4, 4, 4, 4]), BackboneSpec::pvt_desk([4, 4, 4, 4], [1, 1, 1, 1])] {
            let (enc, store) = Encoder::build(&spec, 4, 1).unwrap();
            let f = enc.extract_features(&store, &image(37, 50), 1.5).unwrap();
            for m in &f {
                assert_eq!(m.data.hw(), (stage_len(37, m.stage), stage_len(50, m.stage)));
                assert!(m.data.all_finite());
            }
        }
    }

    #[test]
    fn rejects_small_inputs() {
        let (enc, store) = Encoder::build(&BackboneSpec::toy([4, 4, 4, 4]), 4, 0).unwrap();
        assert!(enc.extract_features(&store, &image(16, 64), 1.0).is_err());
        let enc = enc.with_min_side(16);
        assert!(enc.extract_features(&store, &image(16, 16), 1.0).is_ok());
    }

    #[test]
    fn spec_validation() {
        assert!(BackboneSpec::by_name("toy", &[1, 2, 3], &[]).is_err());
        assert!(BackboneSpec::by_name("toy", &[1, 0, 3, 4], &[]).is_err());
        assert!(BackboneSpec::by_name("resnet", &[1, 2, 3, 4], &[]).is_err());
        assert!(BackboneSpec::by_name("pvt_desk", &[4, 4, 4, 4], &[1, 0, 1, 1]).is_err());
        let b2 = BackboneSpec::by_name("pvt_v2_b2", &[], &[]).unwrap();
        assert_eq!(b2.stage_channels, vec![64, 128, 320, 512]);
        assert_eq!(b2.family(), BackboneFamily::PyramidTransformer);
    }

    #[test]
    fn head_count_divides_width() {
        assert_eq!(pvt_heads(2, 160), 5);
        assert_eq!(pvt_heads(2, 16), 4);
        assert_eq!(pvt_heads(3, 12), 6);
    }
}
