//! The full network: pyramid, shared encoder, per-stage scale integration,
//! decoder and head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::absiu::Absiu;
use crate::autograd::{Tape, Var};
use crate::decoder::{DecodeVars, Decoder, DecodingStrategy};
use crate::encoder::{load_backbone_weights, BackboneSpec, Encoder, NUM_STAGES};
use crate::error::{CodError, Result};
use crate::nn::{Ctx, Hooks, ParamBuilder, ParamStore};
use crate::pyramid::{self, PyramidOptions, MAIN_SCALE};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Side length images are resized to before entering the network.
    pub input_size: usize,
    pub scales: Vec<f64>,
    pub c_common: usize,
    pub allow_downscale: bool,
    /// Smallest accepted main-scale side.
    pub min_input_side: usize,
    pub backbone: BackboneSpec,
    pub strategy: DecodingStrategy,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 384,
            scales: vec![1.0, 1.5, 2.0],
            c_common: 64,
            allow_downscale: false,
            min_input_side: 32,
            backbone: BackboneSpec::pvt_v2("b4").expect("known variant"),
            strategy: DecodingStrategy::RecursiveFeedback,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by tests and desk-scale experiments.
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            scales: vec![1.0, 1.5, 2.0],
            c_common: 8,
            allow_downscale: false,
            min_input_side: 32,
            backbone: BackboneSpec::toy([8, 16, 16, 16]),
            strategy: DecodingStrategy::RecursiveFeedback,
        }
    }

    pub fn validate(&self) -> Result<()> {
        pyramid::validate_scales(&self.scales, self.allow_downscale)?;
        self.backbone.validate()?;
        if self.input_size < self.min_input_side {
            return Err(CodError::InvalidInput(format!(
                "input size {} below the minimum side {}",
                self.input_size, self.min_input_side
            )));
        }
        Ok(())
    }

    /// Scales in processing order: the main scale, then the others as given.
    pub fn scale_order(&self) -> Vec<f64> {
        std::iter::once(MAIN_SCALE)
            .chain(self.scales.iter().copied().filter(|&k| k != MAIN_SCALE))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct CodNet {
    cfg: ModelConfig,
    encoder: Encoder,
    absius: Vec<Absiu>,
    decoder: Decoder,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub prob: Var,
    pub logits: Var,
    /// Fused map per stage, stage 1 first.
    pub fused: Vec<Var>,
    /// `attention[stage - 1][g]`.
    pub attention: Vec<Vec<Var>>,
    pub decode: DecodeVars,
}

impl CodNet {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let n_scales = cfg.scales.len();
        let min_scale = cfg.scales.iter().copied().fold(f64::INFINITY, f64::min);
        let encoder = Encoder::new(&mut pb.sub("encoder"), &cfg.backbone, cfg.c_common)?
            .with_min_side(pyramid::scaled_len(cfg.min_input_side, min_scale.min(1.0)));
        let absius = (1..=NUM_STAGES)
            .map(|s| Absiu::new(&mut pb.sub(format!("absiu{s}")), cfg.c_common, n_scales))
            .collect::<Result<_>>()?;
        let decoder = Decoder::new(&mut pb.sub("decoder"), cfg.c_common, cfg.strategy)?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            absius,
            decoder,
        })
    }

    /// Fresh parameters from `seed`; loads backbone weights when the spec
    /// asks for pretrained ones.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Self::new(&mut ParamBuilder::new(&mut store, &mut rng), cfg)?;
        if cfg.backbone.pretrained {
            let path = cfg.backbone.weights.as_ref().ok_or_else(|| {
                CodError::config("backbone.weights", "pretrained backbone requires a weight archive")
            })?;
            load_backbone_weights(&mut store, path)?;
        }
        Ok((net, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn absiu(&self, stage: usize) -> &Absiu {
        &self.absius[stage - 1]
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// Record a forward pass of a `(B, 3, H, W)` batch; the prediction has
    /// the input's spatial size.
    pub fn forward(&self, ctx: &Ctx, image: &Tensor) -> Result<ModelVars> {
        let t = ctx.tape;
        let opts = PyramidOptions {
            allow_downscale: self.cfg.allow_downscale,
            min_side: self.cfg.min_input_side,
        };
        let pyr = pyramid::build_pyramid_with(image, &self.cfg.scales, opts)?;
        let mut per_scale = Vec::with_capacity(self.cfg.scales.len());
        for k in self.cfg.scale_order() {
            let img = pyr.get(k).expect("pyramid holds every configured scale");
            let x = t.leaf(img.clone());
            per_scale.push(self.encoder.forward(ctx, x)?);
        }
        let mut fused = Vec::with_capacity(NUM_STAGES);
        let mut attention = Vec::with_capacity(NUM_STAGES);
        for (i, absiu) in self.absius.iter().enumerate() {
            let main = per_scale[0][i];
            let target = t.hw(main);
            let mut inputs = vec![main];
            for feats in &per_scale[1..] {
                let f = feats[i];
                let (h, w) = t.hw(f);
                let aligned = if h >= target.0 && w >= target.1 {
                    pyramid::align_scale_var(t, f, target)?
                } else {
                    t.resize_bilinear(f, target)?
                };
                inputs.push(aligned);
            }
            let out = absiu.forward(ctx, &inputs)?;
            fused.push(out.output);
            attention.push(out.attention);
        }
        let decode = self.decoder.forward(ctx, &fused, image.hw())?;
        Ok(ModelVars {
            prob: decode.head.prob,
            logits: decode.head.logits,
            fused,
            attention,
            decode,
        })
    }

    pub fn predict(&self, store: &ParamStore, image: &Tensor) -> Result<Tensor> {
        self.predict_with(store, image, Hooks::default())
    }

    pub fn predict_with(&self, store: &ParamStore, image: &Tensor, hooks: Hooks) -> Result<Tensor> {
        let tape = Tape::new();
        let ctx = Ctx::with_hooks(&tape, store, hooks);
        let out = self.forward(&ctx, image)?;
        Ok(tape.value(out.prob).as_ref().clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_model_predicts_full_resolution() {
        let cfg = ModelConfig {
            input_size: 32,
            ..ModelConfig::desk()
        };
        let (net, store) = CodNet::build(&cfg, 0).unwrap();
        let img = Tensor::from_fn([2, 3, 32, 40], |b, c, y, x| ((b + c * 3 + y + x * 2) % 9) as f64 / 8.0);
        let p = net.predict(&store, &img).unwrap();
        assert_eq!(p.shape(), [2, 1, 32, 40]);
        assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn downscaled_auxiliary_is_upsampled() {
        let cfg = ModelConfig {
            input_size: 64,
            scales: vec![0.5, 1.0, 1.5],
            allow_downscale: true,
            ..ModelConfig::desk()
        };
        let (net, store) = CodNet::build(&cfg, 1).unwrap();
        let img = Tensor::full([1, 3, 64, 64], 0.3);
        assert_eq!(net.predict(&store, &img).unwrap().shape(), [1, 1, 64, 64]);
        assert_eq!(cfg.scale_order(), vec![1.0, 0.5, 1.5]);
    }
}
