//! Fixtures shared by the integration tests.

#![allow(dead_code)]

use std::path::PathBuf;

use cod_core::decoder::DecodingStrategy;
use cod_core::encoder::{BackboneSpec, FeatureMap};
use cod_core::harness::augment::AugmentFlags;
use cod_core::harness::config::TrainConfig;
use cod_core::harness::synthetic::SyntheticSpec;
use cod_core::model::ModelConfig;
use cod_core::nn::{ParamBuilder, ParamStore};
use cod_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(shape: [usize; 4], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

pub fn fmap(data: Tensor) -> FeatureMap {
    FeatureMap {
        data,
        stage: 1,
        scale: 1.0,
    }
}

/// Build a module with its own parameter store.
pub fn build<T>(seed: u64, f: impl FnOnce(&mut ParamBuilder) -> cod_core::Result<T>) -> (T, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = f(&mut ParamBuilder::new(&mut store, &mut rng)).unwrap();
    (m, store)
}

/// Toy model on 16x16 inputs.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_size: 16,
        min_input_side: 16,
        ..ModelConfig::desk()
    }
}

/// Ten synthetic scenes, full-batch training for 200 steps.
pub fn overfit_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig::desk(),
        lr: 2e-2,
        batch_size: 10,
        epochs: 200,
        lr_decay: cod_core::harness::config::LrDecay {
            milestones: vec![0.75],
            factor: 0.1,
        },
        lambda_max: 1.0,
        val_fraction: 0.0,
        seed: 0,
        threads: 1,
        augment: AugmentFlags::none(),
        data: cod_core::harness::config::DataConfig {
            root: None,
            synthetic: SyntheticSpec::default(),
        },
        output_dir: PathBuf::from("unused"),
        ..TrainConfig::default()
    }
}

/// A few quick epochs on small scenes with every augmentation on.
pub fn quick_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            input_size: 32,
            c_common: 8,
            scales: vec![1.0, 1.5],
            backbone: BackboneSpec::toy([8, 8, 8, 8]),
            strategy: DecodingStrategy::RecursiveFeedback,
            ..ModelConfig::desk()
        },
        lr: 5e-3,
        batch_size: 2,
        epochs: 2,
        val_fraction: 0.25,
        threads: 1,
        augment: AugmentFlags {
            flip: true,
            rotate: true,
            color_jitter: true,
        },
        data: cod_core::harness::config::DataConfig {
            root: None,
            synthetic: SyntheticSpec {
                count: 4,
                size: 32,
                ..SyntheticSpec::default()
            },
        },
        ..overfit_config()
    }
}
