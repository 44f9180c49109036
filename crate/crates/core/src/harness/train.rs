//! Adam training, evaluation, prediction output and checkpoints.
//!
//! Training runs on the calling thread in a fixed order, so a seed fixes the
//! final weights. Evaluation scores images on a rayon pool of
//! `TrainConfig::threads` workers; every image is predicted on its own and
//! reductions run in dataset order, so results do not depend on the pool
//! size. Augmentation happens only inside [`train`].

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::archive::Archive;
use crate::autograd::Tape;
use crate::error::{CodError, Result};
use crate::harness::augment::Augmenter;
use crate::harness::config::TrainConfig;
use crate::harness::dataset::Dataset;
use crate::imageio;
use crate::losses::{bce_loss, lambda_schedule, LossConfig, DEFAULT_EPSILON};
use crate::metrics::{score_pair, MetricReport};
use crate::model::CodNet;
use crate::nn::{Ctx, ParamStore};
use crate::tensor::Tensor;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const ADAM_EPS: f64 = 1e-8;

pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, (beta1, beta2): (f64, f64)) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            beta1,
            beta2,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One bias-corrected update; `grads[i]` belongs to the `i`-th parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], grads[i].data());
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                let mk = &mut m.data_mut()[k];
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * g[k];
                let vk = &mut v.data_mut()[k];
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * g[k] * g[k];
                p[k] -= lr * (m.data()[k] / c1) / ((v.data()[k] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: usize,
        lr: f64,
        bce: f64,
        ual: f64,
        lambda: f64,
        total: f64,
    },
    Epoch {
        epoch: usize,
        mean_total: f64,
        val_mae: Option<f64>,
    },
}

pub struct TrainOutcome {
    pub net: CodNet,
    /// Weights after the last step.
    pub store: ParamStore,
    /// Weights with the lowest validation MAE (the last ones when there is
    /// no validation split).
    pub best: ParamStore,
    pub best_val_mae: Option<f64>,
    pub log: Vec<LogRecord>,
    pub steps: usize,
    pub augment_calls: usize,
}

/// Samples from `cfg.data`: the folder when given, otherwise the synthetic
/// set; images are brought to `model.input_size`.
pub fn prepare_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    let size = cfg.model.input_size;
    match &cfg.data.root {
        Some(root) => crate::harness::dataset::load_dataset(root, Some(size)),
        None => cfg.data.synthetic.generate(cfg.seed)?.resized(size),
    }
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| CodError::InvalidInput(format!("thread pool: {e}")))
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, cfg: &TrainConfig) -> Result<()> {
    Archive::from_params(store, cfg.to_text()).save(path)
}

pub struct Checkpoint {
    pub config: TrainConfig,
    pub net: CodNet,
    pub store: ParamStore,
}

/// Rebuild the network described by a checkpoint's config snapshot and load
/// its weights. Backbone weight files are not consulted.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let archive = Archive::load(path)?;
    let mut config = TrainConfig::parse_text(&archive.config)?;
    config.model.backbone.pretrained = false;
    let (net, mut store) = CodNet::build(&config.model, config.seed)?;
    let extra = archive.load_into(&mut store, "")?;
    if !extra.is_empty() {
        return Err(CodError::Archive {
            key: extra[0].clone(),
            msg: format!("{} entries do not belong to the configured model", extra.len()),
        });
    }
    Ok(Checkpoint { config, net, store })
}

fn write_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| CodError::io(path, e))?;
    for r in log {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| CodError::io(path, e))?;
    }
    Ok(())
}

fn dump_batch(out: &Path, epoch: usize, batch: usize, image: &Tensor, mask: &Tensor, prob: &Tensor) -> Result<PathBuf> {
    let mut a = Archive::new(String::new());
    a.tensors.insert("image".into(), image.clone());
    a.tensors.insert("mask".into(), mask.clone());
    a.tensors.insert("prob".into(), prob.clone());
    let path = out.join(format!("nonfinite_e{epoch}_b{batch}.ckpt"));
    a.save(&path)?;
    Ok(path)
}

/// Train from scratch on `data`. With `out`, writes `best.ckpt`,
/// `last.ckpt`, `config.txt` and a JSON-lines log there.
pub fn train(cfg: &TrainConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (net, mut store) = CodNet::build(&cfg.model, cfg.seed)?;
    let (train_set, val_set) = data.split(cfg.val_fraction, cfg.seed ^ 0x5EED)?;
    let loss_cfg = LossConfig::new(cfg.lambda_max, cfg.epochs.max(1))?;
    let mut adam = Adam::new(&store, cfg.betas);
    let mut aug = Augmenter::new(cfg.augment, cfg.seed.wrapping_add(1));
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| CodError::io(dir, e))?;
        fs::write(dir.join("config.txt"), cfg.to_text()).map_err(|e| CodError::io(dir, e))?;
    }

    let mut log = Vec::new();
    let mut best = store.clone();
    let mut best_val_mae: Option<f64> = None;
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        let lambda = lambda_schedule(epoch, &loss_cfg)?;
        let lr = cfg.lr * cfg.lr_decay.multiplier(epoch, cfg.epochs);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut order_rng);
        let mut epoch_total = 0.0;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (bi, batch) in batches.iter().enumerate() {
            let mut images = Vec::with_capacity(batch.len());
            let mut masks = Vec::with_capacity(batch.len());
            for &i in batch.iter() {
                let s = train_set.get(i);
                let (img, m) = if cfg.augment.any() {
                    aug.apply(&s.image, &s.mask)?
                } else {
                    (s.image.clone(), s.mask.clone())
                };
                images.push(img);
                masks.push(m);
            }
            let image = Tensor::stack_batch(&images)?;
            let mask = Rc::new(Tensor::stack_batch(&masks)?);

            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store);
            let vars = net.forward(&ctx, &image)?;
            let (total, bce, ual) =
                crate::losses::total_loss_var(&tape, vars.prob, mask.clone(), lambda, DEFAULT_EPSILON)?;
            let total_v = tape.scalar(total);
            if !total_v.is_finite() {
                let names: Vec<&str> = batch.iter().map(|&i| train_set.get(i).name.as_str()).collect();
                if let Some(dir) = out {
                    let path = dump_batch(dir, epoch, bi, &image, &mask, &tape.value(vars.prob))?;
                    log::error!("non-finite loss; batch dumped to {}", path.display());
                }
                return Err(CodError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    samples: names.join(", "),
                });
            }
            let grads = tape.backward(total)?;
            let g: Vec<Tensor> = store
                .ids()
                .zip(ctx.param_vars())
                .map(|(id, &v)| grads.get_or_zeros(v, store.get(id).shape()))
                .collect();
            drop(ctx);
            adam.step(&mut store, &g, lr);
            steps += 1;
            epoch_total += total_v;
            log.push(LogRecord::Step {
                epoch,
                step: steps,
                lr,
                bce: tape.scalar(bce),
                ual: tape.scalar(ual),
                lambda,
                total: total_v,
            });
        }
        let val_mae = match &val_set {
            Some(v) => Some(evaluate(&net, &store, v, cfg.threads)?.report.mae),
            None => None,
        };
        match val_mae {
            Some(m) if best_val_mae.is_none_or(|b| m < b) => {
                best_val_mae = Some(m);
                best = store.clone();
            }
            Some(_) => {}
            None => best = store.clone(),
        }
        log::info!(
            "epoch {}/{}: mean loss {:.5}{}",
            epoch + 1,
            cfg.epochs,
            epoch_total / batches.len() as f64,
            val_mae.map(|m| format!(", val MAE {m:.5}")).unwrap_or_default()
        );
        log.push(LogRecord::Epoch {
            epoch,
            mean_total: epoch_total / batches.len() as f64,
            val_mae,
        });
    }

    if let Some(dir) = out {
        save_checkpoint(&dir.join(LAST_CHECKPOINT), &store, cfg)?;
        save_checkpoint(&dir.join(BEST_CHECKPOINT), &best, cfg)?;
        write_log(&dir.join(LOG_FILE), &log)?;
    }
    Ok(TrainOutcome {
        net,
        store,
        best,
        best_val_mae,
        log,
        steps,
        augment_calls: aug.calls(),
    })
}

pub struct Evaluation {
    pub report: MetricReport,
    /// Mean per-image BCE.
    pub bce: f64,
    /// One `(1, 1, H, W)` map per sample, in dataset order.
    pub predictions: Vec<Tensor>,
}

/// Predict every sample (no augmentation) and score it.
pub fn evaluate(net: &CodNet, store: &ParamStore, data: &Dataset, threads: usize) -> Result<Evaluation> {
    let results = thread_pool(threads)?.install(|| {
        data.samples()
            .par_iter()
            .map(|s| {
                let p = net.predict(store, &s.image)?;
                let m = score_pair(&p, &s.mask)?;
                let b = bce_loss(&p, &s.mask)?;
                Ok((p, m, b))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let scores: Vec<_> = results.iter().map(|r| r.1).collect();
    let bce = results.iter().map(|r| r.2).sum::<f64>() / results.len() as f64;
    Ok(Evaluation {
        report: MetricReport::from_images(&scores)?,
        bce,
        predictions: results.into_iter().map(|r| r.0).collect(),
    })
}

/// Write each map as `<dir>/<name>.png`.
pub fn save_predictions(dir: &Path, data: &Dataset, predictions: &[Tensor]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CodError::io(dir, e))?;
    for (s, p) in data.samples().iter().zip(predictions) {
        imageio::save_gray(&dir.join(format!("{}.png", s.name)), p)?;
    }
    Ok(())
}
