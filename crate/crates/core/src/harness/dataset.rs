//! Image/mask datasets and folder ingestion.
//!
//! A dataset folder holds `Image/` and `GT/`; files pair by stem. Unpaired
//! files are logged and recorded but do not stop loading.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CodError, Result};
use crate::imageio;
use crate::ops;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    /// `(1, 3, H, W)` in `[0, 1]`.
    pub image: Tensor,
    /// `(1, 1, H, W)` binary.
    pub mask: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    /// Stems present in only one of `Image/` and `GT/`.
    pub unpaired: Vec<String>,
}

/// Published split sizes of the benchmark datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub name: &'static str,
    pub train: usize,
    pub test: usize,
}

pub const MANIFESTS: [Manifest; 4] = [
    Manifest {
        name: "CAMO",
        train: 1000,
        test: 250,
    },
    Manifest {
        name: "COD10K",
        train: 3040,
        test: 2026,
    },
    Manifest {
        name: "CHAMELEON",
        train: 0,
        test: 76,
    },
    Manifest {
        name: "NC4K",
        train: 0,
        test: 4121,
    },
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Manifest {
    pub fn by_name(name: &str) -> Option<Manifest> {
        MANIFESTS.iter().copied().find(|m| m.name.eq_ignore_ascii_case(name))
    }

    pub fn expected(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Test => self.test,
        }
    }

    /// Compare a loaded count with the published one.
    pub fn check(&self, split: Split, count: usize) -> Result<()> {
        let want = self.expected(split);
        if count == want {
            log::info!("{} {split:?}: {count} pairs, as published", self.name);
            Ok(())
        } else {
            Err(CodError::Dataset(format!(
                "{} {split:?} split has {count} pairs, expected {want}",
                self.name
            )))
        }
    }
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(CodError::Dataset("dataset is empty".into()));
        }
        for s in &samples {
            if s.image.hw() != s.mask.hw() || s.image.channels() != 3 || s.mask.channels() != 1 {
                return Err(CodError::Dataset(format!(
                    "sample `{}` has image {:?} and mask {:?}",
                    s.name,
                    s.image.shape(),
                    s.mask.shape()
                )));
            }
        }
        Ok(Self {
            samples,
            unpaired: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn get(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    /// Every sample resized to `size x size`; masks are re-binarised at 0.5.
    pub fn resized(&self, size: usize) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                if s.image.hw() == (size, size) {
                    return Ok(s.clone());
                }
                Ok(Sample {
                    name: s.name.clone(),
                    image: ops::resize_bilinear(&s.image, (size, size))?.map(|v| v.clamp(0.0, 1.0)),
                    mask: ops::resize_bilinear(&s.mask, (size, size))?.map(|v| (v >= 0.5) as u8 as f64),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut ds = Dataset::new(samples)?;
        ds.unpaired = self.unpaired.clone();
        Ok(ds)
    }

    /// Seeded split into `(train, validation)`; the validation part holds
    /// `round(fraction * len)` samples but never every sample.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(CodError::InvalidInput(format!("validation fraction {fraction} outside [0, 1)")));
        }
        let n_val = ((fraction * self.len() as f64).round() as usize).min(self.len() - 1);
        if n_val == 0 {
            return Ok((self.clone(), None));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (val, train) = idx.split_at(n_val);
        let pick = |ix: &[usize]| {
            let mut ix = ix.to_vec();
            ix.sort_unstable();
            Dataset::new(ix.iter().map(|&i| self.samples[i].clone()).collect())
        };
        Ok((pick(train)?, Some(pick(val)?)))
    }
}

/// Load `root/Image` and `root/GT`. Images and masks are resized to
/// `resize x resize` when given (masks re-binarised at 0.5).
pub fn load_dataset(root: &Path, resize: Option<usize>) -> Result<Dataset> {
    let images = imageio::image_stems(&root.join("Image"))?;
    let masks = imageio::image_stems(&root.join("GT"))?;
    let mut unpaired: Vec<String> = images.keys().filter(|k| !masks.contains_key(*k)).cloned().collect();
    unpaired.extend(masks.keys().filter(|k| !images.contains_key(*k)).cloned());
    unpaired.sort();
    for name in &unpaired {
        log::warn!("{}: `{name}` has no partner and is skipped", root.display());
    }
    let mut samples = Vec::new();
    for (name, img_path) in &images {
        let Some(gt_path) = masks.get(name) else { continue };
        let image = imageio::load_rgb(img_path)?;
        let mask = imageio::load_mask(gt_path)?;
        if mask.hw() != image.hw() {
            return Err(CodError::Dataset(format!(
                "`{name}`: image is {:?} but mask is {:?}",
                image.hw(),
                mask.hw()
            )));
        }
        samples.push(Sample {
            name: name.clone(),
            image,
            mask,
        });
    }
    if samples.is_empty() {
        return Err(CodError::Dataset(format!("{}: no image/mask pairs", root.display())));
    }
    log::info!("{}: {} pairs, {} unpaired", root.display(), samples.len(), unpaired.len());
    let mut ds = Dataset::new(samples)?;
    ds.unpaired = unpaired;
    match resize {
        Some(s) => ds.resized(s),
        None => Ok(ds),
    }
}
