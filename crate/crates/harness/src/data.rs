//! Building the training and validation sets of a run.

use std::path::{Path, PathBuf};

use hdetach_core::numerics::Rng;
use hdetach_core::tasks::{self, apply_permutation, Permutation, PixelSequence, TaskError, TokenSequence};

use crate::config::{RunConfig, Task};

/// Independent random streams derived from the run seed.
pub mod streams {
    pub const TRAIN_DATA: u64 = 1;
    pub const VAL_DATA: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const MASKS: u64 = 5;
    pub const TRANSFER: u64 = 6;
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Copying {
        train: Vec<TokenSequence>,
        val: Vec<TokenSequence>,
    },
    Pixels {
        train: Vec<PixelSequence>,
        val: Vec<PixelSequence>,
    },
}

impl Dataset {
    pub fn train_len(&self) -> usize {
        match self {
            Dataset::Copying { train, .. } => train.len(),
            Dataset::Pixels { train, .. } => train.len(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Dataset::Copying { .. } => tasks::COPY_VOCAB,
            Dataset::Pixels { .. } => 1,
        }
    }

    pub fn classes(&self) -> usize {
        10
    }
}

/// Locates `stem` or `stem.gz` inside `dir`.
fn find(dir: &Path, stem: &str) -> Option<PathBuf> {
    [stem.to_string(), format!("{stem}.gz")]
        .into_iter()
        .map(|name| dir.join(name))
        .find(|p| p.exists())
}

fn missing(dir: &Path, stem: &str) -> TaskError {
    TaskError::Io {
        path: dir.join(stem),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "neither the raw nor the .gz file exists"),
    }
}

/// Training and validation images from `dir`.
///
/// If the directory holds `val-images-idx3-ubyte` / `val-labels-idx1-ubyte`
/// those are the validation set and `train-*` the training set. Otherwise
/// the official 60k `train-*` files are split into the first 50k for
/// training and the last 10k for validation.
pub fn load_mnist_dir(dir: &Path) -> Result<(Vec<PixelSequence>, Vec<PixelSequence>), TaskError> {
    let pair = |prefix: &str| -> Result<Option<Vec<PixelSequence>>, TaskError> {
        let images = find(dir, &format!("{prefix}-images-idx3-ubyte"));
        let labels = find(dir, &format!("{prefix}-labels-idx1-ubyte"));
        match (images, labels) {
            (Some(i), Some(l)) => Ok(Some(tasks::load_mnist_idx(&i, &l)?)),
            (None, None) => Ok(None),
            (None, _) => Err(missing(dir, &format!("{prefix}-images-idx3-ubyte"))),
            (_, None) => Err(missing(dir, &format!("{prefix}-labels-idx1-ubyte"))),
        }
    };
    let train = pair("train")?.ok_or_else(|| missing(dir, "train-images-idx3-ubyte"))?;
    match pair("val")? {
        Some(val) => Ok((train, val)),
        None => Ok(tasks::split_train_val(train)),
    }
}

pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset, TaskError> {
    let root = Rng::new(cfg.seed);
    match cfg.task {
        Task::Mnist | Task::Pmnist => {
            let dir = cfg.mnist_dir.as_deref().ok_or_else(|| TaskError::Io {
                path: PathBuf::from("<mnist_dir>"),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "mnist_dir is not configured"),
            })?;
            let (mut train, mut val) = load_mnist_dir(dir)?;
            train.truncate(cfg.train_size);
            val.truncate(cfg.val_size);
            let prepare = |s: PixelSequence| if cfg.downsample { s.downsample_2x() } else { s };
            let mut train: Vec<PixelSequence> = train.into_iter().map(prepare).collect();
            let mut val: Vec<PixelSequence> = val.into_iter().map(prepare).collect();
            if cfg.task == Task::Pmnist {
                let perm = Permutation::from_seed(train[0].pixels.len(), cfg.permutation_seed);
                for s in train.iter_mut().chain(val.iter_mut()) {
                    *s = apply_permutation(s, &perm);
                }
            }
            Ok(Dataset::Pixels { train, val })
        }
        _ => {
            let train = tasks::gen_copying(cfg.delay, cfg.train_size, &mut root.derive(streams::TRAIN_DATA))?;
            let val = tasks::gen_copying(cfg.delay, cfg.val_size, &mut root.derive(streams::VAL_DATA))?;
            Ok(Dataset::Copying { train, val })
        }
    }
}
