//! The training loop: ADAM on mini-batches with h-detach / c-detach masks,
//! per-epoch validation and best-model selection.

use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use hdetach_core::checkpoint::CheckpointError;
use hdetach_core::lstm::forward_sequence_masked;
use hdetach_core::lstm::LstmState;
use hdetach_core::numerics::Rng;
use hdetach_core::optim::{clip_global_norm, AdamState};
use hdetach_core::tasks::{copying_metrics, PixelSequence, TaskError, TokenSequence};

use crate::config::{ConfigError, RunConfig};
use crate::data::{build_dataset, streams, Dataset};
use crate::engine::{backward, forward, Batch, BatchMasks, Tape};
use crate::model::Model;
use crate::runlog::{EpochRow, RunLog};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] TaskError),
    #[error("non-finite {what} at epoch {epoch}, batch {batch}")]
    Diverged {
        what: &'static str,
        epoch: usize,
        batch: usize,
        /// Epochs completed before the divergence.
        log: RunLog,
    },
    #[error("forward-equivalence audit failed at epoch {epoch}, batch {batch}: {detail}")]
    Audit { epoch: usize, batch: usize, detail: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Validation metrics of a model on a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Validation {
    pub recall_acc: Option<f64>,
    pub full_acc: Option<f64>,
    pub acc: Option<f64>,
}

impl Validation {
    pub fn metric(&self) -> f64 {
        self.recall_acc.or(self.acc).unwrap_or(f64::NAN)
    }
}

/// Forward-equivalence audits performed during a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AuditSummary {
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: RunLog,
    /// Parameters at the epoch with the best validation metric (the initial
    /// parameters when no epoch ran).
    pub best: Model,
    pub best_epoch: Option<usize>,
    pub final_model: Model,
    pub audits: AuditSummary,
    /// Backward multiply-accumulates of every batch, in order.
    pub batch_macs: Vec<u64>,
}

const EVAL_CHUNK: usize = 250;

/// Mean recall and full-sequence accuracy over copying sequences.
pub fn evaluate_copying(model: &Model, data: &[TokenSequence]) -> (f64, f64) {
    let (mut recall, mut full) = (0.0, 0.0);
    for chunk in data.chunks(EVAL_CHUNK) {
        let batch = Batch::copying(&chunk.iter().collect::<Vec<_>>());
        let (stats, _) = forward(model, &batch, false);
        for (r, seq) in chunk.iter().enumerate() {
            let pred: Vec<u8> = stats
                .predictions
                .iter()
                .map(|p| p.as_ref().expect("copying predicts every step")[r])
                .collect();
            let (a, b) = copying_metrics(&pred, seq).expect("prediction length matches");
            recall += a;
            full += b;
        }
    }
    (recall / data.len() as f64, full / data.len() as f64)
}

/// Classification accuracy at the final step.
pub fn evaluate_pixels(model: &Model, data: &[PixelSequence]) -> f64 {
    let mut correct = 0usize;
    for chunk in data.chunks(EVAL_CHUNK) {
        let batch = Batch::pixels(&chunk.iter().collect::<Vec<_>>());
        let (stats, _) = forward(model, &batch, false);
        let preds = stats.predictions.last().and_then(|p| p.as_ref()).expect("final-step prediction");
        correct += preds.iter().zip(chunk).filter(|(p, s)| **p == s.label).count();
    }
    correct as f64 / data.len() as f64
}

pub fn validate_model(model: &Model, data: &Dataset) -> Validation {
    match data {
        Dataset::Copying { val, .. } => {
            let (r, f) = evaluate_copying(model, val);
            Validation {
                recall_acc: Some(r),
                full_acc: Some(f),
                acc: None,
            }
        }
        Dataset::Pixels { val, .. } => Validation {
            recall_acc: None,
            full_acc: None,
            acc: Some(evaluate_pixels(model, val)),
        },
    }
}

fn make_batch(data: &Dataset, idx: &[usize]) -> Batch {
    match data {
        Dataset::Copying { train, .. } => Batch::copying(&idx.iter().map(|&i| &train[i]).collect::<Vec<_>>()),
        Dataset::Pixels { train, .. } => Batch::pixels(&idx.iter().map(|&i| &train[i]).collect::<Vec<_>>()),
    }
}

/// Checks that masks change no forward value: the batched forward without
/// masks reproduces the tape bit for bit, and the single-sequence roll-out
/// with the first sample's masks reproduces its states.
pub fn audit_forward(model: &Model, batch: &Batch, tape: &Tape, masks: &BatchMasks) -> Result<(), String> {
    let (_, plain) = forward(model, batch, true);
    let plain = plain.expect("tape requested");
    if plain.h != tape.h || plain.c != tape.c {
        return Err("batched forward differs without masks".into());
    }
    let n = model.hidden();
    let xs = batch.sample_inputs(0);
    let (caches, _) = forward_sequence_masked(
        &model.lstm,
        &xs,
        &LstmState::zeros(n),
        Some(&masks.sample_h_mask(0)),
        Some(&masks.sample_c_mask(0)),
    )
    .map_err(|e| e.to_string())?;
    for (t, cache) in caches.iter().enumerate() {
        let h = &tape.h_at(t + 1)[..n];
        let c = &tape.c_at(t + 1)[..n];
        for j in 0..n {
            let err = (h[j] - cache.h[j]).abs().max((c[j] - cache.c[j]).abs());
            if err > 1e-9 * (1.0 + cache.c[j].abs()) {
                return Err(format!("sample 0 step {} unit {j}: reference differs by {err:e}", t + 1));
            }
        }
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<(), TrainError> {
    std::fs::write(path, text).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let data = build_dataset(cfg)?;
    train_on(cfg, &data)
}

/// Trains on an already built dataset. Output files, if `cfg.out_dir` is
/// set: `config.toml`, `runlog.csv`, `timing.csv`, `best.json`, `final.json`.
pub fn train_on(cfg: &RunConfig, data: &Dataset) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.clone(),
            source,
        })?;
        write_file(&dir.join("config.toml"), &cfg.to_toml())?;
    }
    let root = Rng::new(cfg.seed);
    let mut model = Model::init(cfg.hidden_size, data.input_dim(), data.classes(), &mut root.derive(streams::INIT))
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let mut shuffle_rng = root.derive(streams::SHUFFLE);
    let mut mask_rng = root.derive(streams::MASKS);
    let mut adam = AdamState::new(&model, cfg.lr);
    let clip = cfg.clip.to_config();
    let p_c = cfg.cell_detach_prob();

    let mut log = RunLog::new();
    let mut best = model.clone();
    let mut best_epoch = None;
    let mut best_metric = f64::NEG_INFINITY;
    let mut audits = AuditSummary::default();
    let mut batch_macs = Vec::new();
    let mut order: Vec<usize> = (0..data.train_len()).collect();
    let mut batch_counter = 0usize;
    let started = Instant::now();

    for epoch in 1..=cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let (mut loss_sum, mut norm_sum, mut flops, mut batches) = (0.0, 0.0, 0u64, 0usize);
        for (bi, idx) in order.chunks(cfg.batch).enumerate() {
            let batch = make_batch(data, idx);
            let masks = BatchMasks::sample(
                &mut mask_rng,
                batch.steps,
                batch.size,
                cfg.detach_prob,
                p_c,
                cfg.mask_granularity,
            );
            let (stats, tape) = forward(&model, &batch, true);
            let tape = tape.expect("tape requested");
            if !stats.loss.is_finite() {
                return Err(TrainError::Diverged {
                    what: "loss",
                    epoch,
                    batch: bi,
                    log,
                });
            }
            batch_counter += 1;
            if cfg.audit_every > 0 && batch_counter.is_multiple_of(cfg.audit_every) {
                audit_forward(&model, &batch, &tape, &masks).map_err(|detail| TrainError::Audit {
                    epoch,
                    batch: bi,
                    detail,
                })?;
                audits.checked += 1;
            }
            let mut out = backward(&model, &batch, &tape, &masks);
            let norm = clip_global_norm(&mut out.grads, clip);
            if !norm.is_finite() {
                return Err(TrainError::Diverged {
                    what: "gradient",
                    epoch,
                    batch: bi,
                    log,
                });
            }
            adam.step(&mut model, &out.grads).expect("gradient layout matches the model");
            if !model.is_finite() {
                return Err(TrainError::Diverged {
                    what: "parameters",
                    epoch,
                    batch: bi,
                    log,
                });
            }
            batch_macs.push(out.macs());
            loss_sum += stats.loss;
            norm_sum += norm;
            flops += out.macs();
            batches += 1;
        }
        let v = validate_model(&model, data);
        let row = EpochRow {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_recall_acc: v.recall_acc,
            val_full_acc: v.full_acc,
            val_acc: v.acc,
            grad_norm_pre_clip: norm_sum / batches as f64,
            backward_flops: flops,
        };
        log.push(row, started.elapsed().as_secs_f64());
        if v.metric() > best_metric {
            best_metric = v.metric();
            best = model.clone();
            best_epoch = Some(epoch);
            if let Some(dir) = &cfg.out_dir {
                best.to_checkpoint().with_meta("epoch", epoch).save(&dir.join("best.json"))?;
            }
        }
        if let Some(dir) = &cfg.out_dir {
            write_file(&dir.join("runlog.csv"), &log.to_csv())?;
            write_file(&dir.join("timing.csv"), &log.timing_csv())?;
        }
        if cfg.stop_at.is_some_and(|s| v.metric() >= s) {
            break;
        }
    }

    if let Some(dir) = &cfg.out_dir {
        write_file(&dir.join("runlog.csv"), &log.to_csv())?;
        write_file(&dir.join("timing.csv"), &log.timing_csv())?;
        if best_epoch.is_none() {
            best.to_checkpoint().save(&dir.join("best.json"))?;
        }
        model.to_checkpoint().save(&dir.join("final.json"))?;
    }
    Ok(TrainOutcome {
        log,
        best,
        best_epoch,
        final_model: model,
        audits,
        batch_macs,
    })
}
