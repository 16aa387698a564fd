//! Sequential sweep over detach probabilities and seeds.

use serde::Serialize;

use crate::config::RunConfig;
use crate::train::{train, TrainError};

pub const DEFAULT_DETACH_PROBS: [f64; 4] = [0.1, 0.25, 0.4, 0.5];

/// Outcome of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub detach_prob: f64,
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
    /// First epoch at which the metric reached `stop_at`, if configured.
    pub epoch_reaching_target: Option<usize>,
    /// Set when the run stopped on a non-finite value.
    pub diverged: bool,
}

/// Trains every `(p, seed)` pair with `base` otherwise unchanged. Each run
/// writes into `<out_dir>/detach-<p>/seed-<seed>` when `base.out_dir` is set.
pub fn run_grid(base: &RunConfig, probs: &[f64], seeds: &[u64]) -> Result<Vec<GridRow>, TrainError> {
    let mut rows = Vec::new();
    for &p in probs {
        for &seed in seeds {
            let cfg = RunConfig {
                detach_prob: p,
                seed,
                out_dir: base
                    .out_dir
                    .as_ref()
                    .map(|d| d.join(format!("detach-{p}")).join(format!("seed-{seed}"))),
                ..base.clone()
            };
            let row = match train(&cfg) {
                Ok(out) => GridRow {
                    detach_prob: p,
                    seed,
                    epochs_run: out.log.rows().len(),
                    best_epoch: out.best_epoch,
                    best_metric: out.log.best_metric(),
                    epoch_reaching_target: cfg.stop_at.and_then(|s| out.log.first_epoch_reaching(s)),
                    diverged: false,
                },
                Err(TrainError::Diverged { log, .. }) => GridRow {
                    detach_prob: p,
                    seed,
                    epochs_run: log.rows().len(),
                    best_epoch: None,
                    best_metric: log.best_metric(),
                    epoch_reaching_target: None,
                    diverged: true,
                },
                Err(e) => return Err(e),
            };
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("csv is utf-8")
}
