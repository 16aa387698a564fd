//! Per-epoch metrics, written as CSV.

use std::path::Path;

use serde::{Deserialize, Serialize};

/// One epoch of training. Copying runs fill the recall/full columns, MNIST
/// runs fill `val_acc`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_recall_acc: Option<f64>,
    pub val_full_acc: Option<f64>,
    pub val_acc: Option<f64>,
    /// Mean over the epoch's batches of the gradient norm before clipping.
    pub grad_norm_pre_clip: f64,
    /// Backward multiply-accumulates summed over the epoch.
    pub backward_flops: u64,
}

impl EpochRow {
    /// The model-selection metric: recall accuracy for copying, accuracy
    /// for classification.
    pub fn metric(&self) -> f64 {
        self.val_recall_acc.or(self.val_acc).unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TimingRow {
    epoch: usize,
    wallclock_secs: f64,
}

/// Append-only epoch log. Wall-clock times are kept apart from the metrics
/// so that the metric CSV is reproducible byte for byte.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    rows: Vec<EpochRow>,
    wallclock: Vec<f64>,
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a row. Panics if epochs do not increase.
    pub fn push(&mut self, row: EpochRow, wallclock_secs: f64) {
        if let Some(last) = self.rows.last() {
            assert!(row.epoch > last.epoch, "epoch {} logged after {}", row.epoch, last.epoch);
        }
        self.rows.push(row);
        self.wallclock.push(wallclock_secs);
    }

    pub fn rows(&self) -> &[EpochRow] {
        &self.rows
    }

    pub fn wallclock(&self) -> &[f64] {
        &self.wallclock
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRow> {
        self.rows.last()
    }

    /// First epoch whose selection metric is at least `threshold`.
    pub fn first_epoch_reaching(&self, threshold: f64) -> Option<usize> {
        self.rows.iter().find(|r| r.metric() >= threshold).map(|r| r.epoch)
    }

    pub fn row_at(&self, epoch: usize) -> Option<&EpochRow> {
        self.rows.iter().find(|r| r.epoch == epoch)
    }

    pub fn best_metric(&self) -> Option<f64> {
        self.rows.iter().map(EpochRow::metric).filter(|m| !m.is_nan()).reduce(f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record([
                "epoch",
                "train_loss",
                "val_recall_acc",
                "val_full_acc",
                "val_acc",
                "grad_norm_pre_clip",
                "backward_flops",
            ])
            .expect("in-memory write");
        }
        for r in &self.rows {
            w.serialize(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory write")).expect("csv is utf-8")
    }

    pub fn timing_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record(["epoch", "wallclock_secs"]).expect("in-memory write");
        }
        for (r, &s) in self.rows.iter().zip(&self.wallclock) {
            w.serialize(TimingRow {
                epoch: r.epoch,
                wallclock_secs: s,
            })
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory write")).expect("csv is utf-8")
    }

    /// Reads a metrics CSV produced by [`RunLog::to_csv`]; wall-clock
    /// times are not restored.
    pub fn read_csv(path: &Path) -> Result<Self, csv::Error> {
        let mut r = csv::Reader::from_path(path)?;
        let mut log = RunLog::new();
        for row in r.deserialize() {
            log.push(row?, 0.0);
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, recall: f64) -> EpochRow {
        EpochRow {
            epoch,
            train_loss: 1.5,
            val_recall_acc: Some(recall),
            val_full_acc: Some(0.9),
            val_acc: None,
            grad_norm_pre_clip: 0.25,
            backward_flops: 1234,
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut log = RunLog::new();
        log.push(row(1, 0.5), 1.0);
        log.push(row(2, 0.995), 2.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        std::fs::write(&path, log.to_csv()).unwrap();
        let back = RunLog::read_csv(&path).unwrap();
        assert_eq!(back.rows(), log.rows());
        assert!(log.to_csv().starts_with("epoch,train_loss,val_recall_acc,val_full_acc,val_acc,"));
        assert!(log.timing_csv().contains("2,2.0"));
        assert_eq!(log.first_epoch_reaching(0.99), Some(2));
        assert_eq!(log.best_metric(), Some(0.995));
    }

    #[test]
    fn empty_log_has_header() {
        assert_eq!(RunLog::new().to_csv().lines().count(), 1);
    }

    #[test]
    #[should_panic]
    fn epochs_must_increase() {
        let mut log = RunLog::new();
        log.push(row(2, 0.1), 0.0);
        log.push(row(2, 0.1), 0.0);
    }
}
