//! Transfer copying: a model trained at one delay evaluated at others.

use serde::Serialize;

use hdetach_core::numerics::Rng;
use hdetach_core::tasks::gen_copying;

use crate::model::Model;
use crate::train::evaluate_copying;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransferRow {
    pub delay: usize,
    pub recall_acc: f64,
    pub full_acc: f64,
}

/// Recall and full accuracy on `count` fresh sequences per delay. Each delay
/// gets its own stream derived from `seed`.
pub fn evaluate_transfer(model: &Model, delays: &[usize], count: usize, seed: u64) -> Vec<TransferRow> {
    let root = Rng::new(seed);
    delays
        .iter()
        .map(|&delay| {
            let data = gen_copying(delay, count, &mut root.derive(delay as u64)).expect("delay and count are positive");
            let (recall_acc, full_acc) = evaluate_copying(model, &data);
            TransferRow {
                delay,
                recall_acc,
                full_acc,
            }
        })
        .collect()
}

pub fn transfer_csv(rows: &[TransferRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("csv is utf-8")
}
