//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! `HDETACH_ACCEPTANCE=1,2,5` restricts the run to the listed criteria.
//! Copying runs are shared between criteria 6 and 7.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use hdetach_core::lstm::MatrixId;
use hdetach_core::numerics::Rng;
use hdetach_core::paths::WeightIndex;
use hdetach_core::tasks::COPY_VOCAB;
use hdetach_harness::config::{ClipSettings, RunConfig, Task};
use hdetach_harness::data::{build_dataset, streams};
use hdetach_harness::model::Model;
use hdetach_harness::path_report::{path_report, probe_inputs, summarize};
use hdetach_harness::runlog::RunLog;
use hdetach_harness::train::{train_on, TrainError, TrainOutcome};
use hdetach_harness::transfer::evaluate_transfer;
use hdetach_harness::verify::{compare_flops, flops_report, verify_corollary, verify_fd, verify_thm1, verify_thm2, Report};

const SEEDS: [u64; 3] = [1, 2, 3];
const TARGET: f64 = 0.99;
const COPY_BATCH: usize = 100;
const NOCLIP_EPOCHS: usize = 30;
const TRANSFER_COUNT: usize = 2_000;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn suite(report: Report, budget_secs: Option<f64>) -> Outcome {
    let in_time = budget_secs.is_none_or(|b| report.elapsed_secs < b);
    let failures: Vec<String> = report.failures().map(|c| format!("{} ({:.3e})", c.name, c.error)).collect();
    let mut detail = format!(
        "{} checks, max error {:.3e}, {:.1}s",
        report.checks.len(),
        report.max_error(),
        report.elapsed_secs
    );
    if !failures.is_empty() {
        detail += &format!("; failed: {}", failures.join("; "));
    }
    if !in_time {
        detail += "; over the time budget";
    }
    outcome(report.passed() && in_time, detail)
}

fn copying(seed: u64) -> RunConfig {
    RunConfig {
        task: Task::Copying,
        delay: 50,
        hidden_size: 64,
        lr: 1e-3,
        batch: COPY_BATCH,
        epochs: 150,
        clip: ClipSettings {
            enabled: true,
            max_norm: 1.0,
        },
        train_size: 10_000,
        val_size: 2_000,
        seed,
        audit_every: 100,
        ..RunConfig::default()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

fn epochs_text(log: &RunLog) -> String {
    match log.first_epoch_reaching(TARGET) {
        Some(e) => format!("reached {TARGET} at epoch {e}"),
        None => format!(
            "best {:.4} in {} epochs",
            log.best_metric().unwrap_or(f64::NAN),
            log.rows().len()
        ),
    }
}

/// Vanilla and h-detach 0.25 copying runs of one seed.
struct CopyPair {
    seed: u64,
    vanilla: TrainOutcome,
    hdetach: TrainOutcome,
}

fn run_copy_pairs() -> Result<(Vec<CopyPair>, f64), TrainError> {
    let started = Instant::now();
    let mut pairs = Vec::new();
    for seed in SEEDS {
        let cfg = RunConfig {
            stop_at: Some(TARGET),
            ..copying(seed)
        };
        let data = build_dataset(&cfg)?;
        let vanilla = train_on(&cfg, &data)?;
        println!("  seed {seed} vanilla: {}", epochs_text(&vanilla.log));
        let hdetach = train_on(&RunConfig { detach_prob: 0.25, ..cfg }, &data)?;
        println!("  seed {seed} h-detach 0.25: {}", epochs_text(&hdetach.log));
        pairs.push(CopyPair { seed, vanilla, hdetach });
    }
    Ok((pairs, started.elapsed().as_secs_f64()))
}

fn criterion_6(pairs: &[CopyPair], secs: f64) -> Outcome {
    let reach = |o: &TrainOutcome| o.log.first_epoch_reaching(TARGET);
    let all_reach = pairs.iter().all(|p| reach(&p.vanilla).is_some() && reach(&p.hdetach).is_some());
    let epochs = |f: fn(&CopyPair) -> &TrainOutcome| {
        pairs
            .iter()
            .map(|p| reach(f(p)).map_or(f64::INFINITY, |e| e as f64))
            .collect::<Vec<_>>()
    };
    let (med_v, med_h) = (median(epochs(|p| &p.vanilla)), median(epochs(|p| &p.hdetach)));
    let mut transfer_ok = true;
    let mut transfer = Vec::new();
    for p in pairs {
        let seed = Rng::new(p.seed).derive(streams::TRANSFER).seed();
        let delay = 2 * 50;
        let v = evaluate_transfer(&p.vanilla.best, &[delay], TRANSFER_COUNT, seed)[0].recall_acc;
        let h = evaluate_transfer(&p.hdetach.best, &[delay], TRANSFER_COUNT, seed)[0].recall_acc;
        transfer_ok &= h >= v;
        transfer.push(format!("seed {}: {h:.4} vs {v:.4}", p.seed));
    }
    let in_time = secs <= 2.0 * 3600.0;
    outcome(
        all_reach && med_h <= med_v && transfer_ok && in_time,
        format!(
            "all reach {TARGET}: {all_reach}; median epoch h-detach {med_h} vs vanilla {med_v}; \
             recall at T=100 (h-detach vs vanilla) [{}]; {:.0} min",
            transfer.join(", "),
            secs / 60.0
        ),
    )
}

fn criterion_7(pairs: &[CopyPair]) -> Result<Outcome, TrainError> {
    let mut ok = true;
    let mut parts = Vec::new();
    for p in pairs {
        let budget = p.vanilla.log.first_epoch_reaching(TARGET).unwrap_or(p.vanilla.log.rows().len());
        let vanilla = p.vanilla.log.row_at(budget).map_or(f64::NAN, |r| r.metric());
        let cfg = RunConfig {
            c_detach: true,
            detach_prob_c: 0.5,
            epochs: budget,
            ..copying(p.seed)
        };
        let c = train_on(&cfg, &build_dataset(&cfg)?)?;
        let recall = c.log.last().map_or(f64::NAN, |r| r.metric());
        ok &= recall < vanilla;
        parts.push(format!("seed {}: {recall:.4} vs {vanilla:.4} after {budget} epochs", p.seed));
    }
    Ok(outcome(ok, format!("c-detach 0.5 vs vanilla recall [{}]", parts.join(", "))))
}

fn criterion_5() -> Outcome {
    let started = Instant::now();
    let model = Model::init(64, COPY_VOCAB, COPY_VOCAB, &mut Rng::new(1).derive(streams::INIT)).expect("positive sizes");
    let xs = probe_inputs(50, 1);
    let w = WeightIndex::new(MatrixId::Fh, 0, 1);
    let rows = path_report(&model.lstm, &xs, &w, &[1.0, 2.0, 4.0]).expect("valid weight");
    let s = summarize(&rows);
    let secs = started.elapsed().as_secs_f64();
    let increasing = s.windows(2).all(|p| p[1].max_abs_b > p[0].max_abs_b);
    let bounded = s.iter().all(|x| x.a_within_bound);
    let maxima: Vec<String> = s
        .iter()
        .map(|x| format!("s={}: max|B| {:.4}, max|A| {:.4}", x.weight_scale, x.max_abs_b, x.max_abs_a))
        .collect();
    outcome(
        increasing && bounded && secs < 60.0,
        format!(
            "[{}]; increasing {increasing}, A within bound {bounded}, {secs:.1}s",
            maxima.join("; ")
        ),
    )
}

fn criterion_8() -> Result<Outcome, TrainError> {
    let cmp = compare_flops(&copying(1), 100)?;
    let checks = flops_report(&cmp);
    let passed = checks.iter().all(|c| c.passed);
    let detail: Vec<String> = checks.iter().map(|c| format!("{}: {}", c.name, c.detail)).collect();
    Ok(outcome(passed, detail.join("; ")))
}

fn criterion_9() -> Result<Outcome, TrainError> {
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let cfg = RunConfig {
            lr: 5e-4,
            epochs: NOCLIP_EPOCHS,
            clip: ClipSettings {
                enabled: false,
                max_norm: 1.0,
            },
            ..copying(seed)
        };
        let data = build_dataset(&cfg)?;
        let describe = |r: Result<TrainOutcome, TrainError>| -> Result<(bool, String), TrainError> {
            match r {
                Ok(o) => {
                    let best = o.log.best_metric().unwrap_or(f64::NAN);
                    let last = o.log.last().map_or(f64::NAN, |r| r.metric());
                    Ok((true, format!("finite, best {best:.4}, last {last:.4}")))
                }
                Err(TrainError::Diverged { what, epoch, batch, .. }) => {
                    Ok((false, format!("non-finite {what} at epoch {epoch} batch {batch}")))
                }
                Err(e) => Err(e),
            }
        };
        let (h_ok, h) = describe(train_on(&RunConfig { detach_prob: 0.25, ..cfg.clone() }, &data))?;
        let (_, v) = describe(train_on(&cfg, &data))?;
        ok &= h_ok;
        parts.push(format!("seed {seed}: h-detach {h}; vanilla (recorded) {v}"));
    }
    Ok(outcome(ok, format!("{NOCLIP_EPOCHS} epochs without clipping [{}]", parts.join(" | "))))
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("HDETACH_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/mnist-subset"))
}

fn criterion_10() -> Result<Outcome, TrainError> {
    let cfg = RunConfig {
        task: Task::Mnist,
        mnist_dir: Some(mnist_dir()),
        downsample: true,
        hidden_size: 64,
        batch: 5,
        lr: 3e-3,
        epochs: 5,
        train_size: 10_000,
        val_size: 10_000,
        detach_prob: 0.25,
        audit_every: 50,
        seed: 1,
        ..RunConfig::default()
    };
    let data = build_dataset(&cfg)?;
    match train_on(&cfg, &data) {
        Ok(o) => {
            let acc = o.log.best_metric().unwrap_or(f64::NAN);
            let curve: Vec<String> = o.log.rows().iter().map(|r| format!("{:.4}", r.metric())).collect();
            Ok(outcome(
                acc >= 0.80 && o.audits.checked > 0,
                format!(
                    "validation accuracy by epoch [{}], {} forward audits passed",
                    curve.join(", "),
                    o.audits.checked
                ),
            ))
        }
        Err(TrainError::Diverged { what, epoch, batch, .. }) => Ok(outcome(
            false,
            format!("non-finite {what} at epoch {epoch} batch {batch}"),
        )),
        Err(TrainError::Audit { epoch, batch, detail }) => Ok(outcome(
            false,
            format!("forward audit failed at epoch {epoch} batch {batch}: {detail}"),
        )),
        Err(e) => Err(e),
    }
}

fn selected() -> Vec<usize> {
    match std::env::var("HDETACH_ACCEPTANCE") {
        Ok(list) if !list.trim().is_empty() => list.split(',').filter_map(|s| s.trim().parse().ok()).collect(),
        _ => (1..=10).collect(),
    }
}

fn main() -> ExitCode {
    let wanted = selected();
    let want = |k: usize| wanted.contains(&k);
    let mut failed = 0;
    let mut report = |k: usize, name: &str, started: Instant, result: Result<Outcome, TrainError>| {
        let o = result.unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        if !o.passed {
            failed += 1;
        }
        println!(
            "criterion {k:>2} [{}] {name}: {} ({:.1}s)",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail,
            started.elapsed().as_secs_f64()
        );
    };

    let t = Instant::now();
    if want(1) {
        report(1, "gradient oracles", t, Ok(suite(verify_fd(1), Some(60.0))));
    }
    let t = Instant::now();
    if want(2) {
        report(2, "full recursion equals BPTT", t, Ok(suite(verify_thm1(1), Some(60.0))));
    }
    let t = Instant::now();
    if want(3) {
        report(3, "detached recursion equals masked BPTT", t, Ok(suite(verify_thm2(1), None)));
    }
    let t = Instant::now();
    if want(4) {
        report(4, "expected detached recursion", t, Ok(suite(verify_corollary(1), None)));
    }
    let t = Instant::now();
    if want(5) {
        report(5, "hidden-path growth with recurrent scale", t, Ok(criterion_5()));
    }
    if want(6) || want(7) {
        let t = Instant::now();
        match run_copy_pairs() {
            Ok((pairs, secs)) => {
                if want(6) {
                    report(6, "copying convergence", t, Ok(criterion_6(&pairs, secs)));
                }
                let t = Instant::now();
                if want(7) {
                    report(7, "c-detach ablation", t, criterion_7(&pairs));
                }
            }
            Err(e) => {
                let msg = e.to_string();
                for (k, name) in [(6, "copying convergence"), (7, "c-detach ablation")] {
                    if want(k) {
                        report(k, name, t, Ok(outcome(false, format!("copying runs failed: {msg}"))));
                    }
                }
            }
        }
    }
    let t = Instant::now();
    if want(8) {
        report(8, "backward work reduction", t, criterion_8());
    }
    let t = Instant::now();
    if want(9) {
        report(9, "training without clipping", t, criterion_9());
    }
    let t = Instant::now();
    if want(10) {
        report(10, "downsampled sequential MNIST", t, criterion_10());
    }

    println!("{} of {} criteria passed", wanted.len() - failed, wanted.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
