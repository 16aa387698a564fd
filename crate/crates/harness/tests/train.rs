use std::path::Path;
use std::process::Command;

use hdetach_core::checkpoint::Checkpoint;
use hdetach_core::numerics::Rng;
use hdetach_harness::config::{RunConfig, Task};
use hdetach_harness::data::{build_dataset, streams, Dataset};
use hdetach_harness::engine::MaskGranularity;
use hdetach_harness::model::Model;
use hdetach_harness::train::{train, train_on, TrainError};
use hdetach_harness::transfer::evaluate_transfer;

fn tiny(seed: u64) -> RunConfig {
    RunConfig {
        delay: 4,
        hidden_size: 8,
        batch: 16,
        epochs: 3,
        train_size: 96,
        val_size: 40,
        seed,
        audit_every: 2,
        ..RunConfig::default()
    }
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn same_config_gives_identical_log_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let cfg = RunConfig {
            detach_prob: 0.3,
            out_dir: Some(dir.path().join(name)),
            ..tiny(7)
        };
        train(&cfg).unwrap();
        (read(&dir.path().join(name).join("runlog.csv")), read(&dir.path().join(name).join("final.json")))
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a, b);
    assert_eq!(a.0.lines().count(), 4);
    let other = train(&RunConfig { detach_prob: 0.3, ..tiny(8) }).unwrap();
    assert_ne!(other.log.to_csv(), a.0);
}

#[test]
fn zero_epochs_give_empty_log_and_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        epochs: 0,
        out_dir: Some(dir.path().to_path_buf()),
        ..tiny(3)
    };
    let out = train(&cfg).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.best_epoch, None);
    assert_eq!(read(&dir.path().join("runlog.csv")).lines().count(), 1);
    let init = Model::init(8, 10, 10, &mut Rng::new(3).derive(streams::INIT)).unwrap();
    for file in ["best.json", "final.json"] {
        let ck = Checkpoint::load(&dir.path().join(file)).unwrap();
        assert_eq!(Model::from_checkpoint(&ck).unwrap(), init, "{file}");
    }
    assert!(dir.path().join("config.toml").exists());
}

#[test]
fn zero_detach_probability_matches_vanilla() {
    let vanilla = train(&tiny(5)).unwrap();
    let variants = [
        RunConfig {
            detach_prob: 0.0,
            c_detach: true,
            detach_prob_c: 0.0,
            ..tiny(5)
        },
        RunConfig {
            mask_granularity: MaskGranularity::PerSample,
            ..tiny(5)
        },
    ];
    for cfg in variants {
        let out = train(&cfg).unwrap();
        assert_eq!(out.log.to_csv(), vanilla.log.to_csv());
        assert_eq!(out.final_model, vanilla.final_model);
    }
    let detached = train(&RunConfig { detach_prob: 0.5, ..tiny(5) }).unwrap();
    assert_ne!(detached.final_model, vanilla.final_model);
}

#[test]
fn detaching_everything_only_removes_recurrent_work() {
    let all = train(&RunConfig { detach_prob: 1.0, ..tiny(2) }).unwrap();
    let none = train(&tiny(2)).unwrap();
    let n = 8u64;
    let steps = 4 + 20;
    // Each detached step drops the 4n×n recurrent product for every sample.
    let saved = 16 * steps * 4 * n * n;
    for (a, b) in all.batch_macs.iter().zip(&none.batch_macs) {
        assert_eq!(b - a, saved);
    }
}

#[test]
fn audits_run_and_best_checkpoint_matches_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        detach_prob: 0.25,
        c_detach: true,
        detach_prob_c: 0.25,
        out_dir: Some(dir.path().to_path_buf()),
        ..tiny(11)
    };
    let out = train(&cfg).unwrap();
    assert_eq!(out.audits.checked, (96 / 16) * 3 / 2);
    let best = Model::from_checkpoint(&Checkpoint::load(&dir.path().join("best.json")).unwrap()).unwrap();
    assert_eq!(best, out.best);
    let best_epoch = out.best_epoch.unwrap();
    assert_eq!(out.log.row_at(best_epoch).unwrap().metric(), out.log.best_metric().unwrap());
    let snapshot = RunConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(snapshot, cfg);
}

#[test]
fn stop_at_ends_training_early() {
    let out = train(&RunConfig {
        stop_at: Some(0.0),
        ..tiny(1)
    })
    .unwrap();
    assert_eq!(out.log.rows().len(), 1);
}

#[test]
fn divergence_reports_context() {
    let cfg = RunConfig {
        lr: f64::MAX,
        clip: hdetach_harness::config::ClipSettings {
            enabled: false,
            max_norm: 1.0,
        },
        ..tiny(1)
    };
    match train(&cfg) {
        Err(TrainError::Diverged { epoch, log, .. }) => assert_eq!(log.rows().len(), epoch - 1),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log)),
    }
}

#[test]
fn transfer_at_training_delay_matches_validation() {
    let cfg = RunConfig {
        delay: 2,
        hidden_size: 16,
        batch: 20,
        epochs: 4,
        train_size: 400,
        val_size: 2_000,
        lr: 1e-2,
        ..tiny(4)
    };
    let data = build_dataset(&cfg).unwrap();
    let out = train_on(&cfg, &data).unwrap();
    let last = out.log.last().unwrap().val_recall_acc.unwrap();
    let row = evaluate_transfer(&out.final_model, &[2], 2_000, 99)[0];
    assert!((row.recall_acc - last).abs() < 0.05, "transfer {} vs validation {last}", row.recall_acc);
}

fn write_idx(dir: &Path, prefix: &str, images: &[Vec<u8>], labels: &[u8], side: usize) {
    let mut img = vec![0, 0, 8, 3];
    for v in [images.len(), side, side] {
        img.extend_from_slice(&(v as u32).to_be_bytes());
    }
    for im in images {
        img.extend_from_slice(im);
    }
    let mut lbl = vec![0, 0, 8, 1];
    lbl.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lbl.extend_from_slice(labels);
    std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), img).unwrap();
    std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), lbl).unwrap();
}

fn pixel_config(dir: &Path, task: Task) -> RunConfig {
    RunConfig {
        task,
        hidden_size: 4,
        batch: 4,
        epochs: 1,
        train_size: 1_000,
        val_size: 1_000,
        downsample: true,
        mnist_dir: Some(dir.to_path_buf()),
        permutation_seed: 9,
        ..RunConfig::default()
    }
}

#[test]
fn pixel_datasets_split_downsample_and_permute() {
    let dir = tempfile::tempdir().unwrap();
    let images: Vec<Vec<u8>> = (0..12).map(|i| (0..16).map(|p| (i * 16 + p) as u8).collect()).collect();
    let labels: Vec<u8> = (0..12).map(|i| i % 10).collect();
    write_idx(dir.path(), "train", &images, &labels, 4);

    let Dataset::Pixels { train, val } = build_dataset(&pixel_config(dir.path(), Task::Mnist)).unwrap() else {
        panic!("pixel task");
    };
    assert_eq!((train.len(), val.len()), (10, 2));
    assert_eq!(train[0].pixels.len(), 4);
    // Top-left 2×2 block of image 0 holds 0, 1, 4 and 5.
    assert!((train[0].pixels[0] - 2.5 / 255.0).abs() < 1e-12);
    assert_eq!(val[1].label, 1);

    let Dataset::Pixels { train: permuted, .. } = build_dataset(&pixel_config(dir.path(), Task::Pmnist)).unwrap() else {
        panic!("pixel task");
    };
    let mut a = train[3].pixels.clone();
    let mut b = permuted[3].pixels.clone();
    assert_ne!(a, b);
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    assert_eq!(a, b);

    write_idx(dir.path(), "val", &images[..3], &labels[..3], 4);
    let Dataset::Pixels { train, val } = build_dataset(&pixel_config(dir.path(), Task::Mnist)).unwrap() else {
        panic!("pixel task");
    };
    assert_eq!((train.len(), val.len()), (12, 3));

    let out = train_on(&pixel_config(dir.path(), Task::Mnist), &Dataset::Pixels { train, val }).unwrap();
    assert!(out.log.last().unwrap().val_acc.is_some());
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hdetach"))
}

#[test]
fn cli_train_transfer_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, "delay = 3\nhidden_size = 6\nbatch = 10\nepochs = 2\ntrain_size = 40\nval_size = 20\n").unwrap();
    let out = dir.path().join("out");
    let status = cli()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .args(["--detach-prob", "0.25", "--out-dir"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    for f in ["config.toml", "runlog.csv", "timing.csv", "best.json", "final.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let snapshot = RunConfig::load(&out.join("config.toml")).unwrap();
    assert_eq!((snapshot.delay, snapshot.hidden_size, snapshot.detach_prob), (3, 6, 0.25));

    let t_out = dir.path().join("transfer");
    let status = cli()
        .args(["transfer", "--delays", "3,6", "--count", "20", "--checkpoint"])
        .arg(out.join("best.json"))
        .arg("--out-dir")
        .arg(&t_out)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = read(&t_out.join("transfer.csv"));
    assert_eq!(csv.lines().next().unwrap(), "delay,recall_acc,full_acc");
    assert_eq!(csv.lines().count(), 3);

    let code = |args: &[&str]| cli().args(args).output().unwrap().status.code();
    assert_eq!(code(&["train", "--detach-prob", "1.5"]), Some(2));
    assert_eq!(code(&["train", "--config", "/nonexistent.toml"]), Some(2));
    assert_eq!(code(&["train", "--task", "mnist", "--mnist-dir", "/nonexistent"]), Some(3));
    assert_eq!(code(&["transfer", "--checkpoint", "/nonexistent.json"]), Some(3));
    assert_eq!(code(&["verify", "--suite", "thm1"]), Some(0));
}

#[test]
fn cli_path_report_marks_empty_ratio() {
    let output = cli()
        .args(["path-report", "--hidden-size", "4", "--delay", "2", "--scales", "0,1"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = String::from_utf8(output.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * (2 + 20));
    // Scale 0: no hidden-path contribution anywhere. Scale 1: the zero
    // initial state keeps it zero for two steps only.
    assert!(rows[..22].iter().all(|r| r.split(',').nth(4) == Some("")));
    assert!(rows[22..24].iter().all(|r| r.split(',').nth(4) == Some("")));
    assert!(rows[24..].iter().all(|r| r.split(',').nth(4) != Some("")));
}
